import logging
import math

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from torch import nn

from refseg.augment import template_augment
from refseg.data import binarize, class_set, load_split
from refseg.metrics import evaluate
from refseg.prompts import NO_PROMPT, PromptKind, simulate_prompt
from refseg.storage import (
    CheckpointError,
    load_checkpoint,
    restore,
    save_checkpoint,
)
from refseg.templatebank import RetrievalError, compute_descriptor
from refseg.types import Stage1Record
from refseg.utils import make_rng, substream, to_tensor


logger = logging.getLogger(__name__)


FEATURE_STRIDE = 4
INPUT_MULTIPLE = 8
NORM_GROUPS = 8
SIMULATED_KINDS = (PromptKind.PROB_MAP, PromptKind.BOX, PromptKind.POINTS)


class TrainingDiverged(Exception):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"Loss became non-finite at step {step}")


class NonFiniteLogits(ValueError):
    pass


@dataclass
class SegmenterConfig:
    num_classes: int = 2
    feature_channels: int = 64
    feature_stride: int = FEATURE_STRIDE
    prompt_dim: int = 64
    num_heads: int = 4
    lambda_txt: float = 1.0
    lambda_mask: float = 1.0
    lambda_dice: float = 0.5
    lambda_bce: float = 0.5
    eps: float = 1e-6
    use_prompt: bool = True
    use_memory: bool = True

    def __post_init__(self):
        for name in ("lambda_txt", "lambda_mask", "lambda_dice", "lambda_bce"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        sizes = ("num_classes", "feature_channels", "prompt_dim", "num_heads")
        for name in sizes:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.feature_stride != FEATURE_STRIDE:
            raise ValueError(
                f"Only feature stride {FEATURE_STRIDE} is supported"
            )
        if self.feature_channels % self.num_heads:
            raise ValueError("feature_channels must be divisible by num_heads")

    def to_dict(self):
        return asdict(self)


@dataclass
class PretrainConfig:
    steps: int = 400
    learning_rate: float = 0.2
    batch_size: int = 8
    prompt_prob: float = 0.5
    temperature: float = 0.1
    log_interval: int = 50

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.prompt_prob <= 1.0:
            raise ValueError("prompt_prob must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


@dataclass
class SegmenterOutputs:
    f_img: torch.Tensor
    h_seg: Optional[torch.Tensor]
    p: torch.Tensor
    f_memory: Optional[torch.Tensor]
    q: torch.Tensor
    logits: torch.Tensor
    class_logits: torch.Tensor


def positional_encoding(channels, height, width):
    """Fixed 2D sinusoidal encoding, (height·width) × channels."""
    quarter = channels // 4
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(quarter, dtype=torch.float64)
        / max(quarter, 1)
    )
    ys = torch.arange(height, dtype=torch.float64)[:, None] * freqs
    xs = torch.arange(width, dtype=torch.float64)[:, None] * freqs
    grid_y = ys[:, None, :].expand(height, width, quarter)
    grid_x = xs[None, :, :].expand(height, width, quarter)
    encoding = torch.cat(
        [grid_y.sin(), grid_y.cos(), grid_x.sin(), grid_x.cos()], dim=-1
    )
    pad = channels - encoding.shape[-1]
    if pad:
        encoding = F.pad(encoding, (0, pad))
    return encoding.reshape(height * width, channels)


def conv_block(in_channels, out_channels, stride=1):
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1),
        nn.GroupNorm(math.gcd(NORM_GROUPS, out_channels), out_channels),
        nn.GELU(),
    )


class Encoder(nn.Module):
    def __init__(self, in_channels, channels):
        super().__init__()
        self.down = nn.Sequential(
            conv_block(in_channels, 16, stride=2),
            conv_block(16, 32, stride=2),
            conv_block(32, 64, stride=2),
        )
        self.up = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            conv_block(64, channels),
        )

    def forward(self, x):
        return self.up(self.down(x))


def up_block(in_channels, out_channels):
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
        conv_block(in_channels, out_channels),
    )


class Segmenter(nn.Module):
    """
    Reference-guided mask decoder.

    The query image and the template (image, class mask) pass through one
    shared encoder. Template features condition the query features through
    residual cross-attention; a learned per-class token, projected by an
    MLP, is broadcast-added to the query features; an optional spatial
    prompt raster is downscaled and concatenated into the decoder input.
    The output head sees the upsampled decoder features next to the query
    image at full resolution.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        c, d = config.feature_channels, config.prompt_dim
        self.encoder = Encoder(2, c)
        self.prompt_tokens = nn.Parameter(
            0.1 * torch.randn(config.num_classes, d)
        )
        self.prompt_mlp = nn.Sequential(
            nn.Linear(d, d), nn.GELU(), nn.Linear(d, d)
        )
        self.prompt_proj = nn.Linear(d, c)
        self.memory_proj = nn.Conv2d(c, c, 1)
        self.attention = nn.MultiheadAttention(
            c, config.num_heads, batch_first=True
        )
        nn.init.zeros_(self.attention.out_proj.weight)
        nn.init.zeros_(self.attention.out_proj.bias)
        self.mask_downscaling = nn.Sequential(
            nn.Conv2d(1, 16, 2, stride=2),
            nn.GELU(),
            nn.Conv2d(16, c, 2, stride=2),
        )
        self.no_prompt_embed = nn.Parameter(torch.zeros(c))
        self.decoder = nn.Sequential(
            conv_block(3 * c, 64),
            up_block(64, 32),
            up_block(32, 16),
        )
        self.head = nn.Sequential(
            conv_block(16 + 1, 16),
            nn.Conv2d(16, config.num_classes, 1),
        )
        self.class_head = nn.Linear(2 * c, config.num_classes + 1)

    def encode(self, images, masks=None):
        if masks is None:
            masks = torch.zeros_like(images)
        return self.encoder(torch.cat([images, masks], dim=1))

    def attend(self, f_img, f_memory):
        b, c, h, w = f_img.shape
        pos = positional_encoding(c, h, w).to(f_img.dtype)
        tokens = f_img.flatten(2).transpose(1, 2)
        memory = f_memory.flatten(2).transpose(1, 2)
        attended, _ = self.attention(
            tokens + pos, memory + pos, memory, need_weights=False
        )
        return f_img + attended.transpose(1, 2).reshape(b, c, h, w)

    def forward(
        self,
        images,
        class_ids,
        template_images=None,
        template_masks=None,
        spatial=None,
        spatial_present=None,
        embedding=None,
    ):
        """
        images, template_images, template_masks and spatial are B×1×H×W;
        class_ids holds labels 1..C; spatial_present flags the items whose
        spatial raster is used. embedding replaces the class token lookup.
        """
        config = self.config
        b, _, height, width = images.shape
        if height % INPUT_MULTIPLE or width % INPUT_MULTIPLE:
            raise ValueError(
                f"Image sides must be multiples of {INPUT_MULTIPLE}"
            )
        class_ids = torch.as_tensor(class_ids, dtype=torch.long)
        if class_ids.min() < 1 or class_ids.max() > config.num_classes:
            raise ValueError(f"class_id must lie in 1..{config.num_classes}")

        f_img = self.encode(images)
        h_seg = None
        p = f_img
        if config.use_prompt:
            token = embedding
            if token is None:
                token = self.prompt_tokens[class_ids - 1]
            h_seg = self.prompt_mlp(token)
            p = f_img + self.prompt_proj(h_seg)[:, :, None, None]

        f_memory = None
        q = f_img
        if config.use_memory:
            if template_images is None or template_masks is None:
                raise ValueError(
                    "A template is required when memory is enabled"
                )
            f_memory = self.memory_proj(
                self.encode(template_images, template_masks)
            )
            q = self.attend(f_img, f_memory)

        if spatial is None:
            spatial = torch.zeros_like(images)
            spatial_present = torch.zeros(b, dtype=torch.bool)
        dense = self.mask_downscaling(spatial)
        present = torch.as_tensor(spatial_present, dtype=torch.bool)
        dense = torch.where(
            present[:, None, None, None],
            dense,
            self.no_prompt_embed[None, :, None, None].expand_as(dense),
        )

        decoded = self.decoder(torch.cat([p, q, dense], dim=1))
        maps = self.head(torch.cat([decoded, images], dim=1))
        logits = maps[torch.arange(b), class_ids - 1]
        pooled = torch.cat([p.mean(dim=(2, 3)), q.mean(dim=(2, 3))], dim=1)
        return SegmenterOutputs(
            f_img=f_img,
            h_seg=h_seg,
            p=p,
            f_memory=f_memory,
            q=q,
            logits=logits,
            class_logits=self.class_head(pooled),
        )


def build_segmenter(config, seed=0):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(substream(seed, "segmenter-init"))
        model = Segmenter(config)
    return model.double()


def _stack(rasters):
    return torch.stack([to_tensor(r) for r in rasters])


def make_batch(items):
    """
    items: dicts with image, class_id and optional template_image,
    template_mask (binary) and spatial (SpatialPrompt).
    """
    images = _stack([item["image"] for item in items])
    h, w = images.shape[-2:]
    kwargs = {"class_ids": [item["class_id"] for item in items]}
    if all(item.get("template_image") is not None for item in items):
        kwargs["template_images"] = _stack([i["template_image"] for i in items])
        kwargs["template_masks"] = _stack([i["template_mask"] for i in items])
    rasters, present = [], []
    for item in items:
        raster = item.get("spatial", NO_PROMPT).rasterize(h, w)
        present.append(raster is not None)
        rasters.append(np.zeros((h, w)) if raster is None else raster)
    if any(present):
        kwargs["spatial"] = _stack(rasters)
        kwargs["spatial_present"] = torch.tensor(present)
    return images, kwargs


def forward(model, image, template, class_id, spatial=NO_PROMPT):
    """
    Single-slice forward. template is an (image, label mask) pair, a
    TemplateEntry, or None when memory is disabled.
    """
    item = {"image": image, "class_id": class_id, "spatial": spatial}
    if template is not None:
        t_image, t_mask = (
            (template.image, template.mask)
            if hasattr(template, "image")
            else template
        )
        item["template_image"] = t_image
        item["template_mask"] = binarize(t_mask, class_id)
    images, kwargs = make_batch([item])
    return model(images, **kwargs)


# losses

def mask_loss(logits, target, config):
    """
    λ_dice·(1 − 2Σmp / (Σm + Σp + ε)) + λ_bce·BCE(p, m), p = sigmoid(z).

    Batched inputs average the Dice term over items; BCE is the mean over
    all pixels.
    """
    if not torch.all(torch.isfinite(logits)):
        raise NonFiniteLogits("mask_loss received non-finite logits")
    target = torch.as_tensor(target, dtype=logits.dtype)
    if target.shape != logits.shape:
        raise ValueError(
            f"Target shape {tuple(target.shape)} does not match logits "
            f"{tuple(logits.shape)}"
        )
    if logits.ndim == 2:
        logits, target = logits[None], target[None]
    probs = torch.sigmoid(logits)
    overlap = (probs * target).sum(dim=(1, 2))
    total = target.sum(dim=(1, 2)) + probs.sum(dim=(1, 2))
    dice = (1.0 - 2.0 * overlap / (total + config.eps)).mean()
    bce = F.binary_cross_entropy_with_logits(logits, target)
    return config.lambda_dice * dice + config.lambda_bce * bce


def text_loss(class_logits, class_id):
    if class_logits.ndim == 1:
        class_logits = class_logits[None]
    targets = torch.as_tensor(class_id, dtype=torch.long).reshape(-1)
    return F.cross_entropy(class_logits, targets)


def stage1_loss(outputs, target, class_id, config):
    text = text_loss(outputs.class_logits, class_id)
    logits = outputs.logits
    target = torch.as_tensor(target, dtype=logits.dtype).reshape(logits.shape)
    mask = mask_loss(logits, target, config)
    total = config.lambda_txt * text + config.lambda_mask * mask
    breakdown = {
        "total": float(total.detach()),
        "text": float(text.detach()),
        "mask": float(mask.detach()),
    }
    return total, breakdown


# stage-1 training

def _pick_class(rng, mask, num_classes):
    present = sorted(class_set(mask))
    pool = present or list(range(1, num_classes + 1))
    return int(pool[rng.integers(len(pool))])


def _draw_template(bank, query, class_id, seed, patient):
    try:
        return bank.sample_template(
            query, class_id, seed, exclude_patient=patient
        )
    except RetrievalError:
        logger.debug(
            f"No class {class_id} template outside patient {patient}, "
            f"retrieving from the whole bank"
        )
        return bank.sample_template(query, class_id, seed)


def _stage1_item(model, bank, sample, pretrain, seed, step, b):
    entry, image, mask = sample
    config = model.config
    rng = make_rng(seed, "stage1-item", step, b)
    class_id = _pick_class(rng, mask, config.num_classes)
    target = binarize(mask, class_id)
    item = {"image": image, "class_id": class_id, "target": target}
    if config.use_memory:
        draw = _draw_template(
            bank,
            compute_descriptor(image),
            class_id,
            substream(seed, "stage1-template", step, b),
            entry["patient"],
        )
        template = bank.entries[draw.chosen]
        view = template_augment(
            template.image,
            template.mask,
            substream(seed, "stage1-augment", step, b),
        )
        item["template_image"] = view.image
        item["template_mask"] = binarize(view.mask, class_id)
    item["spatial"] = NO_PROMPT
    if rng.random() < pretrain.prompt_prob:
        kind = SIMULATED_KINDS[rng.integers(len(SIMULATED_KINDS))]
        item["spatial"] = simulate_prompt(
            target, kind, substream(seed, "stage1-prompt", step, b)
        )
    return item


def train_stage1(manifest, bank, config, pretrain=None, seed=0, model=None):
    """
    Pretrain the segmenter on the labeled slices of manifest.

    Each step draws batch_size (slice, class, template) triples, augments
    the template, optionally adds a simulated spatial prompt and takes one
    SGD step on the batch mean of stage1_loss. Returns the model and the
    per-step loss curve.
    """
    pretrain = pretrain or PretrainConfig()
    model = model or build_segmenter(config, seed)
    samples = [
        sample
        for sample in load_split(manifest, "labeled")
        if sample[2] is not None
    ]
    if pretrain.steps and not samples:
        raise RetrievalError("No labeled slices to pretrain on")
    optimizer = torch.optim.SGD(model.parameters(), lr=pretrain.learning_rate)
    curve = []
    model.train()
    for step in range(pretrain.steps):
        rng = make_rng(seed, "stage1-batch", step)
        picks = rng.integers(len(samples), size=pretrain.batch_size)
        items = [
            _stage1_item(model, bank, samples[i], pretrain, seed, step, b)
            for b, i in enumerate(picks)
        ]
        images, kwargs = make_batch(items)
        outputs = model(images, **kwargs)
        targets = torch.stack([to_tensor(i["target"])[0] for i in items])
        loss, breakdown = stage1_loss(
            outputs, targets, kwargs["class_ids"], config
        )
        if not math.isfinite(breakdown["total"]):
            raise TrainingDiverged(step)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        curve.append(Stage1Record(step=step, **breakdown))
        last = step + 1 == pretrain.steps
        if (step + 1) % pretrain.log_interval == 0 or last:
            logger.info(
                f"stage1 step {step + 1}/{pretrain.steps} "
                f"loss={breakdown['total']:.4f} mask={breakdown['mask']:.4f} "
                f"text={breakdown['text']:.4f}"
            )
    model.eval()
    return model, curve


# inference

def predict_logits(model, image, bank, class_id, spatial=NO_PROMPT, seed=0):
    template = None
    if model.config.use_memory:
        draw = bank.sample_template(compute_descriptor(image), class_id, seed)
        logger.debug(f"predict class={class_id} template={draw.chosen}")
        template = bank.entries[draw.chosen]
    model.eval()
    with torch.no_grad():
        outputs = forward(model, image, template, class_id, spatial)
    return outputs.logits[0].numpy()


def predict(model, image, bank, class_id, spatial=NO_PROMPT, seed=0):
    """Foreground probability map of class_id."""
    logits = predict_logits(model, image, bank, class_id, spatial, seed)
    return torch.sigmoid(torch.as_tensor(logits)).numpy()


def assemble_class_probs(foreground_logits):
    """
    C×H×W foreground logits -> (C+1)×H×W probabilities with a fixed
    background logit of 0, plus argmax labels (ties go to the lower label).
    """
    foreground_logits = np.asarray(foreground_logits, dtype=np.float64)
    logits = np.concatenate(
        [np.zeros((1,) + foreground_logits.shape[1:]), foreground_logits]
    )
    logits = logits - logits.max(axis=0, keepdims=True)
    weights = np.exp(logits)
    probs = weights / weights.sum(axis=0, keepdims=True)
    return probs, np.argmax(probs, axis=0)


def assistant_label_map(model, image, bank, seed=0, spatial=None):
    """
    One class-conditional prediction per foreground class, assembled into
    class probabilities and a label map. spatial maps class ids to prompts.
    """
    spatial = spatial or {}
    logits = [
        predict_logits(
            model,
            image,
            bank,
            class_id,
            spatial.get(class_id, NO_PROMPT),
            substream(seed, "assistant-class", class_id),
        )
        for class_id in range(1, model.config.num_classes + 1)
    ]
    return assemble_class_probs(np.stack(logits))


def evaluate_assistant(model, manifest, bank, split="test", seed=0):
    preds, truths = [], []
    for index, (_, image, mask) in enumerate(load_split(manifest, split)):
        _, labels = assistant_label_map(
            model, image, bank, substream(seed, "assistant-eval", index)
        )
        preds.append(labels)
        truths.append(mask)
    report = evaluate(preds, truths, model.config.num_classes)
    logger.info(f"Assistant on {split}: mean dice {report.mean_dice:.4f}")
    return report


# checkpoints

CHECKPOINT_KIND = "segmenter"


def save_segmenter(model, path, seed, run_hash=None):
    return save_checkpoint(
        path,
        CHECKPOINT_KIND,
        model.config.to_dict(),
        model.state_dict(),
        seed,
        run_hash,
    )


def load_segmenter(path):
    payload = load_checkpoint(path, CHECKPOINT_KIND)
    try:
        config = SegmenterConfig(**payload["config"])
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"Invalid segmenter configuration in {path}: {e}")
    model = restore(build_segmenter(config), payload["tensors"])
    model.eval()
    return model, payload

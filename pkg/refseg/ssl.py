import copy
import logging
import math

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from torch import nn

from refseg.augment import strong_augment, weak_augment
from refseg.data import load_split, pixel_mean
from refseg.metrics import evaluate
from refseg.prompts import NO_PROMPT, PromptKind, SpatialPrompt, bounding_box
from refseg.segmenter import (
    Encoder,
    TrainingDiverged,
    assistant_label_map,
    up_block,
)
from refseg.storage import (
    CheckpointError,
    load_checkpoint,
    restore,
    save_checkpoint,
)
from refseg.types import Stage2Record
from refseg.utils import make_generator, make_rng, substream, to_tensor


logger = logging.getLogger(__name__)


SCHEDULES = ("cosine", "linear", "teacher_only")
FEEDBACK_POINTS = 5
DROPOUT_PROB = 0.5


@dataclass
class SSLConfig:
    lambda_ce: float = 1.0
    lambda_dice: float = 1.0
    lambda_u: float = 1.0
    threshold: float = 0.95
    ema_decay: float = 0.99
    iterations: int = 500
    warmup: int = 100
    schedule: str = "cosine"
    feedback_start: float = 0.25
    feedback_kind: str = PromptKind.PROB_MAP.value
    labeled_batch: int = 4
    unlabeled_batch: int = 4
    dropout_prob: float = DROPOUT_PROB
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    eps: float = 1e-6
    channels: int = 32
    eval_interval: int = 100
    log_interval: int = 50
    use_assistant: bool = True
    use_feedback: bool = True

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        for name in ("lambda_ce", "lambda_dice", "lambda_u", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.warmup < 0:
            raise ValueError("warmup must be non-negative")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if not 0.0 <= self.feedback_start <= 1.0:
            raise ValueError("feedback_start must lie in [0, 1]")
        PromptKind(self.feedback_kind)
        if self.dropout_prob != DROPOUT_PROB:
            raise ValueError("Complementary dropout keeps channels with p=0.5")
        if min(self.labeled_batch, self.unlabeled_batch, self.channels) < 1:
            raise ValueError("Batch sizes and channels must be positive")

    def to_dict(self):
        return asdict(self)


class StudentNet(nn.Module):
    """Encoder g to a stride-4 feature map, decoder h back to C+1 logits."""

    def __init__(self, num_classes, channels=32):
        super().__init__()
        self.num_classes = num_classes
        self.channels = channels
        self.g = Encoder(1, channels)
        self.h = nn.Sequential(
            up_block(channels, channels),
            up_block(channels, 16),
            nn.Conv2d(16, num_classes + 1, 1),
        )

    def forward(self, x):
        return self.h(self.g(x))


def build_student(num_classes, channels, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(substream(seed, "student-init"))
        net = StudentNet(num_classes, channels)
    return net.double()


# complementary dropout

def draw_channel_mask(channels, seed, prob=DROPOUT_PROB):
    generator = make_generator(seed)
    keep = torch.rand(channels, generator=generator, dtype=torch.float64) < prob
    return keep.to(torch.float64).reshape(1, channels, 1, 1)


def perturb_features(e1, e2, channel_mask):
    """e_s1 = e1⊙M×2, e_s2 = e2⊙(1−M)×2."""
    return e1 * channel_mask * 2.0, e2 * (1.0 - channel_mask) * 2.0


def student_forward_dual(student, x_s1, x_s2, seed, channel_mask=None):
    """Logits of both strong views under one complementary channel mask."""
    if x_s1.shape != x_s2.shape:
        raise ValueError("Strong views must share a shape")
    if channel_mask is None:
        channel_mask = draw_channel_mask(student.channels, seed)
    e_s1, e_s2 = perturb_features(
        student.g(x_s1), student.g(x_s2), channel_mask
    )
    return student.h(e_s1), student.h(e_s2)


# losses

def supervised_loss(logits, labels, config):
    """
    λ_ce·CE + λ_dice·(1 − 2Σpy / (Σp + Σy + ε)), the Dice term averaged
    over foreground classes and batch items.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    ce = F.cross_entropy(logits, labels)
    probs = torch.softmax(logits, dim=1)[:, 1:]
    onehot = F.one_hot(labels, logits.shape[1]).permute(0, 3, 1, 2)[:, 1:]
    onehot = onehot.to(probs.dtype)
    overlap = (probs * onehot).sum(dim=(2, 3))
    total = probs.sum(dim=(2, 3)) + onehot.sum(dim=(2, 3))
    dice = (1.0 - 2.0 * overlap / (total + config.eps)).mean()
    return config.lambda_ce * ce + config.lambda_dice * dice


def pseudo_label_from_probs(probs, threshold):
    """Argmax labels (first maximum wins) and the max-probability mask."""
    probs = torch.as_tensor(probs)
    labels = probs.argmax(dim=1)
    confidence = probs.amax(dim=1)
    return labels, (confidence >= threshold).to(probs.dtype)


@dataclass
class PseudoLabelPair:
    teacher_probs: torch.Tensor
    teacher_labels: torch.Tensor
    confident: torch.Tensor
    assistant_probs: Optional[torch.Tensor] = None
    assistant_labels: Optional[torch.Tensor] = None


def teacher_pseudo_label(teacher, x_w, config):
    teacher.eval()
    with torch.no_grad():
        probs = torch.softmax(teacher(x_w), dim=1)
    labels, confident = pseudo_label_from_probs(probs, config.threshold)
    return PseudoLabelPair(
        teacher_probs=probs, teacher_labels=labels, confident=confident
    )


def assistant_pseudo_label(segmenter, bank, images, seed, spatial=None):
    """
    Per-class assistant predictions on each image, assembled over classes
    with a fixed background logit. spatial holds one {class_id: prompt}
    mapping per image.
    """
    spatial = spatial or [{} for _ in images]
    probs, labels = [], []
    for b, image in enumerate(images):
        class_probs, label_map = assistant_label_map(
            segmenter, image, bank, substream(seed, "assistant", b), spatial[b]
        )
        probs.append(class_probs)
        labels.append(label_map)
    return (
        torch.as_tensor(np.stack(probs)),
        torch.as_tensor(np.stack(labels), dtype=torch.long),
    )


@dataclass
class ScheduleWeights:
    alpha_t: float
    alpha_v: float


def schedule(t, total, kind="cosine"):
    """α_t = η(t), α_v = 1 − η(t); t beyond total is clamped."""
    if t < 0:
        raise ValueError("Iteration must be non-negative")
    t = min(t, total)
    if kind == "cosine":
        eta = 0.5 * (1.0 - math.cos(math.pi * t / total))
    elif kind == "linear":
        eta = t / total
    elif kind == "teacher_only":
        eta = 1.0
    else:
        raise ValueError(f"Unknown schedule {kind!r}")
    return ScheduleWeights(alpha_t=eta, alpha_v=1.0 - eta)


def masked_cross_entropy(logits, labels, confident):
    """
    Hard cross-entropy per image, summed over confident pixels and divided
    by their count; images without confident pixels give 0.
    """
    nll = F.cross_entropy(logits, labels, reduction="none")
    counts = confident.sum(dim=(1, 2))
    summed = (nll * confident).sum(dim=(1, 2))
    return torch.where(counts > 0, summed / counts.clamp(min=1.0), summed * 0.0)


def dual_stream_loss(logits_sf, logits_si, labels, confident):
    """Average of both strong streams against one hard label, 1/(2B) scaled."""
    batch = logits_sf.shape[0]
    per_image = masked_cross_entropy(logits_sf, labels, confident)
    per_image = per_image + masked_cross_entropy(logits_si, labels, confident)
    return per_image.sum() / (2.0 * batch)


def joint_unlabeled_loss(logits_sf, logits_si, pair, weights, config=None):
    """
    α_t·(H(p_sf, y_w) + H(p_si, y_w)) + α_v·(H(p_sf, y_v) + H(p_si, y_v)),
    with y_w the teacher and y_v the assistant hard labels, all masked by
    the teacher confidence. Returns the loss and both parts.
    """
    teacher = dual_stream_loss(
        logits_sf, logits_si, pair.teacher_labels, pair.confident
    )
    assistant = torch.zeros((), dtype=logits_sf.dtype)
    if weights.alpha_v > 0:
        if pair.assistant_labels is None:
            raise ValueError("Assistant weight is positive but no labels given")
        assistant = dual_stream_loss(
            logits_sf, logits_si, pair.assistant_labels, pair.confident
        )
    loss = weights.alpha_t * teacher + weights.alpha_v * assistant
    return loss, {
        "loss_u_teacher": float(weights.alpha_t * teacher.detach()),
        "loss_u_assistant": float(weights.alpha_v * assistant.detach()),
    }


def ema_update(teacher, student, decay):
    """θ_t ← γθ_t + (1−γ)θ_s over parameters and floating buffers."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1], got {decay}")
    t_state, s_state = teacher.state_dict(), student.state_dict()
    if {k: v.shape for k, v in t_state.items()} != {
        k: v.shape for k, v in s_state.items()
    }:
        raise ValueError("Teacher and student shapes differ")
    with torch.no_grad():
        for name, t_value in t_state.items():
            if t_value.is_floating_point():
                t_value.mul_(decay).add_(s_state[name], alpha=1.0 - decay)
    return teacher


def feedback_prompt(probs, kind):
    """Spatial prompt from a teacher foreground probability map."""
    kind = PromptKind(kind)
    probs = np.asarray(probs, dtype=np.float64)
    if kind is PromptKind.NONE:
        return NO_PROMPT
    if kind is PromptKind.PROB_MAP:
        raster = np.clip(probs, 0.0, 1.0)
        return SpatialPrompt(PromptKind.PROB_MAP, raster=raster)
    if kind is PromptKind.BOX:
        box = bounding_box(probs > 0.5)
        if box is None:
            return NO_PROMPT
        return SpatialPrompt(PromptKind.BOX, box=box)
    order = np.argsort(-probs.ravel(), kind="stable")[:FEEDBACK_POINTS]
    rows, cols = np.unravel_index(order, probs.shape)
    points = [(int(r), int(c), 1) for r, c in zip(rows, cols)]
    return SpatialPrompt(PromptKind.POINTS, points=points)


# training

@dataclass
class SSLState:
    student: StudentNet
    teacher: StudentNet
    iteration: int = 0
    history: list = field(default_factory=list)
    evaluations: list = field(default_factory=list)

    @property
    def final_report(self):
        return self.evaluations[-1][1] if self.evaluations else None


def predict_labels(net, images):
    net.eval()
    with torch.no_grad():
        logits = net(torch.stack([to_tensor(image) for image in images]))
    return logits.argmax(dim=1).numpy()


def evaluate_net(net, samples, num_classes):
    preds = [predict_labels(net, [image])[0] for _, image, _ in samples]
    return evaluate(preds, [mask for _, _, mask in samples], num_classes)


def _labeled_batch(samples, config, seed, t):
    picks = make_rng(seed, "ssl-labeled", t).integers(
        len(samples), size=config.labeled_batch
    )
    views = [
        weak_augment(
            samples[i][1],
            substream(seed, "ssl-labeled-view", t, b),
            mask=samples[i][2],
        )
        for b, i in enumerate(picks)
    ]
    images = torch.stack([to_tensor(v.image) for v in views])
    labels = torch.as_tensor(
        np.stack([v.mask for v in views]), dtype=torch.long
    )
    return images, labels


def _unlabeled_views(samples, config, seed, t, fill):
    picks = make_rng(seed, "ssl-unlabeled", t).integers(
        len(samples), size=config.unlabeled_batch
    )
    weak, strong1, strong2 = [], [], []
    for b, i in enumerate(picks):
        view = weak_augment(samples[i][1], substream(seed, "ssl-weak", t, b))
        weak.append(view)
        strong1.append(
            strong_augment(view, substream(seed, "ssl-strong1", t, b), fill)
        )
        strong2.append(
            strong_augment(view, substream(seed, "ssl-strong2", t, b), fill)
        )
    return weak, strong1, strong2


def _stack_views(views):
    return torch.stack([to_tensor(v.image) for v in views])


def _feedback(pair, config, t):
    if not config.use_feedback or t < config.feedback_start * config.iterations:
        return None
    probs = pair.teacher_probs.numpy()
    return [
        {
            c: feedback_prompt(probs[b, c], config.feedback_kind)
            for c in range(1, probs.shape[1])
        }
        for b in range(probs.shape[0])
    ]


def train_stage2(manifest, segmenter, bank, config, seed=0, student=None):
    """
    Student/EMA-teacher training on the labeled and unlabeled splits.
    The first warmup iterations train on labeled batches alone.

    With use_assistant the frozen segmenter provides a second hard
    pseudo-label on the weak view, weighted against the teacher by the
    schedule; past feedback_start·T iterations it receives the teacher's
    predictions as spatial prompts. Returns the final SSLState.
    """
    num_classes = manifest.num_classes
    use_assistant = config.use_assistant and segmenter is not None
    kind = config.schedule if use_assistant else "teacher_only"
    labeled = load_split(manifest, "labeled")
    unlabeled = load_split(manifest, "unlabeled", with_masks=False)
    test = load_split(manifest, "test")
    if not labeled:
        raise ValueError("Stage-2 training needs at least one labeled slice")
    fill = pixel_mean(manifest, "labeled", "unlabeled")
    if segmenter is not None:
        segmenter.eval()
        segmenter.requires_grad_(False)

    student = student or build_student(num_classes, config.channels, seed)
    teacher = copy.deepcopy(student)
    teacher.requires_grad_(False)
    optimizer = torch.optim.SGD(
        student.parameters(),
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    state = SSLState(student=student, teacher=teacher)
    for t in range(config.iterations):
        student.train()
        x_l, y_l = _labeled_batch(labeled, config, seed, t)
        loss_sup = supervised_loss(student(x_l), y_l, config)
        loss = loss_sup
        weights = schedule(t, config.iterations, kind)
        record = Stage2Record(
            iteration=t,
            loss_sup=float(loss_sup.detach()),
            loss_u_teacher=0.0,
            loss_u_assistant=0.0,
            alpha_t=weights.alpha_t,
            alpha_v=weights.alpha_v,
            confident_fraction=0.0,
        )
        if config.lambda_u > 0 and unlabeled and t >= config.warmup:
            weak, strong1, strong2 = _unlabeled_views(
                unlabeled, config, seed, t, fill
            )
            pair = teacher_pseudo_label(teacher, _stack_views(weak), config)
            if weights.alpha_v > 0:
                pair.assistant_probs, pair.assistant_labels = (
                    assistant_pseudo_label(
                        segmenter,
                        bank,
                        [v.image for v in weak],
                        substream(seed, "ssl-assistant", t),
                        _feedback(pair, config, t),
                    )
                )
            logits_sf, logits_si = student_forward_dual(
                student,
                _stack_views(strong1),
                _stack_views(strong2),
                substream(seed, "ssl-dropout", t),
            )
            loss_u, parts = joint_unlabeled_loss(
                logits_sf, logits_si, pair, weights, config
            )
            loss = loss_sup + config.lambda_u * loss_u
            record.update(parts)
            record["confident_fraction"] = float(pair.confident.mean())
        if not math.isfinite(float(loss.detach())):
            raise TrainingDiverged(t)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        ema_update(teacher, student, config.ema_decay)
        state.iteration = t + 1

        last = t + 1 == config.iterations
        if test and ((t + 1) % config.eval_interval == 0 or last):
            report = evaluate_net(teacher, test, num_classes)
            state.evaluations.append((t + 1, report))
            for class_id, value in report.dice_by_class().items():
                record[f"dice_{class_id}"] = value
            logger.info(
                f"stage2 iteration {t + 1}: teacher test dice "
                f"{report.mean_dice:.4f}"
            )
        if (t + 1) % config.log_interval == 0 or last:
            logger.info(
                f"stage2 iteration {t + 1}/{config.iterations} "
                f"sup={record['loss_sup']:.4f} "
                f"u_teacher={record['loss_u_teacher']:.4f} "
                f"u_assistant={record['loss_u_assistant']:.4f} "
                f"alpha_v={record['alpha_v']:.3f}"
            )
        logger.debug(f"stage2 record {record}")
        state.history.append(record)
    return state


# checkpoints

def save_student(net, path, kind, config, seed, run_hash=None):
    settings = {
        "num_classes": net.num_classes,
        "channels": net.channels,
        "ssl": config.to_dict(),
    }
    return save_checkpoint(
        path, kind, settings, net.state_dict(), seed, run_hash
    )


def load_student(path, kind=None):
    payload = load_checkpoint(path, kind)
    if payload["kind"] not in ("student", "teacher"):
        raise CheckpointError(f"{path} does not hold a student network")
    config = payload["config"]
    try:
        net = StudentNet(config["num_classes"], config["channels"]).double()
    except KeyError as e:
        raise CheckpointError(f"Checkpoint {path} lacks {e}")
    restore(net, payload["tensors"])
    net.eval()
    return net, payload

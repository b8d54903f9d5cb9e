import logging
import math

from dataclasses import dataclass, field
from typing import Optional

import albumentations as A
import numpy as np

from retrying import retry, RetryError

from refseg.data import check_image, class_set
from refseg.types import TransformRecord
from refseg.utils import make_rng


logger = logging.getLogger(__name__)


CROP_ATTEMPTS = 10
SEED_RANGE = 2**31 - 1


@dataclass
class AugmentedView:
    image: np.ndarray
    mask: Optional[np.ndarray] = None
    transforms: list = field(default_factory=list)


@dataclass
class WeakAugmentConfig:
    flip_prob: float = 0.5
    max_shift: float = 0.05


@dataclass
class StrongAugmentConfig:
    brightness_prob: float = 0.8
    brightness: float = 0.1
    contrast_prob: float = 0.8
    contrast: tuple = (0.8, 1.2)
    gamma_prob: float = 0.5
    gamma: tuple = (0.7, 1.5)
    blur_prob: float = 0.5
    blur_sigma: tuple = (0.1, 1.0)
    cutout_prob: float = 0.5
    cutout_size: tuple = (0.1, 0.3)


@dataclass
class TemplateAugmentConfig:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    rotate_prob: float = 0.5
    crop_scale: tuple = (0.7, 1.0)
    noise_prob: float = 0.5
    noise_sigma: tuple = (0.01, 0.05)
    blur_prob: float = 0.3
    blur_sigma: tuple = (0.3, 1.0)
    sharpen_prob: float = 0.3
    sharpen_alpha: tuple = (0.2, 0.5)


IDENTITY_TEMPLATE_AUGMENT = TemplateAugmentConfig(
    hflip_prob=0.0,
    vflip_prob=0.0,
    rotate_prob=0.0,
    crop_scale=(1.0, 1.0),
    noise_prob=0.0,
    blur_prob=0.0,
    sharpen_prob=0.0,
)


# records -> albumentations

def _quarter_turns(k):
    """np.rot90(x, k) as transposes and flips."""
    return {
        1: [A.Transpose(p=1.0), A.VerticalFlip(p=1.0)],
        2: [A.HorizontalFlip(p=1.0), A.VerticalFlip(p=1.0)],
        3: [A.Transpose(p=1.0), A.HorizontalFlip(p=1.0)],
    }.get(k % 4, [])


def _blur_kernel(sigma):
    return 2 * math.ceil(3.0 * sigma) + 1


def _transforms(record, shape):
    op = record["op"]
    if op == "hflip":
        return [A.HorizontalFlip(p=1.0)]
    if op == "vflip":
        return [A.VerticalFlip(p=1.0)]
    if op == "rot90":
        return _quarter_turns(record["k"])
    if op == "translate":
        dy, dx = record["dy"], record["dx"]
        return [A.Affine(translate_px={"x": (dx, dx), "y": (dy, dy)}, p=1.0)]
    if op == "crop":
        top, left = record["top"], record["left"]
        height, width = record["height"], record["width"]
        if (height, width) == tuple(shape):
            return []
        return [
            A.Crop(
                x_min=left,
                y_min=top,
                x_max=left + width,
                y_max=top + height,
                p=1.0,
            ),
            A.Resize(height=shape[0], width=shape[1], p=1.0),
        ]
    if op == "brightness":
        value = record["value"]
        return [
            A.RandomBrightnessContrast(
                brightness_limit=(value, value),
                contrast_limit=(0.0, 0.0),
                p=1.0,
            )
        ]
    if op == "contrast":
        value = record["value"] - 1.0
        return [
            A.RandomBrightnessContrast(
                brightness_limit=(0.0, 0.0),
                contrast_limit=(value, value),
                p=1.0,
            )
        ]
    if op == "gamma":
        value = 100.0 * record["value"]
        return [A.RandomGamma(gamma_limit=(value, value), p=1.0)]
    if op == "blur":
        sigma = record["sigma"]
        kernel = _blur_kernel(sigma)
        return [
            A.GaussianBlur(
                blur_limit=(kernel, kernel), sigma_limit=(sigma, sigma), p=1.0
            )
        ]
    if op == "sharpen":
        alpha = record["alpha"]
        return [A.Sharpen(alpha=(alpha, alpha), lightness=(1.0, 1.0), p=1.0)]
    if op == "noise":
        sigma = record["sigma"]
        return [
            A.GaussNoise(
                std_range=(sigma, sigma), mean_range=(0.0, 0.0), p=1.0
            )
        ]
    if op == "cutout":
        height, width = record["height"], record["width"]
        return [
            A.CoarseDropout(
                num_holes_range=(1, 1),
                hole_height_range=(height, height),
                hole_width_range=(width, width),
                fill=record["fill"],
                p=1.0,
            )
        ]
    raise ValueError(f"Unknown transform {op!r}")


def _pipeline(records, shape, seed=0):
    transforms = [t for r in records for t in _transforms(r, shape)]
    if not transforms:
        return None
    return A.Compose(transforms, seed=seed)


def _run(records, image, mask=None, seed=0):
    """Apply records to an image (and a paired mask) in one pass."""
    pipeline = _pipeline(records, image.shape, seed)
    if pipeline is None:
        return (
            np.array(image, dtype=np.float64),
            None if mask is None else np.array(mask, dtype=np.int64),
        )
    data = {"image": np.asarray(image, dtype=np.float32)[..., None]}
    if mask is not None:
        data["mask"] = np.asarray(mask, dtype=np.uint8)
    out = pipeline(**data)
    result = out["image"].reshape(out["image"].shape[:2])
    result = np.clip(result.astype(np.float64), 0.0, 1.0)
    if mask is None:
        return result, None
    return result, np.asarray(out["mask"], dtype=np.int64)


def replay_geometry(transforms, raster, is_mask=True):
    """Re-apply the geometric records of a view to another raster."""
    records = [t for t in transforms if t["geometric"]]
    raster = np.asarray(raster)
    if is_mask:
        _, mask = _run(records, np.zeros(raster.shape), mask=raster)
        return mask
    image, _ = _run(records, raster)
    return image


# views

def weak_augment(image, seed, mask=None, config=None):
    """
    Mild geometry only: random horizontal flip and a translation of at most
    config.max_shift of the image size (zero fill).
    """
    config = config or WeakAugmentConfig()
    image = check_image(image)
    rng = make_rng(seed)
    flip = rng.random() < config.flip_prob
    h, w = image.shape
    my, mx = int(config.max_shift * h), int(config.max_shift * w)
    dy, dx = int(rng.integers(-my, my + 1)), int(rng.integers(-mx, mx + 1))
    records = []
    if flip:
        records.append(TransformRecord(op="hflip", geometric=True))
    if dy or dx:
        records.append(
            TransformRecord(op="translate", geometric=True, dy=dy, dx=dx)
        )
    out, out_mask = _run(records, image, mask)
    logger.debug(f"weak_augment seed={seed}: {records}")
    return AugmentedView(image=out, mask=out_mask, transforms=records)


def strong_augment(view, seed, fill=0.5, config=None):
    """
    Photometric jitter, blur and cutout on the image of a view. The mask is
    carried over untouched as the supervision target.
    """
    config = config or StrongAugmentConfig()
    rng = make_rng(seed)
    h, w = view.image.shape
    records = []
    if rng.random() < config.brightness_prob:
        value = float(rng.uniform(-config.brightness, config.brightness))
        records.append(
            TransformRecord(op="brightness", geometric=False, value=value)
        )
    if rng.random() < config.contrast_prob:
        value = float(rng.uniform(*config.contrast))
        records.append(
            TransformRecord(op="contrast", geometric=False, value=value)
        )
    if rng.random() < config.gamma_prob:
        value = float(rng.uniform(*config.gamma))
        records.append(
            TransformRecord(op="gamma", geometric=False, value=value)
        )
    if rng.random() < config.blur_prob:
        sigma = float(rng.uniform(*config.blur_sigma))
        records.append(
            TransformRecord(op="blur", geometric=False, sigma=sigma)
        )
    if rng.random() < config.cutout_prob:
        ch = max(1, int(round(rng.uniform(*config.cutout_size) * h)))
        cw = max(1, int(round(rng.uniform(*config.cutout_size) * w)))
        records.append(
            TransformRecord(
                op="cutout",
                geometric=False,
                height=ch,
                width=cw,
                fill=float(fill),
            )
        )
    pipeline_seed = int(rng.integers(0, SEED_RANGE))
    image, _ = _run(records, view.image, seed=pipeline_seed)
    return AugmentedView(
        image=image,
        mask=view.mask,
        transforms=list(view.transforms) + records,
    )


def _crop_box(shape, scale, rng=None):
    h, w = shape
    side = math.sqrt(scale)
    ch, cw = max(1, int(round(side * h))), max(1, int(round(side * w)))
    if rng is None:
        return (h - ch) // 2, (w - cw) // 2, ch, cw
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return top, left, ch, cw


def _draw_crop(rng, mask, scale_range):
    required = class_set(mask)
    drawn = []

    @retry(
        stop_max_attempt_number=CROP_ATTEMPTS,
        retry_on_result=lambda record: record is None,
    )
    def attempt():
        scale = float(rng.uniform(*scale_range))
        top, left, ch, cw = _crop_box(mask.shape, scale, rng)
        drawn.append(scale)
        if required <= class_set(mask[top : top + ch, left : left + cw]):
            return TransformRecord(
                op="crop",
                geometric=True,
                top=top,
                left=left,
                height=ch,
                width=cw,
                scale=scale,
            )
        return None

    try:
        return attempt()
    except RetryError:
        scale = drawn[-1]
        top, left, ch, cw = _crop_box(mask.shape, scale)
        logger.debug(
            f"No crop kept classes {sorted(required)} after "
            f"{CROP_ATTEMPTS} draws, using center crop"
        )
        return TransformRecord(
            op="crop",
            geometric=True,
            top=top,
            left=left,
            height=ch,
            width=cw,
            scale=scale,
            fallback=True,
        )


def template_augment(image, mask, seed, config=None):
    """
    Geometric (image and mask) and photometric (image only) augmentation of
    a template pair. Crops keep every foreground class present in the input.
    """
    config = config or TemplateAugmentConfig()
    image = check_image(image)
    if mask.shape != image.shape:
        raise ValueError("Template image and mask shapes differ")
    rng = make_rng(seed)
    records = []
    if rng.random() < config.hflip_prob:
        records.append(TransformRecord(op="hflip", geometric=True))
    if rng.random() < config.vflip_prob:
        records.append(TransformRecord(op="vflip", geometric=True))
    if rng.random() < config.rotate_prob and image.shape[0] == image.shape[1]:
        k = int(rng.integers(1, 4))
        records.append(TransformRecord(op="rot90", geometric=True, k=k))
    oriented = replay_geometry(records, mask)
    records.append(_draw_crop(rng, oriented, config.crop_scale))
    if rng.random() < config.noise_prob:
        records.append(
            TransformRecord(
                op="noise",
                geometric=False,
                sigma=float(rng.uniform(*config.noise_sigma)),
            )
        )
    if rng.random() < config.blur_prob:
        records.append(
            TransformRecord(
                op="blur",
                geometric=False,
                sigma=float(rng.uniform(*config.blur_sigma)),
            )
        )
    if rng.random() < config.sharpen_prob:
        records.append(
            TransformRecord(
                op="sharpen",
                geometric=False,
                alpha=float(rng.uniform(*config.sharpen_alpha)),
            )
        )
    pipeline_seed = int(rng.integers(0, SEED_RANGE))
    out, out_mask = _run(records, image, mask, seed=pipeline_seed)
    logger.debug(f"template_augment seed={seed}: {records}")
    return AugmentedView(image=out, mask=out_mask, transforms=records)


def make_overlay(image, mask, class_id, alpha=0.5):
    """RGB raster with pixels of class_id alpha-blended with pure green."""
    gray = np.asarray(image, dtype=np.float64)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    selected = np.asarray(mask) == class_id
    green = np.array([0.0, 1.0, 0.0])
    rgb[selected] = (1.0 - alpha) * rgb[selected] + alpha * green
    return rgb

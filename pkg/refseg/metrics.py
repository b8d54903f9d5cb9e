import csv
import logging
import math

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from scipy import ndimage

from refseg.data import ensure_parent


logger = logging.getLogger(__name__)


CSV_COLUMNS = ("class", "dice", "iou", "hd95", "n", "undefined_hd95")
AVG = "AVG"
HD_PERCENTILE = 95.0

# 4-connectivity
BOUNDARY_STRUCTURE = ndimage.generate_binary_structure(2, 1)


class ShapeMismatch(ValueError):
    pass


def _binary_pair(pred, truth, class_id):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeMismatch(
            f"Prediction shape {pred.shape} does not match truth {truth.shape}"
        )
    return pred == class_id, truth == class_id


def dice(pred, truth, class_id):
    p, t = _binary_pair(pred, truth, class_id)
    total = p.sum() + t.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, t).sum() / total)


def iou(pred, truth, class_id):
    p, t = _binary_pair(pred, truth, class_id)
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def boundary(binary):
    """Foreground pixels 4-adjacent to background or to the image edge."""
    eroded = ndimage.binary_erosion(
        binary, structure=BOUNDARY_STRUCTURE, border_value=0
    )
    return binary & ~eroded


def surface_distances(pred, truth, class_id):
    """
    Pooled directed nearest distances between the two boundaries, or None
    when either mask is empty.
    """
    p, t = _binary_pair(pred, truth, class_id)
    if not p.any() or not t.any():
        return None
    bp, bt = boundary(p), boundary(t)
    to_truth = ndimage.distance_transform_edt(~bt)
    to_pred = ndimage.distance_transform_edt(~bp)
    return np.concatenate([to_truth[bp], to_pred[bt]])


def hd95(pred, truth, class_id):
    distances = surface_distances(pred, truth, class_id)
    if distances is None:
        return None
    return float(np.percentile(distances, HD_PERCENTILE))


def hausdorff(pred, truth, class_id):
    distances = surface_distances(pred, truth, class_id)
    if distances is None:
        return None
    return float(distances.max())


@dataclass
class ClassMetrics:
    dice: float
    iou: float
    hd95: Optional[float]
    n: int
    undefined_hd95: int = 0


@dataclass
class MetricReport:
    """Per-class means over slices and their foreground average."""

    per_class: dict = field(default_factory=dict)
    average: Optional[ClassMetrics] = None

    @property
    def mean_dice(self):
        return self.average.dice if self.average else float("nan")

    def dice_by_class(self):
        return {c: m.dice for c, m in sorted(self.per_class.items())}

    def rows(self):
        for class_id, metrics in sorted(self.per_class.items()):
            yield str(class_id), metrics
        if self.average is not None:
            yield AVG, self.average


def _mean(values):
    return float(np.mean(values)) if values else None


def average_classes(per_class):
    classes = list(per_class.values())
    hd = [m.hd95 for m in classes if m.hd95 is not None]
    return ClassMetrics(
        dice=_mean([m.dice for m in classes]),
        iou=_mean([m.iou for m in classes]),
        hd95=_mean(hd),
        n=sum(m.n for m in classes),
        undefined_hd95=sum(m.undefined_hd95 for m in classes),
    )


def evaluate(preds, truths, num_classes):
    preds, truths = list(preds), list(truths)
    if len(preds) != len(truths):
        raise ShapeMismatch(
            f"{len(preds)} predictions for {len(truths)} ground truths"
        )
    if not preds:
        raise ShapeMismatch("Nothing to evaluate")
    per_class = {}
    for class_id in range(1, num_classes + 1):
        dices, ious, hds = [], [], []
        for pred, truth in zip(preds, truths):
            dices.append(dice(pred, truth, class_id))
            ious.append(iou(pred, truth, class_id))
            hds.append(hd95(pred, truth, class_id))
        defined = [h for h in hds if h is not None]
        per_class[class_id] = ClassMetrics(
            dice=_mean(dices),
            iou=_mean(ious),
            hd95=_mean(defined),
            n=len(preds),
            undefined_hd95=len(hds) - len(defined),
        )
    return MetricReport(per_class=per_class, average=average_classes(per_class))


def _format(value):
    return "nan" if value is None else repr(float(value))


def _parse(value):
    number = float(value)
    return None if math.isnan(number) else number


def write_header(f, header):
    if header:
        f.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")


def read_header(path):
    with open(path, "r") as f:
        first = f.readline().strip()
    if not first.startswith("#"):
        return {}
    return dict(item.split("=", 1) for item in first[1:].split())


def write_report_csv(report, path, header=None):
    ensure_parent(path)
    with open(path, "w", newline="") as f:
        write_header(f, header)
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for name, m in report.rows():
            writer.writerow(
                [
                    name,
                    _format(m.dice),
                    _format(m.iou),
                    _format(m.hd95),
                    m.n,
                    m.undefined_hd95,
                ]
            )
    logger.info(f"Wrote metric report to {path}")
    return path


def read_report_csv(path):
    with open(path, "r", newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    report = MetricReport()
    for row in csv.DictReader(lines):
        metrics = ClassMetrics(
            dice=_parse(row["dice"]),
            iou=_parse(row["iou"]),
            hd95=_parse(row["hd95"]),
            n=int(row["n"]),
            undefined_hd95=int(row["undefined_hd95"]),
        )
        if row["class"] == AVG:
            report.average = metrics
        else:
            report.per_class[int(row["class"])] = metrics
    return report

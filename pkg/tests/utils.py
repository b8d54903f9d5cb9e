import math

import numpy as np
import torch

from refseg.conf import settings


def slow_tests_enabled():
    return bool(settings.SLOW_TESTS)


# scalar oracles, written with plain loops


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def mask_loss_oracle(logits, target, lambda_dice, lambda_bce, eps):
    logits, target = np.asarray(logits), np.asarray(target)
    overlap = total = bce = 0.0
    count = 0
    for z, m in zip(logits.ravel().tolist(), target.ravel().tolist()):
        p = _sigmoid(z)
        overlap += p * m
        total += p + m
        # log(sigmoid(z)) and log(1 - sigmoid(z)) in stable form
        if z > 0:
            log_p = -math.log1p(math.exp(-z))
        else:
            log_p = z - math.log1p(math.exp(z))
        log_q = -z + log_p
        bce -= m * log_p + (1 - m) * log_q
        count += 1
    dice = 1.0 - 2.0 * overlap / (total + eps)
    return lambda_dice * dice + lambda_bce * bce / count


def cross_entropy_oracle(logits, target):
    logits = [float(v) for v in logits]
    top = max(logits)
    log_norm = top + math.log(sum(math.exp(v - top) for v in logits))
    return log_norm - logits[target]


def supervised_loss_oracle(logits, labels, lambda_ce, lambda_dice, eps):
    """logits B×K×H×W, labels B×H×W."""
    logits, labels = np.asarray(logits), np.asarray(labels)
    b, k, h, w = logits.shape
    ce = 0.0
    dice_terms = []
    for n in range(b):
        overlap = [0.0] * k
        total = [0.0] * k
        for i in range(h):
            for j in range(w):
                column = logits[n, :, i, j].tolist()
                label = int(labels[n, i, j])
                ce += cross_entropy_oracle(column, label)
                top = max(column)
                weights = [math.exp(v - top) for v in column]
                norm = sum(weights)
                for c in range(1, k):
                    p = weights[c] / norm
                    y = 1.0 if label == c else 0.0
                    overlap[c] += p * y
                    total[c] += p + y
        for c in range(1, k):
            dice_terms.append(1.0 - 2.0 * overlap[c] / (total[c] + eps))
    ce /= b * h * w
    return lambda_ce * ce + lambda_dice * sum(dice_terms) / len(dice_terms)


def _stream_term(logits, labels, confident, n):
    _, k, h, w = logits.shape
    summed, count = 0.0, 0.0
    for i in range(h):
        for j in range(w):
            if confident[n, i, j]:
                summed += cross_entropy_oracle(
                    logits[n, :, i, j].tolist(), int(labels[n, i, j])
                )
                count += 1
    return summed / count if count else 0.0


def dual_stream_loss_oracle(logits_sf, logits_si, labels, confident):
    logits_sf, logits_si = np.asarray(logits_sf), np.asarray(logits_si)
    labels, confident = np.asarray(labels), np.asarray(confident)
    b = logits_sf.shape[0]
    total = 0.0
    for n in range(b):
        total += _stream_term(logits_sf, labels, confident, n)
        total += _stream_term(logits_si, labels, confident, n)
    return total / (2.0 * b)


def joint_loss_oracle(
    logits_sf, logits_si, teacher_labels, assistant_labels, confident, a_t, a_v
):
    logits_sf, logits_si = np.asarray(logits_sf), np.asarray(logits_si)
    b = logits_sf.shape[0]
    total = 0.0
    for n in range(b):
        for logits in (logits_sf, logits_si):
            total += a_t * _stream_term(logits, teacher_labels, confident, n)
            total += a_v * _stream_term(logits, assistant_labels, confident, n)
    return total / (2.0 * b)


def boundary_oracle(binary):
    h, w = binary.shape
    points = []
    for i in range(h):
        for j in range(w):
            if not binary[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                y, x = i + di, j + dj
                if not (0 <= y < h and 0 <= x < w) or not binary[y, x]:
                    points.append((i, j))
                    break
    return points


def surface_distances_oracle(pred, truth, class_id):
    bp = boundary_oracle(np.asarray(pred) == class_id)
    bt = boundary_oracle(np.asarray(truth) == class_id)
    if not bp or not bt:
        return None

    def nearest(points, others):
        return [
            min(math.sqrt((y - v) ** 2 + (x - u) ** 2) for v, u in others)
            for y, x in points
        ]

    return nearest(bp, bt) + nearest(bt, bp)


def percentile_oracle(values, q):
    ordered = sorted(values)
    position = (len(ordered) - 1) * q / 100.0
    lower = math.floor(position)
    upper = min(lower + 1, len(ordered) - 1)
    fraction = position - lower
    return ordered[lower] + (ordered[upper] - ordered[lower]) * fraction


def hd95_oracle(pred, truth, class_id):
    distances = surface_distances_oracle(pred, truth, class_id)
    if distances is None:
        return None
    return percentile_oracle(distances, 95.0)


def softmax_oracle(similarities, temperature):
    weights = [math.exp(s / temperature) for s in similarities]
    total = sum(weights)
    return [w / total for w in weights]


# gradient checks


def finite_difference_check(loss_fn, module, count=25, seed=0, h=1e-4):
    """
    Compare autograd against central differences on `count` randomly drawn
    scalar parameters. Returns (name, analytic, numeric) triples.
    """
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    module.zero_grad()
    loss_fn().backward()
    analytic = {n: p.grad.detach().clone() for n, p in params}
    sizes = np.array([p.numel() for _, p in params])
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(count):
        k = rng.choice(len(params), p=sizes / sizes.sum())
        name, param = params[k]
        index = int(rng.integers(param.numel()))
        flat = param.data.view(-1)
        original = flat[index].item()
        with torch.no_grad():
            flat[index] = original + h
            plus = float(loss_fn())
            flat[index] = original - h
            minus = float(loss_fn())
            flat[index] = original
        numeric = (plus - minus) / (2 * h)
        results.append((name, float(analytic[name].view(-1)[index]), numeric))
    return results


def gradients_match(results, rtol=1e-3, atol=1e-7):
    return all(
        abs(a - n) <= rtol * max(abs(a), abs(n)) + atol for _, a, n in results
    )

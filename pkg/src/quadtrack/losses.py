"""Training losses with hand-derived gradients.

There is no autodiff graph anywhere in this package: every loss returns its
value together with the analytic gradient with respect to its direct inputs,
and `finite_diff_check` verifies any of them against central differences.

Gradient conventions:
  dice_loss            grad wrt the soft prediction vector
  contrastive_ce_loss  grad wrt the pre-softmax logits (via the usual
                       softmax/CE shortcut, computable from probabilities)
  detection_loss       grad wrt the raw per-level head outputs, flattened
  mask_loss            grad wrt the mask logits
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .correspondence import GroundTruthMatch, InstanceCorrespondence
from .head import decode_cell

DICE_EPS = 1e-7


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    flag: str | None = None


# ---------------------------------------------------------------- dice


def dice_loss(pred: np.ndarray, gt: np.ndarray) -> LossResult:
    """Soft dice overlap loss: 1 - (2 * sum(p*g) + eps) / (sum p + sum g + eps).

    pred is a soft map in [0, 1], gt is binary. Identical binary maps give
    exactly zero; disjoint maps approach one from below.
    """
    p = np.asarray(pred, dtype=np.float64).ravel()
    g = np.asarray(gt, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if not np.all((g == 0.0) | (g == 1.0)):
        raise ValueError("dice ground truth must be binary")
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("dice prediction must lie in [0, 1]")
    a = 2.0 * float(p @ g) + DICE_EPS
    b = float(p.sum() + g.sum()) + DICE_EPS
    value = 1.0 - a / b
    grad = -(2.0 * g * b - a) / (b * b)
    return LossResult(value=value, grad=grad)


# ---------------------------------------------------------------- CE


def contrastive_ce_loss(c_inst: InstanceCorrespondence, g: GroundTruthMatch) -> LossResult:
    """Cross entropy of each matched current instance against its reference.

    Averaged over matched rows; rows without a reference partner contribute
    nothing and get zero gradient. The gradient is taken with respect to the
    pre-softmax logits, which the softmax identity lets us compute from the
    probabilities alone: (p - onehot) / n_matched on matched rows.
    """
    if c_inst.empty or c_inst.c.size == 0:
        return LossResult(value=0.0, grad=np.zeros_like(c_inst.c), flag="empty")
    p = c_inst.c
    if g.g.shape != p.shape:
        raise ValueError(f"match matrix {g.g.shape} does not fit correspondence {p.shape}")
    matched = g.rows_matched
    n = int(matched.sum())
    if n == 0:
        return LossResult(value=0.0, grad=np.zeros_like(p), flag="no_matched_rows")
    value = 0.0
    grad = np.zeros_like(p)
    for i in np.nonzero(matched)[0]:
        j = int(np.argmax(g.g[i]))
        value -= math.log(max(p[i, j], 1e-300))
        grad[i] = p[i] / n
        grad[i, j] -= 1.0 / n
    return LossResult(value=value / n, grad=grad)


# ---------------------------------------------------------------- bce


def _bce(z: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Elementwise binary cross entropy on logits, numerically stable."""
    return np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


# ---------------------------------------------------------------- IoU


def _iou_with_grad(pred_box, gt_box):
    """IoU of two center-format boxes and its gradient wrt the pred box."""
    cx, cy, w, h = pred_box
    gx1, gy1 = gt_box[0] - gt_box[2] / 2, gt_box[1] - gt_box[3] / 2
    gx2, gy2 = gt_box[0] + gt_box[2] / 2, gt_box[1] + gt_box[3] / 2
    x1, x2 = cx - w / 2, cx + w / 2
    y1, y2 = cy - h / 2, cy + h / 2
    ix = min(x2, gx2) - max(x1, gx1)
    iy = min(y2, gy2) - max(y1, gy1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0, np.zeros(4)
    inter = ix * iy
    area_p = w * h
    area_g = gt_box[2] * gt_box[3]
    union = area_p + area_g - inter
    # boundary indicator: which box owns each active edge of the overlap
    di_dx1 = -iy if x1 > gx1 else 0.0
    di_dx2 = iy if x2 < gx2 else 0.0
    di_dy1 = -ix if y1 > gy1 else 0.0
    di_dy2 = ix if y2 < gy2 else 0.0
    di = np.array(
        [
            di_dx1 + di_dx2,  # d inter / d cx
            di_dy1 + di_dy2,  # d inter / d cy
            0.5 * (di_dx2 - di_dx1),  # d inter / d w
            0.5 * (di_dy2 - di_dy1),  # d inter / d h
        ]
    )
    da = np.array([0.0, 0.0, h, w])
    # iou = inter / (area_p + area_g - inter)
    grad = (di * (union + inter) - da * inter) / (union * union)
    return inter / union, grad


# ---------------------------------------------------------------- detect


def flatten_raws(raws: dict[int, dict[str, np.ndarray]]) -> np.ndarray:
    parts = []
    for stride in sorted(raws):
        for key in ("obj", "cls", "reg"):
            parts.append(raws[stride][key].ravel())
    return np.concatenate(parts)


def unflatten_raws(x: np.ndarray, template: dict[int, dict[str, np.ndarray]]):
    out: dict[int, dict[str, np.ndarray]] = {}
    offset = 0
    for stride in sorted(template):
        out[stride] = {}
        for key in ("obj", "cls", "reg"):
            shape = template[stride][key].shape
            size = int(np.prod(shape))
            out[stride][key] = x[offset : offset + size].reshape(shape)
            offset += size
    if offset != x.size:
        raise ValueError("flat vector does not fit the raw output template")
    return out


def _gt_level(box, strides):
    """Smallest stride whose 8x span covers the box's max side, else coarsest."""
    side = max(box[2], box[3])
    for s in strides:
        if side <= 8.0 * s:
            return s
    return strides[-1]


def _assign_positives(raws, gt_boxes):
    """Cells whose centers fall in the half-shrunk gt box, nearest gt wins.

    Each box supervises a single pyramid level picked by size, so one
    object never produces positives at two strides.
    """
    strides = sorted(raws)
    levels = [_gt_level(b, strides) for b in gt_boxes]
    positives = []
    for stride in strides:
        h, w = raws[stride]["obj"].shape[:2]
        cols = (np.arange(w) + 0.5) * stride
        rows = (np.arange(h) + 0.5) * stride
        owner = np.full((h, w), -1)
        best_d2 = np.full((h, w), np.inf)
        for gi, (gcx, gcy, gw, gh) in enumerate(gt_boxes):
            if levels[gi] != stride:
                continue
            in_x = np.abs(cols - gcx) <= gw / 4.0
            in_y = np.abs(rows - gcy) <= gh / 4.0
            hit = np.outer(in_y, in_x)
            d2 = np.add.outer((rows - gcy) ** 2, (cols - gcx) ** 2)
            take = hit & (d2 < best_d2)
            owner[take] = gi
            best_d2[take] = d2[take]
        for row, col in zip(*np.nonzero(owner >= 0)):
            positives.append((stride, int(row), int(col), int(owner[row, col])))
    return positives


def _centerness(x, y, box):
    """Soft objectness target: 1 at the box center, falling toward edges.

    Geometric mean of the per-axis near/far edge-distance ratios. Ranks
    co-positive cells so NMS keeps the best-centered box.
    """
    gcx, gcy, gw, gh = box
    ox = abs(x - gcx)
    oy = abs(y - gcy)
    rx = (gw / 2.0 - ox) / (gw / 2.0 + ox)
    ry = (gh / 2.0 - oy) / (gh / 2.0 + oy)
    return math.sqrt(max(rx, 0.0) * max(ry, 0.0))


def detection_loss(
    raws: dict[int, dict[str, np.ndarray]],
    gt_boxes,
    gt_classes=None,
    num_classes: int | None = None,
    w_obj: float = 1.0,
    w_cls: float = 1.0,
    w_box: float = 1.0,
) -> LossResult:
    """Objectness BCE everywhere + class BCE and (1 - IoU) at positive cells.

    Positive cells are those whose centers lie inside the central half of a
    ground-truth box, on the single pyramid level matching the box size;
    contested cells go to the nearest center. The objectness target is the
    centerness value rather than a flat 1, so overlapping candidates sort
    by quality at decode time.
    The objectness term averages over every cell of every level; the class
    and box terms average over positives. Gradient is wrt the flattened raw
    outputs in flatten_raws order. The per-term weights default to an
    unweighted sum.
    """
    if min(w_obj, w_cls, w_box) < 0:
        raise ValueError("loss term weights must be nonnegative")
    gt_boxes = [tuple(float(v) for v in b) for b in gt_boxes]
    if gt_classes is None:
        gt_classes = [1] * len(gt_boxes)
    if len(gt_classes) != len(gt_boxes):
        raise ValueError("one class id per ground-truth box required")
    nc = num_classes if num_classes is not None else next(iter(raws.values()))["cls"].shape[2]
    for cid in gt_classes:
        if not 1 <= cid <= nc:
            raise ValueError(f"class id {cid} outside 1..{nc}")
    for b in gt_boxes:
        if b[2] <= 0 or b[3] <= 0:
            raise ValueError("ground-truth box sides must be positive")

    grads = {
        s: {k: np.zeros_like(raws[s][k]) for k in ("obj", "cls", "reg")} for s in raws
    }
    positives = _assign_positives(raws, gt_boxes) if gt_boxes else []
    n_obj = sum(int(np.prod(raws[s]["obj"].shape)) for s in raws)
    n_pos = len(positives)

    obj_target = {s: np.zeros_like(raws[s]["obj"]) for s in raws}
    for stride, row, col, gi in positives:
        obj_target[stride][row, col, 0] = _centerness(
            (col + 0.5) * stride, (row + 0.5) * stride, gt_boxes[gi]
        )
    obj_value = 0.0
    for s in raws:
        z = raws[s]["obj"]
        t = obj_target[s]
        obj_value += float(_bce(z, t).sum())
        grads[s]["obj"] = w_obj * (_sigmoid(z) - t) / n_obj
    obj_value /= n_obj

    cls_value = 0.0
    iou_value = 0.0
    flag = None
    if not gt_boxes:
        flag = "objectness_only"
    elif n_pos == 0:
        flag = "no_positive_cells"
    else:
        n_cls = n_pos * nc
        for stride, row, col, gi in positives:
            z = raws[stride]["cls"][row, col]
            t = np.zeros(nc)
            t[gt_classes[gi] - 1] = 1.0
            cls_value += float(_bce(z, t).sum())
            grads[stride]["cls"][row, col] = w_cls * (_sigmoid(z) - t) / n_cls

            raw = raws[stride]["reg"][row, col]
            box = decode_cell(raw, row, col, stride)
            iou, diou_dbox = _iou_with_grad(box, gt_boxes[gi])
            iou_value += 1.0 - iou
            sx = _sigmoid(raw[0])
            sy = _sigmoid(raw[1])
            dbox_draw = np.array(
                [sx * (1 - sx) * stride, sy * (1 - sy) * stride, box[2], box[3]]
            )
            grads[stride]["reg"][row, col] = -w_box * diou_dbox * dbox_draw / n_pos
        cls_value /= n_cls
        iou_value /= n_pos

    value = w_obj * obj_value + w_cls * cls_value + w_box * iou_value
    return LossResult(value=value, grad=flatten_raws(grads), flag=flag)


# ---------------------------------------------------------------- masks


def mask_loss(logits: np.ndarray, gt_mask: np.ndarray) -> LossResult:
    """Dice loss over the sigmoided logits; gradient wrt the logits."""
    if logits.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch: {logits.shape} vs {gt_mask.shape}")
    p = _sigmoid(np.asarray(logits, dtype=np.float64))
    inner = dice_loss(p.ravel(), np.asarray(gt_mask, dtype=np.float64).ravel())
    grad = inner.grad.reshape(logits.shape) * p * (1.0 - p)
    return LossResult(value=inner.value, grad=grad)


# ---------------------------------------------------------------- stages


def stage1_loss(
    corr: LossResult, det: LossResult, w_corr: float = 1.0, w_det: float = 1.0
) -> LossResult:
    """Weighted sum of correspondence and detection losses.

    The gradient is the concatenation (correspondence part first), each side
    scaled by its weight.
    """
    value = w_corr * corr.value + w_det * det.value
    grad = np.concatenate([w_corr * corr.grad.ravel(), w_det * det.grad.ravel()])
    return LossResult(value=value, grad=grad)


# ---------------------------------------------------------------- checker


def finite_diff_check(fn, x0: np.ndarray, eps: float = 1e-5, skip_below: float = 1e-8) -> float:
    """Max relative error between fn's analytic gradient and central
    differences, over coordinates whose analytic gradient clears the floor.

    fn maps a flat float vector to a LossResult whose grad matches x0's size.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    base = fn(x0)
    grad = np.asarray(base.grad, dtype=np.float64).ravel()
    if grad.size != x0.size:
        raise ValueError("gradient size does not match the input")
    worst = 0.0
    for i in range(x0.size):
        if abs(grad[i]) <= skip_below:
            continue
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += eps
        xm[i] -= eps
        fd = (fn(xp).value - fn(xm).value) / (2.0 * eps)
        rel = abs(fd - grad[i]) / max(abs(grad[i]), abs(fd), 1e-12)
        worst = max(worst, rel)
    return worst

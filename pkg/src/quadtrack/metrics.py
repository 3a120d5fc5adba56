"""Evaluation metrics for the four task modes, plus shared box utilities.

Box conventions: metric entry points and file formats use corner format
(x, y, w, h) with (x, y) the top-left corner. The model side of the codebase
works in center format (cx, cy, w, h); converters live here so there is one
place where the two meet.

The multi-object scores follow the usual event-counting recipe: per frame,
matches are carried over from the previous frame when they still overlap
(continuity first), leftovers are assigned by minimum-cost matching, and
identity switches are counted when a ground-truth track changes its matched
prediction id. MOTA = 1 - (FP + FN + IDS) / total GT boxes. IDF1 performs one
global trajectory-level matching instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

Box = tuple[float, float, float, float]

MATCH_IOU = 0.5
PRECISION_RADIUS_PX = 20.0
_INFEASIBLE = 1e6


# ---------------------------------------------------------------- boxes


def tlwh_to_cxcywh(box) -> tuple[float, float, float, float]:
    x, y, w, h = (float(v) for v in box)
    return (x + w / 2.0, y + h / 2.0, w, h)


def cxcywh_to_tlwh(box) -> tuple[float, float, float, float]:
    cx, cy, w, h = (float(v) for v in box)
    return (cx - w / 2.0, cy - h / 2.0, w, h)


def box_iou(a, b) -> float:
    """IoU of two corner-format (x, y, w, h) boxes. Degenerate sides give 0."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    if aw <= 0.0 or ah <= 0.0 or bw <= 0.0 or bh <= 0.0:
        return 0.0
    ix = min(ax + aw, bx + bw) - max(ax, bx)
    iy = min(ay + ah, by + bh) - max(ay, by)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


def box_iou_cxcywh(a, b) -> float:
    return box_iou(cxcywh_to_tlwh(a), cxcywh_to_tlwh(b))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two boolean masks; an empty union gives 0 by convention."""
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


# ---------------------------------------------------------------- report


@dataclass
class MetricReport:
    task: str
    metrics: dict[str, float]
    curves: dict[str, list[float]] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {"task": self.task, "metrics": self.metrics, "curves": self.curves}
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        lines = [f"task = {self.task}"]
        for key in sorted(self.metrics):
            lines.append(f"{key} = {self.metrics[key]:.6f}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- SOT


def sot_success_auc(pred_boxes, gt_boxes) -> MetricReport:
    """Success curve over 21 IoU thresholds plus center-distance precision.

    Success at threshold t is the fraction of frames with IoU >= t; the AUC
    is the mean over thresholds 0.00, 0.05, ..., 1.00. Precision is the
    fraction of frames whose center error is at most 20 px.
    """
    if len(pred_boxes) != len(gt_boxes):
        raise ValueError("prediction and ground-truth lengths differ")
    if not gt_boxes:
        raise ValueError("empty sequence")
    ious = np.array([box_iou(p, g) for p, g in zip(pred_boxes, gt_boxes)])
    thresholds = np.linspace(0.0, 1.0, 21)
    success = np.array([(ious >= t).mean() for t in thresholds])
    dists = []
    for p, g in zip(pred_boxes, gt_boxes):
        pc = tlwh_to_cxcywh(p)
        gc = tlwh_to_cxcywh(g)
        dists.append(np.hypot(pc[0] - gc[0], pc[1] - gc[1]))
    precision = float(np.mean(np.array(dists) <= PRECISION_RADIUS_PX))
    return MetricReport(
        task="sot",
        metrics={
            "auc": float(success.mean()),
            "precision": precision,
            "mean_iou": float(ious.mean()),
        },
        curves={
            "success_thresholds": thresholds.tolist(),
            "success": success.tolist(),
            "iou_per_frame": ious.tolist(),
        },
    )


# ---------------------------------------------------------------- VOS


def _boundary(mask: np.ndarray) -> np.ndarray:
    """One-pixel inner boundary: mask minus its 4/8-neighborhood erosion."""
    m = mask.astype(bool)
    if not m.any():
        return m
    padded = np.pad(m, 1, constant_values=False)
    eroded = np.ones_like(m)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            eroded &= padded[1 + dy : 1 + dy + m.shape[0], 1 + dx : 1 + dx + m.shape[1]]
    return m & ~eroded


def _dilate(mask: np.ndarray) -> np.ndarray:
    m = mask.astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    out = np.zeros_like(m)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            out |= padded[1 + dy : 1 + dy + m.shape[0], 1 + dx : 1 + dx + m.shape[1]]
    return out


def _boundary_f(pred: np.ndarray, gt: np.ndarray) -> float:
    pb = _boundary(pred)
    gb = _boundary(gt)
    n_pb = pb.sum()
    n_gb = gb.sum()
    if n_pb == 0 and n_gb == 0:
        return 1.0
    if n_pb == 0 or n_gb == 0:
        return 0.0
    precision = float((pb & _dilate(gb)).sum() / n_pb)
    recall = float((gb & _dilate(pb)).sum() / n_gb)
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def vos_jf(pred_masks, gt_masks) -> MetricReport:
    """Region similarity J (mean mask IoU) and boundary accuracy F.

    Boundaries are one-pixel inner contours matched with a one-pixel
    tolerance on both sides.
    """
    if len(pred_masks) != len(gt_masks):
        raise ValueError("prediction and ground-truth lengths differ")
    if not gt_masks:
        raise ValueError("empty sequence")
    js = []
    fs = []
    for p, g in zip(pred_masks, gt_masks):
        if p.shape != g.shape:
            raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
        js.append(mask_iou(p, g))
        fs.append(_boundary_f(p, g))
    j = float(np.mean(js))
    f = float(np.mean(fs))
    return MetricReport(
        task="vos",
        metrics={"j": j, "f": f, "jf": (j + f) / 2.0},
        curves={"j_per_frame": [float(v) for v in js], "f_per_frame": [float(v) for v in fs]},
    )


# ------------------------------------------------------- CLEAR scanning


def _assign_min_cost(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost assignment, dropping pairs at the infeasible sentinel."""
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if cost[r, c] < _INFEASIBLE / 2]


def _clear_scan(gt_frames, pred_frames, iou_fn):
    """Shared event counting for MOT and MOTS.

    gt_frames / pred_frames: {frame: [(id, payload), ...]}. Returns the event
    counts plus the summed IoU of matches and a per-frame event table.
    """
    frames = sorted(set(gt_frames) | set(pred_frames))
    total_gt = sum(len(v) for v in gt_frames.values())
    if total_gt == 0:
        raise ValueError("ground truth contains no boxes")
    fp = fn = ids = 0
    iou_sum = 0.0
    last_match: dict[int, int] = {}
    prev_pairs: dict[int, int] = {}
    per_frame = []
    for frame in frames:
        gts = gt_frames.get(frame, [])
        preds = pred_frames.get(frame, [])
        pred_by_id = {pid: payload for pid, payload in preds}
        pairs: dict[int, int] = {}
        pair_iou: dict[int, float] = {}
        # continuity: keep last frame's pairs that still overlap
        for gid, payload in gts:
            pid = prev_pairs.get(gid)
            if pid is not None and pid in pred_by_id:
                iou = iou_fn(payload, pred_by_id[pid])
                if iou >= MATCH_IOU:
                    pairs[gid] = pid
                    pair_iou[gid] = iou
        rest_gt = [(gid, payload) for gid, payload in gts if gid not in pairs]
        used = set(pairs.values())
        rest_pred = [(pid, payload) for pid, payload in preds if pid not in used]
        if rest_gt and rest_pred:
            cost = np.full((len(rest_gt), len(rest_pred)), _INFEASIBLE)
            for i, (_, gp) in enumerate(rest_gt):
                for j, (_, pp) in enumerate(rest_pred):
                    iou = iou_fn(gp, pp)
                    if iou >= MATCH_IOU:
                        cost[i, j] = 1.0 - iou
            for i, j in _assign_min_cost(cost):
                gid = rest_gt[i][0]
                pid = rest_pred[j][0]
                pairs[gid] = pid
                pair_iou[gid] = 1.0 - cost[i, j]
        frame_ids = 0
        for gid, pid in pairs.items():
            prior = last_match.get(gid)
            if prior is not None and prior != pid:
                frame_ids += 1
            last_match[gid] = pid
        frame_fn = len(gts) - len(pairs)
        frame_fp = len(preds) - len(pairs)
        fp += frame_fp
        fn += frame_fn
        ids += frame_ids
        iou_sum += sum(pair_iou.values())
        per_frame.append((frame, frame_fp, frame_fn, frame_ids, len(pairs)))
        prev_pairs = pairs
    return total_gt, fp, fn, ids, iou_sum, per_frame


def _idf1(gt_frames, pred_frames, iou_fn) -> float:
    gt_ids = sorted({gid for v in gt_frames.values() for gid, _ in v})
    pred_ids = sorted({pid for v in pred_frames.values() for pid, _ in v})
    total_gt = sum(len(v) for v in gt_frames.values())
    total_pred = sum(len(v) for v in pred_frames.values())
    if not gt_ids or not pred_ids:
        return 0.0
    counts = np.zeros((len(gt_ids), len(pred_ids)))
    gi = {g: i for i, g in enumerate(gt_ids)}
    pi = {p: i for i, p in enumerate(pred_ids)}
    frames = sorted(set(gt_frames) | set(pred_frames))
    for frame in frames:
        for gid, gp in gt_frames.get(frame, []):
            for pid, pp in pred_frames.get(frame, []):
                if iou_fn(gp, pp) >= MATCH_IOU:
                    counts[gi[gid], pi[pid]] += 1
    rows, cols = linear_sum_assignment(-counts)
    idtp = sum(counts[r, c] for r, c in zip(rows, cols))
    if total_gt + total_pred == 0:
        return 0.0
    return float(2.0 * idtp / (total_gt + total_pred))


def mot_clear(pred_frames, gt_frames, iou_fn=box_iou) -> MetricReport:
    """CLEAR-style multi-object score plus IDF1.

    pred_frames / gt_frames: {frame: [(id, corner box), ...]}. Ids must be
    unique within a frame.
    """
    _check_unique_ids(pred_frames, "prediction")
    _check_unique_ids(gt_frames, "ground truth")
    total_gt, fp, fn, ids, _, per_frame = _clear_scan(gt_frames, pred_frames, iou_fn)
    mota = 1.0 - (fp + fn + ids) / total_gt
    idf1 = _idf1(gt_frames, pred_frames, iou_fn)
    return MetricReport(
        task="mot",
        metrics={
            "mota": mota,
            "idf1": idf1,
            "fp": float(fp),
            "fn": float(fn),
            "ids": float(ids),
            "gt": float(total_gt),
        },
        curves={
            "frames": [row[0] for row in per_frame],
            "fp_per_frame": [float(row[1]) for row in per_frame],
            "fn_per_frame": [float(row[2]) for row in per_frame],
            "ids_per_frame": [float(row[3]) for row in per_frame],
        },
    )


def mots_smotsa(pred_frames, gt_frames) -> MetricReport:
    """Soft mask-based multi-object score.

    sMOTSA = (sum of matched mask IoU - FP - IDS) / total GT masks, with the
    same matching procedure as the box score but mask IoU as the affinity.
    """
    _check_unique_ids(pred_frames, "prediction")
    _check_unique_ids(gt_frames, "ground truth")
    total_gt, fp, fn, ids, iou_sum, per_frame = _clear_scan(gt_frames, pred_frames, mask_iou)
    smotsa = (iou_sum - fp - ids) / total_gt
    idf1 = _idf1(gt_frames, pred_frames, mask_iou)
    return MetricReport(
        task="mots",
        metrics={
            "smotsa": smotsa,
            "idf1": idf1,
            "fp": float(fp),
            "fn": float(fn),
            "ids": float(ids),
            "gt": float(total_gt),
            "soft_tp": iou_sum,
        },
        curves={
            "frames": [row[0] for row in per_frame],
            "fp_per_frame": [float(row[1]) for row in per_frame],
            "fn_per_frame": [float(row[2]) for row in per_frame],
            "ids_per_frame": [float(row[3]) for row in per_frame],
        },
    )


def _check_unique_ids(frames, label: str) -> None:
    for frame, items in frames.items():
        seen = [i for i, _ in items]
        if len(seen) != len(set(seen)):
            raise ValueError(f"{label} frame {frame} repeats an id")

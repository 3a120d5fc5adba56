"""Unified detection and segmentation head.

One head serves all four task modes. The target prior (when present) is
bilinearly resized to each pyramid level and broadcast-added over channels;
a zero prior leaves the features untouched, bit for bit, so the multi-object
tasks run an ordinary detector. Decoding is anchor-free: each cell predicts
objectness, per-class scores, a sub-cell center offset through a sigmoid,
and log-scale box sides. Masks come from a tiny per-instance dynamic network
over mask features plus coordinates relative to the detection center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkit
from .backbone import DYNAMIC_PARAMS, MASK_CHANNELS, FeaturePyramid
from .config import Config
from .correspondence import EMBED_STRIDE, TargetPrior
from .metrics import box_iou_cxcywh

HEAD_GN_GROUPS = 4
MASK_GN_GROUPS = 4


class NoDetections(Exception):
    """Raised when a winner is requested from an empty detection list."""


@dataclass
class FusedFeature:
    stride: int
    f: np.ndarray


@dataclass
class Detection:
    box: tuple[float, float, float, float]  # (cx, cy, w, h) pixels
    score: float
    class_id: int
    stride: int
    cell: tuple[int, int]
    emb_cell: tuple[int, int]

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.box[2] <= 0.0 or self.box[3] <= 0.0:
            raise ValueError("box sides must be positive")


@dataclass
class InstanceMask:
    h: int
    w: int
    data: np.ndarray  # (h, w) uint8 in {0, 1}

    def __post_init__(self):
        if self.data.shape != (self.h, self.w):
            raise ValueError("mask data does not match declared shape")


@dataclass
class HeadParams:
    weights: dict[str, np.ndarray]
    num_classes: int = 1
    score_threshold: float = 0.30
    nms_iou_threshold: float = 0.65
    mask_threshold: float = 0.5

    @classmethod
    def from_config(cls, weights: dict[str, np.ndarray], cfg: Config) -> "HeadParams":
        return cls(
            weights=weights,
            num_classes=cfg.num_classes,
            score_threshold=cfg.score_threshold,
            nms_iou_threshold=cfg.nms_iou_threshold,
            mask_threshold=cfg.mask_threshold,
        )


@dataclass
class MaskContext:
    """Shared per-frame pieces of the mask path, reusable across instances."""

    stride8: FusedFeature
    mask_feats: np.ndarray
    tower: np.ndarray


# ---------------------------------------------------------------- fusion


def fuse(f: np.ndarray, prior: TargetPrior) -> np.ndarray:
    """Add the prior, resized to this level's grid, across all channels.

    An all-zero prior returns the features unchanged (same bits): without a
    designated target the head sees exactly the plain pyramid level.
    """
    if f.ndim != 3:
        raise ValueError("fuse expects an (h, w, c) feature map")
    if not np.any(prior.p):
        return f.copy()
    p = numkit.bilinear_resize(prior.p, f.shape[0], f.shape[1])
    return f + p


def fuse_pyramid(pyr: FeaturePyramid, prior: TargetPrior) -> dict[int, FusedFeature]:
    return {s: FusedFeature(stride=s, f=fuse(feat, prior)) for s, feat in sorted(pyr.levels.items())}


# ---------------------------------------------------------------- forward


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _relu(x):
    return np.maximum(x, 0.0)


def _conv_gn_relu(x, w, b, groups):
    pad = w.shape[0] // 2
    return _relu(numkit.group_norm(numkit.conv2d(x, w, pad=pad) + b, groups))


def level_raw(fused: FusedFeature, params: HeadParams) -> dict[str, np.ndarray]:
    """Raw per-cell outputs for one level: obj/cls logits and box deltas."""
    w = params.weights
    stem = _conv_gn_relu(
        fused.f, w[f"hd.stem{fused.stride}.w"], w[f"hd.stem{fused.stride}.b"], HEAD_GN_GROUPS
    )
    tower_cls = _conv_gn_relu(stem, w["hd.tower_cls.w"], w["hd.tower_cls.b"], HEAD_GN_GROUPS)
    tower_reg = _conv_gn_relu(stem, w["hd.tower_reg.w"], w["hd.tower_reg.b"], HEAD_GN_GROUPS)
    return {
        "stem": stem,
        "tower_cls": tower_cls,
        "tower_reg": tower_reg,
        "cls": numkit.conv2d(tower_cls, w["hd.cls.w"]) + w["hd.cls.b"],
        "obj": numkit.conv2d(tower_reg, w["hd.obj.w"]) + w["hd.obj.b"],
        "reg": numkit.conv2d(tower_reg, w["hd.reg.w"]) + w["hd.reg.b"],
    }


def head_raw(
    fused_levels: dict[int, FusedFeature], params: HeadParams
) -> dict[int, dict[str, np.ndarray]]:
    return {stride: level_raw(fl, params) for stride, fl in sorted(fused_levels.items())}


# ---------------------------------------------------------------- decode


def decode_cell(raw: np.ndarray, row: int, col: int, stride: int) -> tuple[float, float, float, float]:
    """Raw (dx, dy, pw, ph) at one cell to a (cx, cy, w, h) pixel box."""
    dx, dy, pw, ph = (float(v) for v in raw)
    cx = (col + _sigmoid(dx)) * stride
    cy = (row + _sigmoid(dy)) * stride
    return (cx, cy, math.exp(pw) * stride, math.exp(ph) * stride)


def encode_box(
    box: tuple[float, float, float, float], row: int, col: int, stride: int
) -> np.ndarray:
    """Inverse of decode_cell; the center must fall inside the given cell."""
    cx, cy, w, h = (float(v) for v in box)
    sx = cx / stride - col
    sy = cy / stride - row
    if not (0.0 < sx < 1.0 and 0.0 < sy < 1.0):
        raise ValueError("box center does not fall inside the target cell")
    if w <= 0.0 or h <= 0.0:
        raise ValueError("box sides must be positive")
    logit = lambda p: math.log(p / (1.0 - p))
    return np.array([logit(sx), logit(sy), math.log(w / stride), math.log(h / stride)])


def detect_from_raw(
    raws: dict[int, dict[str, np.ndarray]], params: HeadParams
) -> list[Detection]:
    """Score, threshold, and NMS the raw head outputs of all levels."""
    frame_h = frame_w = None
    candidates: list[Detection] = []
    for stride in sorted(raws):
        raw = raws[stride]
        obj = raw["obj"]
        cls = raw["cls"]
        reg = raw["reg"]
        lh, lw = obj.shape[:2]
        if frame_h is None:
            frame_h, frame_w = lh * stride, lw * stride
        elif (lh * stride, lw * stride) != (frame_h, frame_w):
            raise ValueError("levels disagree on frame size")
        scores = _sigmoid(cls) * _sigmoid(obj[..., :1])
        keep = scores >= params.score_threshold
        for row, col, k in zip(*np.nonzero(keep)):
            box = decode_cell(reg[row, col], row, col, stride)
            emb_cell = (
                int(box[1] // EMBED_STRIDE),
                int(box[0] // EMBED_STRIDE),
            )
            candidates.append(
                Detection(
                    box=box,
                    score=float(scores[row, col, k]),
                    class_id=int(k) + 1,
                    stride=stride,
                    cell=(int(row), int(col)),
                    emb_cell=emb_cell,
                )
            )
    return nms(candidates, params.nms_iou_threshold)


def detect(fused_levels: dict[int, FusedFeature], params: HeadParams) -> list[Detection]:
    return detect_from_raw(head_raw(fused_levels, params), params)


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Class-aware greedy suppression with a deterministic ordering."""
    order = sorted(
        dets, key=lambda d: (-d.score, d.stride, d.cell[0], d.cell[1], d.class_id)
    )
    kept: list[Detection] = []
    for det in order:
        crowded = any(
            k.class_id == det.class_id and box_iou_cxcywh(k.box, det.box) >= iou_threshold
            for k in kept
        )
        if not crowded:
            kept.append(det)
    return kept


def pick_top1(dets: list[Detection]) -> Detection:
    """Highest score wins; exact ties go to the lower row-major grid cell."""
    if not dets:
        raise NoDetections("no detections to pick from")
    return min(dets, key=lambda d: (-d.score, d.emb_cell[0], d.emb_cell[1], d.stride, d.class_id))


# ---------------------------------------------------------------- masks


def prepare_mask_context(fused8: FusedFeature, params: HeadParams) -> MaskContext:
    if fused8.stride != EMBED_STRIDE:
        raise ValueError("mask path runs on the stride-8 level")
    w = params.weights
    raw = level_raw(fused8, params)
    mask_feats = _conv_gn_relu(fused8.f, w["hd.maskbranch.w"], w["hd.maskbranch.b"], MASK_GN_GROUPS)
    return MaskContext(stride8=fused8, mask_feats=mask_feats, tower=raw["tower_reg"])


def controller_params(ctx: MaskContext, cell: tuple[int, int], params: HeadParams) -> np.ndarray:
    """Per-instance dynamic weights read off the tower at the given cell."""
    w = params.weights
    feat = ctx.tower[cell[0], cell[1]]
    theta = feat @ w["hd.ctrl.w"][0, 0] + w["hd.ctrl.b"]
    if theta.shape != (DYNAMIC_PARAMS,):
        raise ValueError(f"controller must emit {DYNAMIC_PARAMS} parameters")
    return theta


def dynamic_mask_forward(
    mask_feats: np.ndarray, center: tuple[float, float], theta: np.ndarray
) -> np.ndarray:
    """Run the three-layer dynamic network over features + relative coords.

    Parameter layout in theta: w1 (10*8), b1 (8), w2 (8*8), b2 (8),
    w3 (8*1), b3 (1) = 169 values.
    """
    h8, w8 = mask_feats.shape[:2]
    cm = MASK_CHANNELS
    cin = cm + 2
    cols = ((np.arange(w8) + 0.5) * EMBED_STRIDE - center[0]) / EMBED_STRIDE
    rows = ((np.arange(h8) + 0.5) * EMBED_STRIDE - center[1]) / EMBED_STRIDE
    coords = np.stack(
        [np.broadcast_to(cols, (h8, w8)), np.broadcast_to(rows[:, None], (h8, w8))], axis=2
    )
    x = np.concatenate([mask_feats, coords], axis=2).reshape(-1, cin)
    o = 0
    w1 = theta[o : o + cin * cm].reshape(cin, cm); o += cin * cm
    b1 = theta[o : o + cm]; o += cm
    w2 = theta[o : o + cm * cm].reshape(cm, cm); o += cm * cm
    b2 = theta[o : o + cm]; o += cm
    w3 = theta[o : o + cm].reshape(cm, 1); o += cm
    b3 = theta[o]
    h1 = _relu(x @ w1 + b1)
    h2 = _relu(h1 @ w2 + b2)
    return (h2 @ w3 + b3).reshape(h8, w8)


def mask_logits(ctx: MaskContext, det: Detection, params: HeadParams) -> np.ndarray:
    """Frame-resolution mask logits for one detection."""
    theta = controller_params(ctx, det.emb_cell, params)
    logits = dynamic_mask_forward(ctx.mask_feats, (det.box[0], det.box[1]), theta)
    up = logits[..., None]
    for _ in range(3):  # stride 8 back to full resolution
        up = numkit.bilinear_upsample2x(up)
    return up[..., 0]


def mask_head(ctx: MaskContext, det: Detection, params: HeadParams) -> InstanceMask:
    logits = mask_logits(ctx, det, params)
    t = params.mask_threshold
    if not 0.0 < t < 1.0:
        raise ValueError("mask threshold must lie in (0, 1)")
    cut = math.log(t / (1.0 - t))
    data = (logits >= cut).astype(np.uint8)
    return InstanceMask(h=data.shape[0], w=data.shape[1], data=data)

"""Pixel and instance correspondence between two frame embeddings.

The pixel correspondence is a row-stochastic matrix: row i holds the
distribution of current-frame cell i over all reference cells, obtained by a
temperature softmax of embedding dot products. Instance correspondence is
the same construction restricted to the cells under chosen boxes, so its
pre-softmax logits are (bitwise) a sub-matrix of the pixel logits.

Target maps ride along as column vectors: propagating a reference target map
through the correspondence is one matrix product, and the result feeds the
head as a spatial prior for the single-target tasks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .backbone import Embedding

EMBED_STRIDE = 8
ROW_SUM_TOL = 1e-9

TASKS = ("sot", "mot", "vos", "mots")
SINGLE_TARGET_TASKS = ("sot", "vos")
MASK_TASKS = ("vos", "mots")


def check_task(task: str) -> str:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}, expected one of {TASKS}")
    return task


# ---------------------------------------------------------------- types


@dataclass
class PixelCorrespondence:
    """Row-stochastic (h*w, h*w) matrix over the stride-8 grid."""

    h: int
    w: int
    c: np.ndarray

    def __post_init__(self):
        n = self.h * self.w
        if self.c.shape != (n, n):
            raise ValueError(f"correspondence must be ({n}, {n}), got {self.c.shape}")
        err = np.max(np.abs(self.c.sum(axis=1) - 1.0))
        if err > ROW_SUM_TOL:
            raise ValueError(f"rows must sum to 1 within {ROW_SUM_TOL}, off by {err}")


@dataclass
class InstanceEmbedding:
    """Embedding rows gathered at box centers, with their grid cells."""

    e: np.ndarray
    cells: list[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.cells)


@dataclass
class InstanceCorrespondence:
    c: np.ndarray
    empty: bool = False


@dataclass
class TargetMap:
    """Per-cell target weights as an (h*w, 1) column; binary or soft."""

    h: int
    w: int
    t: np.ndarray
    binary: bool = True

    def __post_init__(self):
        if self.t.shape != (self.h * self.w, 1):
            raise ValueError(f"target map must be ({self.h * self.w}, 1), got {self.t.shape}")
        if self.binary:
            if not np.all((self.t == 0.0) | (self.t == 1.0)):
                raise ValueError("binary target map must contain only 0 and 1")
        elif self.t.min() < 0.0 or self.t.max() > 1.0:
            raise ValueError("soft target map values must lie in [0, 1]")

    def grid(self) -> np.ndarray:
        return self.t.reshape(self.h, self.w)


@dataclass
class TargetPrior:
    """Spatial prior handed to the head; zero for the multi-object tasks."""

    task: str
    p: np.ndarray  # (h, w, 1)


@dataclass
class GroundTruthMatch:
    g: np.ndarray
    rows_matched: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


# ---------------------------------------------------------------- logits


def pixel_logits(e_cur: Embedding, e_ref: Embedding) -> np.ndarray:
    """Pre-softmax similarity of every current cell against every reference
    cell. Both instance and pixel correspondence go through this product, so
    sub-selections agree bit for bit."""
    if e_cur.c != e_ref.c:
        raise ValueError(f"embedding widths differ: {e_cur.c} vs {e_ref.c}")
    return numkit.matmul(e_cur.e, e_ref.e.T)


def _resolve_temperature(temperature: float | None, c: int) -> float:
    if temperature is None:
        return 1.0 / math.sqrt(c)
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    return temperature


def pixel_correspondence(
    e_cur: Embedding, e_ref: Embedding, temperature: float | None = None
) -> PixelCorrespondence:
    """Softmax over the reference axis of the embedding dot products."""
    if (e_cur.h, e_cur.w) != (e_ref.h, e_ref.w):
        raise ValueError("embeddings live on different grids")
    tau = _resolve_temperature(temperature, e_cur.c)
    c = numkit.softmax_rows(pixel_logits(e_cur, e_ref), temperature=tau)
    return PixelCorrespondence(h=e_cur.h, w=e_cur.w, c=c)


def extract_instance_embeddings(emb: Embedding, boxes) -> InstanceEmbedding:
    """Gather one embedding row per box at the cell holding its center.

    Boxes are center-format (cx, cy, w, h) in pixels; the center maps to
    grid cell (floor(cy/8), floor(cx/8)).
    """
    rows = []
    cells = []
    for box in boxes:
        cx, cy = float(box[0]), float(box[1])
        col = math.floor(cx / EMBED_STRIDE)
        row = math.floor(cy / EMBED_STRIDE)
        if not (0 <= row < emb.h and 0 <= col < emb.w):
            raise ValueError(
                f"box center ({cx}, {cy}) falls outside the {emb.h}x{emb.w} embedding grid"
            )
        cells.append((row, col))
        rows.append(emb.e[row * emb.w + col])
    e = np.array(rows) if rows else np.zeros((0, emb.c))
    return InstanceEmbedding(e=e, cells=cells)


def instance_correspondence(
    inst_cur: InstanceEmbedding, inst_ref: InstanceEmbedding, temperature: float | None = None
) -> InstanceCorrespondence:
    """Row-stochastic matching of current instances against reference ones."""
    n, m = len(inst_cur), len(inst_ref)
    if n == 0 or m == 0:
        return InstanceCorrespondence(c=np.zeros((n, m)), empty=True)
    tau = _resolve_temperature(temperature, inst_cur.e.shape[1])
    logits = numkit.matmul(inst_cur.e, inst_ref.e.T)
    return InstanceCorrespondence(c=numkit.softmax_rows(logits, temperature=tau))


# ---------------------------------------------------------------- targets


def propagate(c_pix: PixelCorrespondence, t_ref: TargetMap) -> TargetMap:
    """Carry a reference target map to the current frame: t_cur = C @ t_ref.

    Rows of C are convex weights, so constants are preserved; the constant
    fast path keeps that exact in floating point as well (an all-ones map
    propagates to all ones bitwise, all zeros to all zeros).
    """
    if (t_ref.h, t_ref.w) != (c_pix.h, c_pix.w):
        raise ValueError("target map grid does not match the correspondence grid")
    first = t_ref.t.flat[0] if t_ref.t.size else 0.0
    if np.all(t_ref.t == first):
        return TargetMap(h=t_ref.h, w=t_ref.w, t=np.full_like(t_ref.t, first), binary=False)
    t = numkit.matmul(c_pix.c, t_ref.t)
    t = np.clip(t, 0.0, 1.0)
    return TargetMap(h=t_ref.h, w=t_ref.w, t=t, binary=False)


def make_target_prior(t_prop: TargetMap, task: str) -> TargetPrior:
    """Reshape the propagated map into a spatial prior; zero it for the
    multi-object tasks, which run detection without a designated target."""
    check_task(task)
    if task in SINGLE_TARGET_TASKS:
        p = t_prop.t.reshape(t_prop.h, t_prop.w, 1).copy()
    else:
        p = np.zeros((t_prop.h, t_prop.w, 1))
    return TargetPrior(task=task, p=p)


def zero_prior(task: str, h: int, w: int) -> TargetPrior:
    check_task(task)
    return TargetPrior(task=task, p=np.zeros((h, w, 1)))


def ground_truth_match(ids_cur, ids_ref) -> GroundTruthMatch:
    """Binary match matrix: g[i, j] = 1 iff the ids are equal.

    Ids must be unique within each list. Rows with no reference partner are
    all zero and marked unmatched.
    """
    if len(set(ids_cur)) != len(ids_cur):
        raise ValueError("current ids repeat")
    if len(set(ids_ref)) != len(ids_ref):
        raise ValueError("reference ids repeat")
    g = np.zeros((len(ids_cur), len(ids_ref)))
    for i, a in enumerate(ids_cur):
        for j, b in enumerate(ids_ref):
            if a == b:
                g[i, j] = 1.0
    return GroundTruthMatch(g=g, rows_matched=g.sum(axis=1) > 0)


def target_map_from_box(box, h: int, w: int, stride: int = EMBED_STRIDE) -> TargetMap:
    """Mark every cell whose center falls inside the (cx, cy, w, h) box.

    A box too small to cover any cell center falls back to the single cell
    containing its center.
    """
    cx, cy, bw, bh = (float(v) for v in box)
    if bw <= 0 or bh <= 0:
        raise ValueError("box sides must be positive")
    t = np.zeros((h * w, 1))
    cols = (np.arange(w) + 0.5) * stride
    rows = (np.arange(h) + 0.5) * stride
    in_x = (cols >= cx - bw / 2) & (cols <= cx + bw / 2)
    in_y = (rows >= cy - bh / 2) & (rows <= cy + bh / 2)
    hit = np.outer(in_y, in_x)
    if hit.any():
        t[hit.reshape(-1), 0] = 1.0
    else:
        row = min(max(int(cy // stride), 0), h - 1)
        col = min(max(int(cx // stride), 0), w - 1)
        t[row * w + col, 0] = 1.0
    return TargetMap(h=h, w=w, t=t, binary=True)


def target_map_from_mask(mask: np.ndarray, h: int, w: int, stride: int = EMBED_STRIDE) -> TargetMap:
    """Downsample a pixel mask to the cell grid by strict block majority."""
    if mask.shape != (h * stride, w * stride):
        raise ValueError(f"mask shape {mask.shape} does not cover the {h}x{w} cell grid")
    m = mask.astype(bool)
    if not m.any():
        raise ValueError("cannot build a target map from an empty mask")
    blocks = m.reshape(h, stride, w, stride).sum(axis=(1, 3))
    hit = blocks * 2 > stride * stride
    t = np.zeros((h * w, 1))
    if hit.any():
        t[hit.reshape(-1), 0] = 1.0
    else:
        ys, xs = np.nonzero(m)
        row = min(int(ys.mean()) // stride, h - 1)
        col = min(int(xs.mean()) // stride, w - 1)
        t[row * w + col, 0] = 1.0
    return TargetMap(h=h, w=w, t=t, binary=True)

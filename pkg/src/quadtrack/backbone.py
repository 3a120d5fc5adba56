"""Frame backbone, two-frame feature interaction, and the shared embedding.

The backbone is a five-stage strided conv stack producing a three-level
pyramid (strides 8/16/32, widths 16/32/64). Interaction runs on the stride-16
level only: the two frames exchange information through one attention (or
conv) block, the result is upsampled 2x and projected to the embedding width,
giving one embedding vector per stride-8 cell. Weights are plain float64
arrays in a flat dict; nothing here is trained by gradient descent except
through the hooks the toy trainer reaches in explicitly.

Frame contract: float64 (h, w, 3) in [0, 1], both sides divisible by 32.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numkit
from .config import Config

STRIDES = (8, 16, 32)
LEVEL_CHANNELS = {8: 16, 16: 32, 32: 64}
INTERACT_CHANNELS = 32
HEAD_CHANNELS = 16
MASK_CHANNELS = 8
DYNAMIC_PARAMS = 169  # 3-layer dynamic point head on 8 features + 2 coords

_BACKBONE_STAGES = (
    # (name, c_in, c_out, norm groups)
    ("bb.conv1", 3, 16, 4),
    ("bb.conv2", 16, 16, 4),
    ("bb.conv3", 16, 16, 4),
    ("bb.conv4", 16, 32, 8),
    ("bb.conv5", 32, 64, 8),
)

WEIGHTS_FORMAT = "quadtrack-weights"
WEIGHTS_VERSION = 1


# ---------------------------------------------------------------- types


@dataclass
class FeaturePyramid:
    """Per-stride feature maps for one frame."""

    levels: dict[int, np.ndarray]

    def __post_init__(self):
        if tuple(sorted(self.levels)) != STRIDES:
            raise ValueError(f"pyramid must carry strides {STRIDES}")
        for stride, feat in self.levels.items():
            if feat.ndim != 3 or feat.shape[2] != LEVEL_CHANNELS[stride]:
                raise ValueError(f"stride-{stride} level has shape {feat.shape}")


@dataclass
class Embedding:
    """One vector per stride-8 grid cell, stored row-major as (h*w, c)."""

    h: int
    w: int
    c: int
    e: np.ndarray

    def __post_init__(self):
        if self.e.shape != (self.h * self.w, self.c):
            raise ValueError(f"embedding matrix is {self.e.shape}, expected {(self.h * self.w, self.c)}")

    def grid(self) -> np.ndarray:
        return self.e.reshape(self.h, self.w, self.c)


@dataclass
class InteractionConfig:
    mode: str = "deformable"
    heads: int = 2
    points: int = 4

    def __post_init__(self):
        if self.mode not in ("deformable", "full", "none"):
            raise ValueError(f"unknown interaction mode: {self.mode!r}")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.points < 1:
            raise ValueError("points must be >= 1")
        if INTERACT_CHANNELS % self.heads != 0:
            raise ValueError(f"heads must divide {INTERACT_CHANNELS}")

    @classmethod
    def from_config(cls, cfg: Config) -> "InteractionConfig":
        return cls(mode=cfg.interaction_mode, heads=cfg.attention_heads, points=cfg.sample_points)


# ---------------------------------------------------------------- frames


def validate_frame(frame: np.ndarray) -> np.ndarray:
    frame = numkit.as_tensor(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"frame must be (h, w, 3), got {frame.shape}")
    h, w = frame.shape[:2]
    if h % 32 or w % 32 or h == 0 or w == 0:
        raise ValueError(f"frame sides must be positive multiples of 32, got {h}x{w}")
    if frame.min() < 0.0 or frame.max() > 1.0:
        raise ValueError("frame values must lie in [0, 1]")
    return frame


# ---------------------------------------------------------------- weights


def _weight_plan(cfg: Config) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every tensor, in fixed creation order."""
    plan: list[tuple[str, tuple[int, ...], int]] = []
    for name, cin, cout, _ in _BACKBONE_STAGES:
        plan.append((f"{name}.w", (3, 3, cin, cout), 9 * cin))
        plan.append((f"{name}.b", (cout,), 9 * cin))
    c = INTERACT_CHANNELS
    plan.append(("in.conv.w", (3, 3, c, c), 9 * c))
    plan.append(("in.conv.b", (c,), 9 * c))
    for proj in ("wq", "wk", "wv", "wo"):
        plan.append((f"in.full.{proj}", (c, c), c))
        plan.append((f"in.full.{proj[1]}b", (c,), c))
    hk = cfg.attention_heads * cfg.sample_points
    plan.append(("in.def.wv", (c, c), c))
    plan.append(("in.def.vb", (c,), c))
    plan.append(("in.def.woff", (c, hk * 2), c))
    plan.append(("in.def.offb", (hk * 2,), c))
    plan.append(("in.def.wa", (c, hk), c))
    plan.append(("in.def.ab", (hk,), c))
    plan.append(("in.def.wo", (c, c), c))
    plan.append(("in.def.ob", (c,), c))
    plan.append(("em.conv.w", (3, 3, c, cfg.embed_channels), 9 * c))
    plan.append(("em.conv.b", (cfg.embed_channels,), 9 * c))
    hc = HEAD_CHANNELS
    for stride in STRIDES:
        cin = LEVEL_CHANNELS[stride]
        plan.append((f"hd.stem{stride}.w", (1, 1, cin, hc), cin))
        plan.append((f"hd.stem{stride}.b", (hc,), cin))
    for tower in ("tower_cls", "tower_reg"):
        plan.append((f"hd.{tower}.w", (3, 3, hc, hc), 9 * hc))
        plan.append((f"hd.{tower}.b", (hc,), 9 * hc))
    plan.append(("hd.cls.w", (1, 1, hc, cfg.num_classes), hc))
    plan.append(("hd.cls.b", (cfg.num_classes,), hc))
    plan.append(("hd.obj.w", (1, 1, hc, 1), hc))
    plan.append(("hd.obj.b", (1,), hc))
    plan.append(("hd.reg.w", (1, 1, hc, 4), hc))
    plan.append(("hd.reg.b", (4,), hc))
    plan.append(("hd.ctrl.w", (1, 1, hc, DYNAMIC_PARAMS), hc))
    plan.append(("hd.ctrl.b", (DYNAMIC_PARAMS,), hc))
    plan.append(("hd.maskbranch.w", (3, 3, hc, MASK_CHANNELS), 9 * hc))
    plan.append(("hd.maskbranch.b", (MASK_CHANNELS,), 9 * hc))
    return plan


def init_weights(seed: int, cfg: Config | None = None) -> dict[str, np.ndarray]:
    """Fresh weights, uniform in +/- 1/sqrt(fan_in), reproducible per seed."""
    cfg = cfg or Config()
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape, fan_in in _weight_plan(cfg):
        bound = 1.0 / math.sqrt(fan_in)
        weights[name] = rng.uniform(-bound, bound, size=shape)
    return weights


def expected_shapes(cfg: Config) -> dict[str, tuple[int, ...]]:
    return {name: shape for name, shape, _ in _weight_plan(cfg)}


def save_weights(weights: dict[str, np.ndarray], path: str | Path, meta: dict | None = None) -> None:
    """One JSON header line, then raw little-endian float64 blobs."""
    names = sorted(weights)
    header = {
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "names": names,
        "shapes": {n: list(weights[n].shape) for n in names},
        "meta": meta or {},
    }
    buf = io.BytesIO()
    buf.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
    for name in names:
        buf.write(np.ascontiguousarray(weights[name], dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_weights(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"weight file {path}: missing header line")
    try:
        header = json.loads(raw[: nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"weight file {path}: bad header: {exc}") from exc
    if header.get("format") != WEIGHTS_FORMAT:
        raise ValueError(f"weight file {path}: unknown format {header.get('format')!r}")
    if header.get("version") != WEIGHTS_VERSION:
        raise ValueError(f"weight file {path}: unsupported version {header.get('version')!r}")
    blob = raw[nl + 1 :]
    weights = {}
    offset = 0
    for name in header["names"]:
        shape = tuple(header["shapes"][name])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise ValueError(f"weight file {path}: truncated at tensor {name!r}")
        arr = np.frombuffer(blob[offset : offset + nbytes], dtype="<f8").reshape(shape)
        weights[name] = np.ascontiguousarray(arr, dtype=np.float64)
        offset += nbytes
    if offset != len(blob):
        raise ValueError(f"weight file {path}: {len(blob) - offset} trailing bytes")
    return weights, header.get("meta", {})


def check_weights(weights: dict[str, np.ndarray], cfg: Config) -> None:
    expect = expected_shapes(cfg)
    for name, shape in expect.items():
        if name not in weights:
            raise ValueError(f"weights missing tensor {name!r}")
        if tuple(weights[name].shape) != shape:
            raise ValueError(
                f"tensor {name!r} has shape {tuple(weights[name].shape)}, expected {shape}"
            )


# ---------------------------------------------------------------- pyramid


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def extract_pyramid(frame: np.ndarray, weights: dict[str, np.ndarray]) -> FeaturePyramid:
    """Run the conv stack; the last three stage outputs form the pyramid."""
    x = validate_frame(frame)
    levels = {}
    for i, (name, _, _, groups) in enumerate(_BACKBONE_STAGES):
        x = numkit.conv2d(x, weights[f"{name}.w"], stride=2, pad=1) + weights[f"{name}.b"]
        x = numkit.group_norm(x, groups)
        x = _relu(x)
        if i >= 2:
            levels[2 ** (i + 1)] = x
    return FeaturePyramid(levels=levels)


# ---------------------------------------------------------------- attention


def full_attend(
    own: np.ndarray, other: np.ndarray, weights: dict[str, np.ndarray], heads: int
) -> np.ndarray:
    """Multi-head attention of `own` queries over both frames' tokens.

    Keys are ordered own-frame-first. The ordering does not change the math,
    but it fixes the floating-point accumulation so that swapping the two
    input frames swaps the two outputs bit for bit.
    """
    h, w, c = own.shape
    q_in = own.reshape(h * w, c)
    keys_in = np.concatenate([own.reshape(h * w, c), other.reshape(-1, c)], axis=0)
    q = numkit.matmul(q_in, weights["in.full.wq"]) + weights["in.full.qb"]
    k = numkit.matmul(keys_in, weights["in.full.wk"]) + weights["in.full.kb"]
    v = numkit.matmul(keys_in, weights["in.full.wv"]) + weights["in.full.vb"]
    dh = c // heads
    scale = 1.0 / math.sqrt(dh)
    mixed = np.empty_like(q)
    for head in range(heads):
        sl = slice(head * dh, (head + 1) * dh)
        logits = numkit.matmul(q[:, sl], k[:, sl].T) * scale
        attn = numkit.softmax_rows(logits)
        mixed[:, sl] = numkit.matmul(attn, v[:, sl])
    out = numkit.matmul(mixed, weights["in.full.wo"]) + weights["in.full.ob"]
    return out.reshape(h, w, c)


def _gather_wrapped(
    v: np.ndarray, y0: np.ndarray, x0: np.ndarray, fy: np.ndarray, fx: np.ndarray
) -> np.ndarray:
    """Bilinear read of (H, W, d) values at integer corners plus fractions.

    Rows wrap around (the canvas is a vertical ring of the two frames), so a
    sample below one frame lands in the other. Columns outside the map read
    as zero. Fractions are passed separately: they come from the offsets
    alone, not from absolute positions, which keeps the arithmetic identical
    wherever the querying token sits.
    """
    big_h, big_w = v.shape[:2]
    out = np.zeros(y0.shape + (v.shape[2],))
    for dy, dx, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yy = np.mod(y0 + dy, big_h)
        xx = x0 + dx
        valid = (xx >= 0) & (xx < big_w)
        xc = np.clip(xx, 0, big_w - 1)
        out += (wgt * valid)[..., None] * v[yy, xc]
    return out


def deformable_attend(
    canvas: np.ndarray, weights: dict[str, np.ndarray], heads: int, points: int
) -> np.ndarray:
    """Sparse sampled attention over a stacked two-frame canvas.

    Every token predicts `points` fractional (dy, dx) offsets per head,
    bilinearly samples the value map there, and mixes the samples with a
    per-head softmax. With zero offsets and a single point this collapses to
    a value projection of the query's own location.
    """
    big_h, big_w, c = canvas.shape
    n = big_h * big_w
    tokens = canvas.reshape(n, c)
    v = (numkit.matmul(tokens, weights["in.def.wv"]) + weights["in.def.vb"]).reshape(
        big_h, big_w, c
    )
    off = (numkit.matmul(tokens, weights["in.def.woff"]) + weights["in.def.offb"]).reshape(
        n, heads, points, 2
    )
    attn_logits = (numkit.matmul(tokens, weights["in.def.wa"]) + weights["in.def.ab"]).reshape(
        n * heads, points
    )
    attn = numkit.softmax_rows(attn_logits).reshape(n, heads, points)
    rows, cols = np.divmod(np.arange(n), big_w)
    oy = np.floor(off[..., 0])
    ox = np.floor(off[..., 1])
    fy = off[..., 0] - oy
    fx = off[..., 1] - ox
    y0 = rows[:, None, None] + oy.astype(np.int64)
    x0 = cols[:, None, None] + ox.astype(np.int64)
    dh = c // heads
    mixed = np.empty((n, c))
    for head in range(heads):
        v_h = v[:, :, head * dh : (head + 1) * dh]
        samples = _gather_wrapped(
            v_h, y0[:, head, :], x0[:, head, :], fy[:, head, :], fx[:, head, :]
        )  # (n, points, dh)
        mixed[:, head * dh : (head + 1) * dh] = (attn[:, head, :, None] * samples).sum(axis=1)
    out = numkit.matmul(mixed, weights["in.def.wo"]) + weights["in.def.ob"]
    return out.reshape(big_h, big_w, c)


# ---------------------------------------------------------------- interact


def interact_core(
    f_ref: np.ndarray,
    f_cur: np.ndarray,
    icfg: InteractionConfig,
    weights: dict[str, np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    """Mixed and upsampled per-frame maps, before the embedding projection.

    Both inputs must share one shape. Each output is the residual
    interaction result upsampled to the stride-8 grid, still with the
    interaction channel count.
    """
    if f_ref.shape != f_cur.shape:
        raise ValueError(f"frame feature shapes differ: {f_ref.shape} vs {f_cur.shape}")
    if f_ref.ndim != 3 or f_ref.shape[2] != INTERACT_CHANNELS:
        raise ValueError(f"interaction expects (h, w, {INTERACT_CHANNELS}) maps")

    if icfg.mode == "none":
        def core(x):
            return numkit.conv2d(x, weights["in.conv.w"], pad=1) + weights["in.conv.b"]

        out_ref = f_ref + core(f_ref)
        out_cur = f_cur + core(f_cur)
    elif icfg.mode == "full":
        out_ref = f_ref + full_attend(f_ref, f_cur, weights, icfg.heads)
        out_cur = f_cur + full_attend(f_cur, f_ref, weights, icfg.heads)
    else:
        canvas = np.concatenate([f_ref, f_cur], axis=0)
        mixed = deformable_attend(canvas, weights, icfg.heads, icfg.points)
        h = f_ref.shape[0]
        out_ref = f_ref + mixed[:h]
        out_cur = f_cur + mixed[h:]

    return numkit.bilinear_upsample2x(out_ref), numkit.bilinear_upsample2x(out_cur)


def embed_map(up: np.ndarray, weights: dict[str, np.ndarray], embed_channels: int | None = None) -> Embedding:
    """Project an upsampled interaction map to the embedding space."""
    if embed_channels is None:
        embed_channels = weights["em.conv.w"].shape[3]
    e_map = numkit.conv2d(up, weights["em.conv.w"], pad=1) + weights["em.conv.b"]
    h8, w8 = e_map.shape[:2]
    return Embedding(h=h8, w=w8, c=embed_channels, e=e_map.reshape(h8 * w8, embed_channels))


def interact(
    f_ref: np.ndarray,
    f_cur: np.ndarray,
    icfg: InteractionConfig,
    weights: dict[str, np.ndarray],
    embed_channels: int | None = None,
) -> tuple[Embedding, Embedding]:
    """Exchange information between two stride-16 maps, return embeddings.

    Both maps must share one shape. Each output embedding lives on the
    stride-8 grid (2x the input) with `embed_channels` channels.
    """
    up_ref, up_cur = interact_core(f_ref, f_cur, icfg, weights)
    return embed_map(up_ref, weights, embed_channels), embed_map(up_cur, weights, embed_channels)

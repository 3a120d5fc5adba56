"""Two-stage toy trainer on synthetic sequences.

Stage 1 fits the embedding projection and the detection head with a joint
correspondence + detection objective, alternating single-target pairs
(propagation overlap loss, with the propagated prior fed to the head) and
multi-object pairs (instance cross entropy, zero prior). The backbone and
the interaction core stay frozen, so their outputs are precomputed once
per training pair.

Stage 2 freezes everything from stage 1 and fits only the mask branch and
the mask controller with the mask overlap loss.

All gradients are hand-derived; every forward here recomputes exactly the
inference code path (same primitives, same order), which the tests pin
bitwise against the head module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import numkit
from ..backbone import (
    FeaturePyramid,
    InteractionConfig,
    MASK_CHANNELS,
    embed_map,
    extract_pyramid,
    init_weights,
    interact_core,
)
from ..config import Config
from ..correspondence import (
    EMBED_STRIDE,
    GroundTruthMatch,
    InstanceCorrespondence,
    TargetMap,
    ground_truth_match,
    make_target_prior,
    target_map_from_box,
    zero_prior,
)
from ..head import HEAD_GN_GROUPS, MASK_GN_GROUPS, fuse_pyramid
from ..losses import (
    contrastive_ce_loss,
    detection_loss,
    dice_loss,
    mask_loss,
    unflatten_raws,
)
from ..tracker import Model
from .synth import Sequence, standard_sequence

STAGE1_TRAINABLE = (
    "em.conv.w",
    "em.conv.b",
    "hd.stem8.w",
    "hd.stem8.b",
    "hd.stem16.w",
    "hd.stem16.b",
    "hd.stem32.w",
    "hd.stem32.b",
    "hd.tower_cls.w",
    "hd.tower_cls.b",
    "hd.tower_reg.w",
    "hd.tower_reg.b",
    "hd.cls.w",
    "hd.cls.b",
    "hd.obj.w",
    "hd.obj.b",
    "hd.reg.w",
    "hd.reg.b",
)
STAGE2_TRAINABLE = ("hd.maskbranch.w", "hd.maskbranch.b", "hd.ctrl.w", "hd.ctrl.b")


class TrainingDiverged(Exception):
    """Raised when a loss or gradient stops being finite."""

    def __init__(self, stage: int, step: int, detail: str):
        super().__init__(f"stage {stage} diverged at step {step}: {detail}")
        self.stage = stage
        self.step = step


# ---------------------------------------------------------------- backward primitives


def relu_backward(activated: np.ndarray, gout: np.ndarray) -> np.ndarray:
    return gout * (activated > 0)


def conv2d_backward(
    x: np.ndarray, kernel: np.ndarray, gout: np.ndarray, pad: int = 0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a stride-1 conv2d wrt input, kernel, and bias."""
    kh, kw = kernel.shape[:2]
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    gw = np.einsum("ijcuv,ijo->uvco", win, gout, optimize=True)
    gb = gout.sum(axis=(0, 1))
    flipped = kernel[::-1, ::-1].transpose(0, 1, 3, 2)
    gx = numkit.conv2d(gout, flipped, pad=kh - 1 - pad)
    return gx, gw, gb


def group_norm_backward(
    x: np.ndarray, groups: int, gout: np.ndarray, eps: float = numkit.EPS_GROUP_NORM
) -> np.ndarray:
    h, w, c = x.shape
    xg = x.reshape(h, w, groups, c // groups)
    gg = gout.reshape(h, w, groups, c // groups)
    axes = (0, 1, 3)
    mean = xg.mean(axis=axes, keepdims=True)
    var = xg.var(axis=axes, keepdims=True)
    s = np.sqrt(var + eps)
    xhat = (xg - mean) / s
    gmean = gg.mean(axis=axes, keepdims=True)
    gdot = (gg * xhat).mean(axis=axes, keepdims=True)
    return ((gg - gmean - xhat * gdot) / s).reshape(h, w, c)


def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_resize_backward(gout: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of numkit.bilinear_resize for the same size pair."""
    out_h, out_w, c = gout.shape
    ry_lo, ry_hi, fy = _axis_weights(in_h, out_h)
    rx_lo, rx_hi, fx = _axis_weights(in_w, out_w)
    gin = np.zeros((in_h, in_w, c))
    top = gout * (1 - fy)[:, None, None]
    bot = gout * fy[:, None, None]
    for part, ry in ((top, ry_lo), (bot, ry_hi)):
        np.add.at(gin, (ry[:, None], rx_lo[None, :]), part * (1 - fx)[None, :, None])
        np.add.at(gin, (ry[:, None], rx_hi[None, :]), part * fx[None, :, None])
    return gin


def upsample2x_backward(gout: np.ndarray) -> np.ndarray:
    if gout.shape[0] % 2 or gout.shape[1] % 2:
        raise ValueError("upsampled sides must be even")
    return bilinear_resize_backward(gout, gout.shape[0] // 2, gout.shape[1] // 2)


def softmax_rows_backward(probs: np.ndarray, gout: np.ndarray, temperature: float) -> np.ndarray:
    dot = np.sum(probs * gout, axis=1, keepdims=True)
    return probs * (gout - dot) / temperature


# ---------------------------------------------------------------- layers


@dataclass
class LayerCache:
    x: np.ndarray
    z: np.ndarray
    a: np.ndarray


def layer_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, groups: int) -> LayerCache:
    """conv + group norm + relu, identical to the head's building block."""
    pad = w.shape[0] // 2
    z = numkit.conv2d(x, w, pad=pad) + b
    a = np.maximum(numkit.group_norm(z, groups), 0.0)
    return LayerCache(x=x, z=z, a=a)


def layer_backward(
    cache: LayerCache, w: np.ndarray, groups: int, ga: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    gn = relu_backward(cache.a, ga)
    gz = group_norm_backward(cache.z, groups, gn)
    return conv2d_backward(cache.x, w, gz, pad=w.shape[0] // 2)


def head_level_forward(x: np.ndarray, stride: int, weights) -> dict:
    """The head forward for one level, with caches for backprop."""
    stem = layer_forward(x, weights[f"hd.stem{stride}.w"], weights[f"hd.stem{stride}.b"], HEAD_GN_GROUPS)
    tcls = layer_forward(stem.a, weights["hd.tower_cls.w"], weights["hd.tower_cls.b"], HEAD_GN_GROUPS)
    treg = layer_forward(stem.a, weights["hd.tower_reg.w"], weights["hd.tower_reg.b"], HEAD_GN_GROUPS)
    return {
        "stem": stem,
        "tcls": tcls,
        "treg": treg,
        "cls": numkit.conv2d(tcls.a, weights["hd.cls.w"]) + weights["hd.cls.b"],
        "obj": numkit.conv2d(treg.a, weights["hd.obj.w"]) + weights["hd.obj.b"],
        "reg": numkit.conv2d(treg.a, weights["hd.reg.w"]) + weights["hd.reg.b"],
    }


def head_level_backward(fwd: dict, stride: int, weights, graw: dict, grads: dict) -> None:
    """Accumulate head weight gradients for one level from raw-output grads."""
    gx_cls, gw, gb = conv2d_backward(fwd["tcls"].a, weights["hd.cls.w"], graw["cls"])
    grads["hd.cls.w"] += gw
    grads["hd.cls.b"] += gb
    gx_obj, gw, gb = conv2d_backward(fwd["treg"].a, weights["hd.obj.w"], graw["obj"])
    grads["hd.obj.w"] += gw
    grads["hd.obj.b"] += gb
    gx_reg, gw, gb = conv2d_backward(fwd["treg"].a, weights["hd.reg.w"], graw["reg"])
    grads["hd.reg.w"] += gw
    grads["hd.reg.b"] += gb

    g_stem, gw, gb = layer_backward(fwd["tcls"], weights["hd.tower_cls.w"], HEAD_GN_GROUPS, gx_cls)
    grads["hd.tower_cls.w"] += gw
    grads["hd.tower_cls.b"] += gb
    g2, gw, gb = layer_backward(fwd["treg"], weights["hd.tower_reg.w"], HEAD_GN_GROUPS, gx_obj + gx_reg)
    grads["hd.tower_reg.w"] += gw
    grads["hd.tower_reg.b"] += gb
    _, gw, gb = layer_backward(fwd["stem"], weights[f"hd.stem{stride}.w"], HEAD_GN_GROUPS, g_stem + g2)
    grads[f"hd.stem{stride}.w"] += gw
    grads[f"hd.stem{stride}.b"] += gb


# ---------------------------------------------------------------- samples


@dataclass
class TrainSample:
    """One frozen training pair; everything the trainable layers consume."""

    kind: str  # "single" or "multi"
    u_ref: np.ndarray
    u_cur: np.ndarray
    pyr_cur: FeaturePyramid
    gt_boxes_cur: list[tuple[float, float, float, float]]
    t_ref: np.ndarray | None = None  # (hw, 1) reference target map
    gt_cells_cur: np.ndarray | None = None  # (hw, 1) current target map
    ref_cells: list[int] = field(default_factory=list)
    cur_cells: list[int] = field(default_factory=list)
    match: GroundTruthMatch | None = None
    gt_mask_cur: np.ndarray | None = None  # full resolution, single only
    center_cur: tuple[float, float] | None = None


def _center_cell(box, w8: int) -> int:
    col = math.floor(box[0] / EMBED_STRIDE)
    row = math.floor(box[1] / EMBED_STRIDE)
    return row * w8 + col


def build_samples(seq: Sequence, model_weights, cfg: Config, kind: str) -> list[TrainSample]:
    """Precompute frozen tensors for every usable frame pair of a sequence.

    Single-object sequences pair the first frame with each later one;
    multi-object sequences pair adjacent frames.
    """
    if kind not in ("single", "multi"):
        raise ValueError(f"unknown sample kind {kind!r}")
    icfg = InteractionConfig.from_config(cfg)
    pyrs = [extract_pyramid(f, model_weights) for f in seq.frames]
    h8 = seq.spec.height // EMBED_STRIDE
    w8 = seq.spec.width // EMBED_STRIDE
    samples = []
    for t in range(1, len(seq.frames)):
        r = 0 if kind == "single" else t - 1
        ref_no, cur_no = r + 1, t + 1
        if not seq.boxes.get(ref_no) or not seq.boxes.get(cur_no):
            continue
        u_ref, u_cur = interact_core(
            pyrs[r].levels[16], pyrs[t].levels[16], icfg, model_weights
        )
        sample = TrainSample(
            kind=kind,
            u_ref=u_ref,
            u_cur=u_cur,
            pyr_cur=pyrs[t],
            gt_boxes_cur=[box for _, box in seq.boxes[cur_no]],
        )
        if kind == "single":
            box_ref = seq.boxes[ref_no][0][1]
            box_cur = seq.boxes[cur_no][0][1]
            sample.t_ref = target_map_from_box(box_ref, h8, w8).t
            sample.gt_cells_cur = target_map_from_box(box_cur, h8, w8).t
            sample.center_cur = (box_cur[0], box_cur[1])
            sample.gt_mask_cur = seq.masks[cur_no][0][1]
        else:
            ids_ref = [i for i, _ in seq.boxes[ref_no]]
            ids_cur = [i for i, _ in seq.boxes[cur_no]]
            sample.ref_cells = [_center_cell(b, w8) for _, b in seq.boxes[ref_no]]
            sample.cur_cells = [_center_cell(b, w8) for _, b in seq.boxes[cur_no]]
            sample.match = ground_truth_match(ids_cur, ids_ref)
        samples.append(sample)
    return samples


# ---------------------------------------------------------------- stage 1


def _embeddings(sample: TrainSample, weights):
    e_ref = embed_map(sample.u_ref, weights)
    e_cur = embed_map(sample.u_cur, weights)
    return e_ref, e_cur


def stage1_forward_backward(
    weights, sample: TrainSample, cfg: Config, w_box: float = 1.0, w_obj: float = 1.0
) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    """One joint correspondence + detection pass; returns losses and grads."""
    grads = {name: np.zeros_like(weights[name]) for name in STAGE1_TRAINABLE}
    tau = cfg.resolved_temperature()
    e_ref, e_cur = _embeddings(sample, weights)
    h8, w8, c = e_ref.h, e_ref.w, e_ref.c
    logits = numkit.matmul(e_cur.e, e_ref.e.T)

    prior = None
    if sample.kind == "single":
        probs = numkit.softmax_rows(logits, temperature=tau)
        t_prop = np.clip(probs @ sample.t_ref, 0.0, 1.0)
        corr = dice_loss(t_prop, sample.gt_cells_cur)
        gprobs = corr.grad.reshape(-1, 1) @ sample.t_ref.T
        glogits = softmax_rows_backward(probs, gprobs, tau)
        prior = make_target_prior(
            TargetMap(h=h8, w=w8, t=t_prop, binary=False), "sot"
        )
    else:
        sub = logits[np.ix_(sample.cur_cells, sample.ref_cells)]
        probs_sub = numkit.softmax_rows(sub, temperature=tau)
        corr = contrastive_ce_loss(InstanceCorrespondence(c=probs_sub), sample.match)
        glogits = np.zeros_like(logits)
        np.add.at(glogits, np.ix_(sample.cur_cells, sample.ref_cells), corr.grad / tau)
        prior = zero_prior("mot", h8, w8)

    ge_cur = glogits @ e_ref.e
    ge_ref = glogits.T @ e_cur.e
    for u, ge in ((sample.u_ref, ge_ref), (sample.u_cur, ge_cur)):
        _, gw, gb = conv2d_backward(u, weights["em.conv.w"], ge.reshape(h8, w8, c), pad=1)
        grads["em.conv.w"] += gw
        grads["em.conv.b"] += gb

    # the prior enters the head as a constant; detection gradients stop at it
    fused = fuse_pyramid(sample.pyr_cur, prior)
    caches = {s: head_level_forward(fl.f, s, weights) for s, fl in fused.items()}
    raws = {s: {k: caches[s][k] for k in ("obj", "cls", "reg")} for s in caches}
    det = detection_loss(
        raws, sample.gt_boxes_cur, num_classes=cfg.num_classes, w_box=w_box, w_obj=w_obj
    )
    graws = unflatten_raws(det.grad, raws)
    for s in raws:
        head_level_backward(caches[s], s, weights, graws[s], grads)

    losses = {"corr": corr.value, "det": det.value, "loss": corr.value + det.value}
    return losses, grads


# ---------------------------------------------------------------- stage 2


def _dynamic_forward(mask_feats: np.ndarray, center, theta: np.ndarray):
    """head.dynamic_mask_forward with caches kept for backprop."""
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
    h1 = np.maximum(x @ w1 + b1, 0.0)
    h2 = np.maximum(h1 @ w2 + b2, 0.0)
    out = (h2 @ w3 + b3).reshape(h8, w8)
    return out, (x, h1, h2, w1, w2, w3)


def _dynamic_backward(cache, gout2d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients wrt theta (packed) and wrt the mask features."""
    x, h1, h2, w1, w2, w3 = cache
    cm = MASK_CHANNELS
    g = gout2d.reshape(-1, 1)
    dw3 = h2.T @ g
    db3 = float(g.sum())
    gh2 = relu_backward(h2, g @ w3.T)
    dw2 = h1.T @ gh2
    db2 = gh2.sum(axis=0)
    gh1 = relu_backward(h1, gh2 @ w2.T)
    dw1 = x.T @ gh1
    db1 = gh1.sum(axis=0)
    gx = gh1 @ w1.T
    dtheta = np.concatenate(
        [dw1.ravel(), db1, dw2.ravel(), db2, dw3.ravel(), np.array([db3])]
    )
    h8w8 = gout2d.shape
    gfeats = gx[:, :cm].reshape(h8w8[0], h8w8[1], cm)
    return dtheta, gfeats


@dataclass
class Stage2Sample:
    fused8: np.ndarray
    tower_feat: np.ndarray  # regression tower vector at the target cell
    center: tuple[float, float]
    gt_mask: np.ndarray


def prepare_stage2(weights, samples: list[TrainSample], cfg: Config) -> list[Stage2Sample]:
    """Freeze the stage-1 pipeline into per-sample constants for stage 2."""
    tau = cfg.resolved_temperature()
    out = []
    for sample in samples:
        if sample.kind != "single" or sample.gt_mask_cur is None:
            continue
        e_ref, e_cur = _embeddings(sample, weights)
        probs = numkit.softmax_rows(numkit.matmul(e_cur.e, e_ref.e.T), temperature=tau)
        t_prop = np.clip(probs @ sample.t_ref, 0.0, 1.0)
        prior = make_target_prior(TargetMap(h=e_ref.h, w=e_ref.w, t=t_prop, binary=False), "sot")
        fused = fuse_pyramid(sample.pyr_cur, prior)
        fwd = head_level_forward(fused[EMBED_STRIDE].f, EMBED_STRIDE, weights)
        row = math.floor(sample.center_cur[1] / EMBED_STRIDE)
        col = math.floor(sample.center_cur[0] / EMBED_STRIDE)
        out.append(
            Stage2Sample(
                fused8=fused[EMBED_STRIDE].f,
                tower_feat=fwd["treg"].a[row, col].copy(),
                center=sample.center_cur,
                gt_mask=sample.gt_mask_cur,
            )
        )
    if not out:
        raise ValueError("stage 2 needs single-target samples with masks")
    return out


def stage2_forward_backward(
    weights, sample: Stage2Sample
) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    grads = {name: np.zeros_like(weights[name]) for name in STAGE2_TRAINABLE}
    mb = layer_forward(
        sample.fused8, weights["hd.maskbranch.w"], weights["hd.maskbranch.b"], MASK_GN_GROUPS
    )
    theta = sample.tower_feat @ weights["hd.ctrl.w"][0, 0] + weights["hd.ctrl.b"]
    logits8, cache = _dynamic_forward(mb.a, sample.center, theta)
    up = logits8[..., None]
    for _ in range(3):
        up = numkit.bilinear_upsample2x(up)
    loss = mask_loss(up[..., 0], sample.gt_mask)

    g = loss.grad.reshape(sample.gt_mask.shape)[..., None]
    for _ in range(3):
        g = upsample2x_backward(g)
    dtheta, gfeats = _dynamic_backward(cache, g[..., 0])
    grads["hd.ctrl.b"] += dtheta
    grads["hd.ctrl.w"][0, 0] += np.outer(sample.tower_feat, dtheta)
    _, gw, gb = layer_backward(mb, weights["hd.maskbranch.w"], MASK_GN_GROUPS, gfeats)
    grads["hd.maskbranch.w"] += gw
    grads["hd.maskbranch.b"] += gb
    return {"loss": loss.value}, grads


# ---------------------------------------------------------------- loops


@dataclass
class TrainRecord:
    step: int
    stage: int
    loss: float
    corr: float = 0.0
    det: float = 0.0


def _sgd_step(
    weights, grads, names, lr: float, clip: float, stage: int, step: int,
    velocity: dict[str, np.ndarray] | None = None, momentum: float = 0.0,
) -> None:
    """One clipped SGD update, optionally with heavy-ball momentum."""
    sq = 0.0
    for name in names:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(stage, step, f"gradient of {name} is not finite")
        sq += float(np.sum(g * g))
    scale = lr * min(1.0, clip / max(math.sqrt(sq), 1e-12))
    for name in names:
        step_dir = scale * grads[name]
        if velocity is not None:
            velocity[name] = momentum * velocity[name] + step_dir
            step_dir = velocity[name]
        weights[name] = weights[name] - step_dir


def train_stage1(
    weights,
    singles: list[TrainSample],
    multis: list[TrainSample],
    cfg: Config,
    steps: int,
    lr: float = 0.05,
    clip: float = 5.0,
    momentum: float = 0.9,
    w_box: float = 2.0,
    w_obj: float = 1.0,
    lr_final: float | None = None,
    average_tail: float = 0.0,
) -> tuple[dict, list[TrainRecord]]:
    """Alternate single-target and multi-object pairs, SGD on stage-1 weights.

    With lr_final set, the learning rate decays linearly from lr to
    lr_final across the run; late steps then polish the box regression
    instead of jittering around the optimum. average_tail > 0 returns the
    running mean of the trainable tensors over that final fraction of
    steps rather than the last iterate, which damps optimizer jitter.
    """
    if not singles or not multis:
        raise ValueError("stage 1 needs both single and multi samples")
    if not 0.0 <= average_tail <= 1.0:
        raise ValueError("average_tail must lie in [0, 1]")
    weights = {k: v.copy() for k, v in weights.items()}
    velocity = {name: np.zeros_like(weights[name]) for name in STAGE1_TRAINABLE}
    records = []
    tail_start = steps - max(1, int(round(average_tail * steps))) if average_tail > 0 else steps
    tail_sum = {}
    tail_n = 0
    for step in range(steps):
        pool = singles if step % 2 == 0 else multis
        sample = pool[(step // 2) % len(pool)]
        losses, grads = stage1_forward_backward(weights, sample, cfg, w_box=w_box, w_obj=w_obj)
        if not math.isfinite(losses["loss"]):
            raise TrainingDiverged(1, step, f"loss became {losses['loss']}")
        step_lr = lr
        if lr_final is not None and steps > 1:
            step_lr = lr + (lr_final - lr) * step / (steps - 1)
        _sgd_step(weights, grads, STAGE1_TRAINABLE, step_lr, clip, 1, step,
                  velocity=velocity, momentum=momentum)
        records.append(
            TrainRecord(step=step, stage=1, loss=losses["loss"], corr=losses["corr"], det=losses["det"])
        )
        if step >= tail_start:
            for name in STAGE1_TRAINABLE:
                if name in tail_sum:
                    tail_sum[name] += weights[name]
                else:
                    tail_sum[name] = weights[name].copy()
            tail_n += 1
    if tail_n:
        for name in STAGE1_TRAINABLE:
            weights[name] = tail_sum[name] / tail_n
    return weights, records


def train_stage2(
    weights,
    singles: list[TrainSample],
    cfg: Config,
    steps: int,
    lr: float = 0.05,
    clip: float = 5.0,
    momentum: float = 0.9,
) -> tuple[dict, list[TrainRecord]]:
    """Fit mask branch and controller only; every other tensor is untouched."""
    weights = {k: v.copy() for k, v in weights.items()}
    s2 = prepare_stage2(weights, singles, cfg)
    velocity = {name: np.zeros_like(weights[name]) for name in STAGE2_TRAINABLE}
    records = []
    for step in range(steps):
        sample = s2[step % len(s2)]
        losses, grads = stage2_forward_backward(weights, sample)
        if not math.isfinite(losses["loss"]):
            raise TrainingDiverged(2, step, f"loss became {losses['loss']}")
        _sgd_step(weights, grads, STAGE2_TRAINABLE, lr, clip, 2, step,
                  velocity=velocity, momentum=momentum)
        records.append(TrainRecord(step=step, stage=2, loss=losses["loss"]))
    return weights, records


def train_toy(
    seed: int = 0,
    cfg: Config | None = None,
    stage1_steps: int = 2000,
    stage2_steps: int = 400,
    lr: float = 0.05,
    num_frames: int = 8,
    size: int = 128,
    num_single_seqs: int = 10,
    num_multi_seqs: int = 8,
    size_range: tuple[float, float] = (24.0, 40.0),
) -> tuple[Model, list[TrainRecord]]:
    """Fresh weights, synthetic sequences, both stages. Fully seeded.

    The defaults are a tuned desk-scale recipe: objectness upweighted 6x
    against its 1/cells normalization, box term 2x, lr decayed to a tenth,
    and the final quarter of stage 1 Polyak-averaged.
    """
    cfg = cfg or Config()
    weights = init_weights(seed, cfg)
    singles = []
    multis = []
    for s in range(num_single_seqs):
        seq1 = standard_sequence(seed * 100 + 300 + s, num_objects=1, num_frames=num_frames,
                                 height=size, width=size, size_range=size_range)
        singles += build_samples(seq1, weights, cfg, "single")
    for s in range(num_multi_seqs):
        seqn = standard_sequence(seed * 100 + 350 + s, num_objects=2 + s % 2, num_frames=num_frames,
                                 height=size, width=size, size_range=size_range)
        multis += build_samples(seqn, weights, cfg, "multi")
    weights, rec1 = train_stage1(weights, singles, multis, cfg, stage1_steps, lr=lr,
                                 w_obj=6.0, w_box=2.0, lr_final=lr / 10.0, average_tail=0.25)
    weights, rec2 = train_stage2(weights, singles, cfg, stage2_steps, lr=lr)
    return Model(weights=weights, cfg=cfg), rec1 + rec2


def write_loss_csv(path: str, records: list[TrainRecord]) -> None:
    with open(path, "w") as f:
        f.write("step,stage,loss,corr,det\n")
        for r in records:
            f.write(f"{r.step},{r.stage},{r.loss:.6f},{r.corr:.6f},{r.det:.6f}\n")

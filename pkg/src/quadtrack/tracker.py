"""Online tracking on top of the shared embedding and head.

Single-target modes (sot, vos) cache the reference frame at init: its
stride-16 features, its embedding, and the reference target map. Every later
frame runs the backbone once, interacts with the cached reference features,
propagates the target map through the pixel correspondence, and lets the
head pick the highest-scoring box under that prior. Running several targets
on one frame reuses all shared work; only the prior-conditioned head repeats.

Multi-object modes (mot, mots) track by detection: a zero prior degenerates
the head to a plain detector, and detections are associated to tracks with a
cost mixing embedding cosine and box overlap, solved by the Hungarian
method, with a constant-velocity Kalman filter per track.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .backbone import (
    Embedding,
    InteractionConfig,
    check_weights,
    extract_pyramid,
    init_weights,
    interact,
)
from .config import Config
from .correspondence import (
    EMBED_STRIDE,
    MASK_TASKS,
    SINGLE_TARGET_TASKS,
    TargetMap,
    check_task,
    make_target_prior,
    pixel_correspondence,
    propagate,
    target_map_from_box,
    target_map_from_mask,
    zero_prior,
)
from .head import (
    Detection,
    HeadParams,
    InstanceMask,
    detect,
    fuse_pyramid,
    mask_head,
    pick_top1,
    prepare_mask_context,
)
from .metrics import box_iou_cxcywh

GATE_SENTINEL = 1e6


# ---------------------------------------------------------------- model


@dataclass
class Model:
    weights: dict[str, np.ndarray]
    cfg: Config

    def __post_init__(self):
        self.cfg.validate()
        check_weights(self.weights, self.cfg)

    def head_params(self) -> HeadParams:
        return HeadParams.from_config(self.weights, self.cfg)

    def interaction(self) -> InteractionConfig:
        return InteractionConfig.from_config(self.cfg)


def build_model(seed: int, cfg: Config | None = None) -> Model:
    cfg = cfg or Config()
    return Model(weights=init_weights(seed, cfg), cfg=cfg)


# ---------------------------------------------------------------- kalman

# constant-velocity state: (cx, cy, a, h, and their velocities), a = w/h


@dataclass
class Trajectory:
    track_id: int
    mean: np.ndarray
    cov: np.ndarray
    embedding: np.ndarray
    class_id: int = 1
    hits: int = 1
    misses: int = 0
    status: str = "tentative"


def _box_to_xyah(box) -> np.ndarray:
    cx, cy, w, h = (float(v) for v in box)
    if w <= 0 or h <= 0:
        raise ValueError("box sides must be positive")
    return np.array([cx, cy, w / h, h])


def _xyah_to_box(xyah) -> tuple[float, float, float, float]:
    cx, cy, a, h = (float(v) for v in xyah)
    return (cx, cy, a * h, h)


def kalman_init(box, cfg: Config) -> tuple[np.ndarray, np.ndarray]:
    z = _box_to_xyah(box)
    mean = np.concatenate([z, np.zeros(4)])
    wp, wv = cfg.kalman_pos_weight, cfg.kalman_vel_weight
    h = z[3]
    std = np.array(
        [2 * wp * h, 2 * wp * h, 1e-2, 2 * wp * h, 10 * wv * h, 10 * wv * h, 1e-5, 10 * wv * h]
    )
    return mean, np.diag(std**2)


def _motion_matrix() -> np.ndarray:
    f = np.eye(8)
    for i in range(4):
        f[i, i + 4] = 1.0
    return f


def _check_cov(cov: np.ndarray) -> None:
    if cov.shape != (8, 8):
        raise ValueError("covariance must be 8x8")
    if np.max(np.abs(cov - cov.T)) > 1e-8:
        raise ValueError("covariance must be symmetric")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance must be positive definite") from exc


def kalman_predict(traj: Trajectory, cfg: Config) -> tuple[float, float, float, float]:
    """Advance one step and return the predicted box."""
    _check_cov(traj.cov)
    wp, wv = cfg.kalman_pos_weight, cfg.kalman_vel_weight
    h = max(float(traj.mean[3]), 1e-6)
    std = np.array([wp * h, wp * h, 1e-2, wp * h, wv * h, wv * h, 1e-5, wv * h])
    f = _motion_matrix()
    traj.mean = f @ traj.mean
    traj.cov = f @ traj.cov @ f.T + np.diag(std**2)
    traj.cov = 0.5 * (traj.cov + traj.cov.T)
    return _xyah_to_box(traj.mean[:4])


def kalman_update(traj: Trajectory, box, cfg: Config) -> None:
    """Fold a measured box into the track (Joseph-form covariance update)."""
    _check_cov(traj.cov)
    z = _box_to_xyah(box)
    wp = cfg.kalman_pos_weight
    h = max(float(traj.mean[3]), 1e-6)
    r = np.diag(np.array([wp * h, wp * h, 1e-1, wp * h]) ** 2)
    p = traj.cov
    s = p[:4, :4] + r
    gain = np.linalg.solve(s.T, p[:, :4].T).T  # K = P H^T S^-1
    innovation = z - traj.mean[:4]
    traj.mean = traj.mean + gain @ innovation
    ikh = np.eye(8)
    ikh[:, :4] -= gain
    traj.cov = ikh @ p @ ikh.T + gain @ r @ gain.T
    traj.cov = 0.5 * (traj.cov + traj.cov.T)


def trajectory_box(traj: Trajectory) -> tuple[float, float, float, float]:
    return _xyah_to_box(traj.mean[:4])


# ---------------------------------------------------------------- cost


@dataclass
class AssociationCost:
    cost: np.ndarray
    gated: np.ndarray


def _unit_rows(e: np.ndarray, tol: float = 1e-6) -> None:
    if e.size and np.max(np.abs(np.linalg.norm(e, axis=1) - 1.0)) > tol:
        raise ValueError("embeddings must be unit-normalized")


def normalize_rows(e: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    return e / np.maximum(norms, 1e-12)


def build_cost(
    det_boxes,
    det_embeddings: np.ndarray,
    tracks: list[Trajectory],
    lambda_emb: float,
    gate_cosine: float = 0.3,
) -> AssociationCost:
    """Blend appearance and overlap: lambda*(1-cos) + (1-lambda)*(1-IoU).

    Pairs with no overlap and cosine below the gate are set to a large
    sentinel so the assignment never uses them.
    """
    if not 0.0 <= lambda_emb <= 1.0:
        raise ValueError("lambda_emb must lie in [0, 1]")
    n, m = len(det_boxes), len(tracks)
    _unit_rows(det_embeddings)
    cost = np.zeros((n, m))
    gated = np.zeros((n, m), dtype=bool)
    for j, traj in enumerate(tracks):
        tbox = trajectory_box(traj)
        for i in range(n):
            cos = float(det_embeddings[i] @ traj.embedding)
            iou = box_iou_cxcywh(det_boxes[i], tbox)
            if iou == 0.0 and cos < gate_cosine:
                cost[i, j] = GATE_SENTINEL
                gated[i, j] = True
            else:
                cost[i, j] = lambda_emb * (1.0 - cos) + (1.0 - lambda_emb) * (1.0 - iou)
    return AssociationCost(cost=cost, gated=gated)


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost assignment; sentinel-priced pairs are dropped."""
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return sorted(
        (int(r), int(c)) for r, c in zip(rows, cols) if cost[r, c] < GATE_SENTINEL / 2
    )


# ---------------------------------------------------------------- state


@dataclass
class SotTarget:
    t_ref: TargetMap
    last_box: tuple[float, float, float, float]
    last_score: float = 1.0
    last_mask: InstanceMask | None = None


@dataclass
class TrackResult:
    box: tuple[float, float, float, float]
    score: float
    mask: InstanceMask | None = None


@dataclass
class MotOutput:
    track_id: int
    det: Detection
    mask: InstanceMask | None = None


@dataclass
class TrackerState:
    task: str
    model: Model
    frame_index: int = 0
    counters: dict[str, int] = field(
        default_factory=lambda: {"backbone_runs": 0, "interact_runs": 0, "head_runs": 0}
    )
    # single-target side
    ref_f16: np.ndarray | None = None
    e_ref: Embedding | None = None
    targets: list[SotTarget] = field(default_factory=list)
    # multi-object side
    tracks: list[Trajectory] = field(default_factory=list)
    next_id: int = 1
    prev_f16: np.ndarray | None = None
    last_detections: list[Detection] = field(default_factory=list)


def _mask_to_instance(mask: np.ndarray) -> InstanceMask:
    data = mask.astype(np.uint8)
    return InstanceMask(h=data.shape[0], w=data.shape[1], data=data)


def _mask_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("cannot take a box from an empty mask")
    x1, x2 = float(xs.min()), float(xs.max() + 1)
    y1, y2 = float(ys.min()), float(ys.max() + 1)
    return ((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def _target_from(box, mask, h8: int, w8: int) -> tuple[TargetMap, tuple, InstanceMask | None]:
    if (box is None) == (mask is None):
        raise ValueError("provide exactly one of box or mask")
    if mask is not None:
        t_ref = target_map_from_mask(mask, h8, w8)
        return t_ref, _mask_box(mask), _mask_to_instance(mask)
    return target_map_from_box(box, h8, w8), tuple(float(v) for v in box), None


# ---------------------------------------------------------------- sot/vos


def init_sot(model: Model, frame: np.ndarray, box=None, mask=None, task: str = "sot") -> TrackerState:
    """Fix the reference: backbone features, embedding, and target map.

    The reference embedding is computed here once and never recomputed;
    later frames interact against the cached stride-16 reference features.
    """
    check_task(task)
    if task not in SINGLE_TARGET_TASKS:
        raise ValueError(f"init_sot serves single-target tasks, not {task!r}")
    state = TrackerState(task=task, model=model)
    pyr = extract_pyramid(frame, model.weights)
    state.counters["backbone_runs"] += 1
    f16 = pyr.levels[16]
    e_ref, _ = interact(f16, f16, model.interaction(), model.weights)
    state.counters["interact_runs"] += 1
    state.ref_f16 = f16
    state.e_ref = e_ref
    t_ref, start_box, start_mask = _target_from(box, mask, e_ref.h, e_ref.w)
    state.targets.append(SotTarget(t_ref=t_ref, last_box=start_box, last_mask=start_mask))
    return state


def add_target(state: TrackerState, box=None, mask=None) -> int:
    """Register another target on the already-fixed reference frame."""
    if state.e_ref is None:
        raise ValueError("state has no reference frame; call init_sot first")
    t_ref, start_box, start_mask = _target_from(box, mask, state.e_ref.h, state.e_ref.w)
    state.targets.append(SotTarget(t_ref=t_ref, last_box=start_box, last_mask=start_mask))
    return len(state.targets) - 1


def track_targets(state: TrackerState, frame: np.ndarray) -> list[TrackResult]:
    """Advance all targets one frame. Shared work runs once; the head runs
    once per target under that target's propagated prior."""
    if state.e_ref is None or state.ref_f16 is None:
        raise ValueError("tracker state is not initialized for single-target tracking")
    model = state.model
    state.frame_index += 1
    pyr = extract_pyramid(frame, model.weights)
    state.counters["backbone_runs"] += 1
    _, e_cur = interact(state.ref_f16, pyr.levels[16], model.interaction(), model.weights)
    state.counters["interact_runs"] += 1
    c_pix = pixel_correspondence(e_cur, state.e_ref, model.cfg.resolved_temperature())
    params = model.head_params()
    results = []
    for target in state.targets:
        t_prop = propagate(c_pix, target.t_ref)
        prior = make_target_prior(t_prop, state.task)
        fused = fuse_pyramid(pyr, prior)
        dets = detect(fused, params)
        state.counters["head_runs"] += 1
        if not dets:
            results.append(TrackResult(box=target.last_box, score=0.0, mask=target.last_mask))
            continue
        top = pick_top1(dets)
        mask = None
        if state.task in MASK_TASKS:
            ctx = prepare_mask_context(fused[EMBED_STRIDE], params)
            mask = mask_head(ctx, top, params)
        target.last_box = top.box
        target.last_score = top.score
        if mask is not None:
            target.last_mask = mask
        results.append(TrackResult(box=top.box, score=top.score, mask=mask))
    return results


def track_sot(state: TrackerState, frame: np.ndarray) -> TrackResult:
    return track_targets(state, frame)[0]


# ---------------------------------------------------------------- mot/mots


def init_mot(model: Model, task: str = "mot") -> TrackerState:
    check_task(task)
    if task in SINGLE_TARGET_TASKS:
        raise ValueError(f"init_mot serves multi-object tasks, not {task!r}")
    return TrackerState(task=task, model=model)


def step_mot(state: TrackerState, frame: np.ndarray) -> list[MotOutput]:
    """Detect, associate, and manage track lifecycle for one frame.

    Returns confirmed tracks matched in this frame. Unmatched detections
    scoring at least `spawn_threshold` open tentative tracks that confirm
    after `confirm_hits` consecutive hits; any track vanishes after
    `max_misses` consecutive misses. Low scorers may still extend existing
    tracks through association, they just never create new ones.
    """
    model = state.model
    cfg = model.cfg
    state.frame_index += 1
    pyr = extract_pyramid(frame, model.weights)
    state.counters["backbone_runs"] += 1
    f16 = pyr.levels[16]
    ref = state.prev_f16 if state.prev_f16 is not None else f16
    _, e_cur = interact(ref, f16, model.interaction(), model.weights)
    state.counters["interact_runs"] += 1
    state.prev_f16 = f16

    prior = zero_prior(state.task, e_cur.h, e_cur.w)
    fused = fuse_pyramid(pyr, prior)
    params = model.head_params()
    dets = detect(fused, params)
    state.counters["head_runs"] += 1
    state.last_detections = dets

    emb_rows = np.array(
        [e_cur.e[r * e_cur.w + c] for r, c in (d.emb_cell for d in dets)]
    ).reshape(len(dets), e_cur.c)
    embeddings = normalize_rows(emb_rows) if dets else emb_rows

    for traj in state.tracks:
        kalman_predict(traj, cfg)

    assoc = build_cost(
        [d.box for d in dets], embeddings, state.tracks, cfg.lambda_emb, cfg.gate_cosine
    )
    matches = hungarian(assoc.cost)
    matched_dets = {i for i, _ in matches}
    matched_tracks = {j for _, j in matches}

    outputs: list[MotOutput] = []
    mask_ctx = None
    for i, j in matches:
        traj = state.tracks[j]
        det = dets[i]
        kalman_update(traj, det.box, cfg)
        mom = cfg.embedding_momentum
        traj.embedding = normalize_rows(
            (mom * traj.embedding + (1.0 - mom) * embeddings[i]).reshape(1, -1)
        )[0]
        traj.hits += 1
        traj.misses = 0
        if traj.status == "tentative" and traj.hits >= cfg.confirm_hits:
            traj.status = "confirmed"
        elif traj.status == "lost":
            traj.status = "confirmed"
        if traj.status == "confirmed":
            mask = None
            if state.task in MASK_TASKS:
                if mask_ctx is None:
                    mask_ctx = prepare_mask_context(fused[EMBED_STRIDE], params)
                mask = mask_head(mask_ctx, det, params)
            outputs.append(MotOutput(track_id=traj.track_id, det=det, mask=mask))

    for j, traj in enumerate(state.tracks):
        if j not in matched_tracks:
            traj.misses += 1
            traj.hits = 0
            if traj.status == "confirmed":
                traj.status = "lost"
    state.tracks = [t for t in state.tracks if t.misses < cfg.max_misses]

    for i, det in enumerate(dets):
        if i in matched_dets or det.score < cfg.spawn_threshold:
            continue
        mean, cov = kalman_init(det.box, cfg)
        state.tracks.append(
            Trajectory(
                track_id=state.next_id,
                mean=mean,
                cov=cov,
                embedding=embeddings[i].copy(),
                class_id=det.class_id,
            )
        )
        state.next_id += 1

    return sorted(outputs, key=lambda o: o.track_id)

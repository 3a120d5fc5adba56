"""Fast invariant suite behind the ``selftest`` subcommand.

Each check re-derives one structural guarantee of the pipeline from
scratch: stochastic correspondence rows, the instance/pixel submatrix
identity, zero-prior pass-through, analytic gradients against finite
differences, assignment optimality, the hand-counted metric values, and
file round-trips. Checks are cheap (seconds, not minutes); the pytest
suite holds the exhaustive versions.
"""

from __future__ import annotations

import itertools
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .. import losses, metrics, numkit
from ..backbone import (
    LEVEL_CHANNELS,
    STRIDES,
    Embedding,
    FeaturePyramid,
    init_weights,
    load_weights,
    save_weights,
)
from ..config import Config
from ..correspondence import (
    EMBED_STRIDE,
    InstanceCorrespondence,
    TargetMap,
    extract_instance_embeddings,
    ground_truth_match,
    instance_correspondence,
    pixel_correspondence,
    pixel_logits,
    propagate,
    zero_prior,
)
from ..head import FusedFeature, HeadParams, detect, fuse_pyramid
from ..tracker import hungarian
from . import seqio
from .synth import generate_sequence, standard_sequence


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


def _random_embedding(rng, h: int, w: int, c: int = 8) -> Embedding:
    return Embedding(h=h, w=w, c=c, e=rng.standard_normal((h * w, c)))


def check_stochastic_rows(seed: int) -> None:
    rng = np.random.default_rng(seed)
    for _ in range(100):
        e_cur = _random_embedding(rng, 4, 4)
        e_ref = _random_embedding(rng, 4, 4)
        c = pixel_correspondence(e_cur, e_ref).c
        err = float(np.abs(c.sum(axis=1) - 1.0).max())
        if err > 1e-9:
            raise AssertionError(f"pixel row sum off by {err:.3e}")
        boxes = [(12.0, 12.0, 8.0, 8.0), (20.0, 20.0, 8.0, 8.0)]
        ci = instance_correspondence(
            extract_instance_embeddings(e_cur, boxes),
            extract_instance_embeddings(e_ref, boxes),
        ).c
        err = float(np.abs(ci.sum(axis=1) - 1.0).max())
        if err > 1e-9:
            raise AssertionError(f"instance row sum off by {err:.3e}")


def check_constant_map_propagation(seed: int) -> None:
    rng = np.random.default_rng(seed + 1)
    for _ in range(20):
        c = pixel_correspondence(_random_embedding(rng, 4, 4), _random_embedding(rng, 4, 4))
        for fill in (0.0, 1.0):
            t = TargetMap(h=4, w=4, t=np.full((16, 1), fill))
            out = propagate(c, t)
            if not np.array_equal(out.t, t.t):
                raise AssertionError(f"constant map {fill} not preserved bitwise")


def check_instance_submatrix(seed: int) -> None:
    rng = np.random.default_rng(seed + 2)
    for _ in range(20):
        e_cur = _random_embedding(rng, 4, 4)
        e_ref = _random_embedding(rng, 4, 4)
        boxes_cur = [(4.0, 4.0, 6.0, 6.0), (20.0, 12.0, 6.0, 6.0)]
        boxes_ref = [(12.0, 20.0, 6.0, 6.0), (28.0, 28.0, 6.0, 6.0), (4.0, 12.0, 6.0, 6.0)]
        inst = numkit.matmul(
            extract_instance_embeddings(e_cur, boxes_cur).e,
            extract_instance_embeddings(e_ref, boxes_ref).e.T,
        )
        full = pixel_logits(e_cur, e_ref)
        cells_cur = [int(b[1] // EMBED_STRIDE) * 4 + int(b[0] // EMBED_STRIDE) for b in boxes_cur]
        cells_ref = [int(b[1] // EMBED_STRIDE) * 4 + int(b[0] // EMBED_STRIDE) for b in boxes_ref]
        if not np.array_equal(inst, full[np.ix_(cells_cur, cells_ref)]):
            raise AssertionError("instance logits are not the indexed pixel logits")


def check_zero_prior_detection(seed: int) -> None:
    rng = np.random.default_rng(seed + 3)
    cfg = Config()
    params = HeadParams.from_config(init_weights(seed, cfg), cfg)
    for _ in range(10):
        levels = {s: rng.standard_normal((64 // s, 64 // s, LEVEL_CHANNELS[s])) for s in STRIDES}
        pyr = FeaturePyramid(levels=levels)
        plain = {s: FusedFeature(stride=s, f=levels[s].copy()) for s in STRIDES}
        fused = fuse_pyramid(pyr, zero_prior("mot", 8, 8))
        a = detect(fused, params)
        b = detect(plain, params)
        same = len(a) == len(b) and all(
            x.box == y.box and x.score == y.score and x.cell == y.cell
            for x, y in zip(a, b)
        )
        if not same:
            raise AssertionError("zero prior changed the detections")


def check_loss_gradients(seed: int) -> None:
    rng = np.random.default_rng(seed + 4)
    gt = (rng.random(12) > 0.5).astype(float)
    worst = losses.finite_diff_check(
        lambda x: losses.dice_loss(x, gt), rng.uniform(0.05, 0.95, size=12)
    )
    if worst > 1e-4:
        raise AssertionError(f"dice gradient off by {worst:.3e}")

    g = ground_truth_match([1, 2, 9], [2, 1, 3])

    def ce(x):
        probs = numkit.softmax_rows(x.reshape(3, 3))
        return losses.contrastive_ce_loss(InstanceCorrespondence(c=probs), g)

    worst = losses.finite_diff_check(ce, rng.normal(scale=1.5, size=9))
    if worst > 1e-4:
        raise AssertionError(f"contrastive gradient off by {worst:.3e}")

    template = {
        8: {"obj": np.zeros((2, 2, 1)), "cls": np.zeros((2, 2, 1)), "reg": np.zeros((2, 2, 4))}
    }
    gt_boxes = [(4.2, 4.2, 7.0, 7.0)]

    def det(x):
        return losses.detection_loss(losses.unflatten_raws(x, template), gt_boxes, num_classes=1)

    x0 = rng.normal(scale=1.5, size=2 * 2 * 6)
    if not losses.detection_loss(losses.unflatten_raws(x0, template), gt_boxes, num_classes=1).grad[
        4:
    ].any():
        raise AssertionError("detection check lost its positive cell")
    worst = losses.finite_diff_check(det, x0)
    if worst > 1e-4:
        raise AssertionError(f"detection gradient off by {worst:.3e}")

    gt_mask = np.zeros((4, 4))
    gt_mask[1:3, 1:3] = 1.0

    def msk(x):
        res = losses.mask_loss(x.reshape(4, 4), gt_mask)
        return losses.LossResult(value=res.value, grad=res.grad.ravel())

    worst = losses.finite_diff_check(msk, rng.normal(scale=1.5, size=16))
    if worst > 1e-4:
        raise AssertionError(f"mask gradient off by {worst:.3e}")


def check_assignment_optimality(seed: int) -> None:
    rng = np.random.default_rng(seed + 5)
    for _ in range(30):
        n = int(rng.integers(1, 6))
        cost = rng.random((n, n))
        got = sum(cost[i, j] for i, j in hungarian(cost))
        best = min(
            sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))
        )
        if abs(got - best) > 1e-12:
            raise AssertionError(f"assignment cost {got} exceeds optimum {best}")


def check_metric_oracles(seed: int) -> None:
    del seed
    # two stationary objects over three frames: FP=1, FN=1, IDS=1 of 6 GT
    a = (10.0, 10.0, 10.0, 10.0)
    b = (50.0, 50.0, 10.0, 10.0)
    gt = {1: [(1, a), (2, b)], 2: [(1, a), (2, b)], 3: [(1, a), (2, b)]}
    pred = {
        1: [(101, a), (102, b)],
        2: [(101, a), (103, b), (104, (80.0, 80.0, 10.0, 10.0))],
        3: [(101, a)],
    }
    mota = metrics.mot_clear(pred, gt).metrics["mota"]
    if abs(mota - 0.5) > 1e-9:
        raise AssertionError(f"hand-counted MOTA is {mota}, expected 0.5")

    # constant IoU 0.5: thresholds 0.00 .. 0.50 succeed, 11 of 21
    boxes = [(0.0, 0.0, 4.0, 4.0)] * 5
    half = [(0.0, 0.0, 2.0, 4.0)] * 5
    auc = metrics.sot_success_auc(half, boxes).metrics["auc"]
    if abs(auc - 11.0 / 21.0) > 1e-9:
        raise AssertionError(f"constant-0.5-IoU AUC is {auc}, expected 11/21")

    # exact mask then a 60 of 100 pixel subset: (1.0 + 0.6) / 2 = 0.8
    full = np.zeros((20, 20), dtype=bool)
    full[5:15, 5:15] = True
    sub = np.zeros((20, 20), dtype=bool)
    sub[5:15, 5:11] = True
    sm = metrics.mots_smotsa(
        {1: [(9, full)], 2: [(9, sub)]}, {1: [(1, full)], 2: [(1, full)]}
    ).metrics["smotsa"]
    if abs(sm - 0.8) > 1e-9:
        raise AssertionError(f"hand-counted sMOTSA is {sm}, expected 0.8")


def check_file_round_trips(seed: int) -> None:
    rng = np.random.default_rng(seed + 6)
    for _ in range(20):
        mask = (rng.random((6, 7)) < 0.4).astype(np.uint8)
        if not np.array_equal(seqio.decode_rle(seqio.encode_rle(mask)), mask):
            raise AssertionError("run-length round trip changed a mask")
    with tempfile.TemporaryDirectory() as tmp:
        rows = {1: [(1, (3.25, 4.5, 10.0, 6.0), 0.9)], 2: [(2, (1.0, 2.0, 3.0, 4.0), 1.0)]}
        path = os.path.join(tmp, "boxes.csv")
        seqio.write_box_csv(path, rows)
        back = seqio.read_box_csv(path)
        for frame in rows:
            for (ia, ba, ca), (ib, bb, cb) in zip(rows[frame], back[frame]):
                if ia != ib or any(abs(x - y) > 0.005 for x, y in zip(ba, bb)):
                    raise AssertionError("box csv round trip drifted past 2 decimals")
                if abs(ca - cb) > 0.005:
                    raise AssertionError("confidence round trip drifted")
        wpath = os.path.join(tmp, "weights.bin")
        weights = init_weights(seed, Config())
        save_weights(weights, wpath)
        back_w, _ = load_weights(wpath)
        for name in weights:
            if not np.array_equal(weights[name], back_w[name]):
                raise AssertionError(f"weight tensor {name} not bit-exact after reload")


def check_synthetic_determinism(seed: int) -> None:
    a = standard_sequence(seed=seed, num_objects=2, num_frames=5, height=64, width=64)
    b = generate_sequence(a.spec)
    if not all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames)):
        raise AssertionError("same spec produced different frames")
    if a.boxes != b.boxes:
        raise AssertionError("same spec produced different ground truth")


CHECKS = (
    ("correspondence rows are stochastic", check_stochastic_rows),
    ("constant maps propagate bitwise", check_constant_map_propagation),
    ("instance logits index the pixel logits", check_instance_submatrix),
    ("zero prior leaves detection unchanged", check_zero_prior_detection),
    ("loss gradients match finite differences", check_loss_gradients),
    ("assignment matches brute force", check_assignment_optimality),
    ("metric values match hand counts", check_metric_oracles),
    ("file formats round-trip", check_file_round_trips),
    ("synthetic sequences are seed-deterministic", check_synthetic_determinism),
)


def run_selftest(seed: int = 0) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        try:
            fn(seed)
        except Exception as exc:  # noqa: BLE001 - a failing check must not stop the rest
            results.append(CheckResult(name=name, ok=False, detail=str(exc)))
        else:
            results.append(CheckResult(name=name, ok=True))
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        lines.append(f"PASS {r.name}" if r.ok else f"FAIL {r.name}: {r.detail}")
    passed = sum(r.ok for r in results)
    lines.append(f"{passed}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"

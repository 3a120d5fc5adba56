"""Release gate: every check this package promises, with hard numbers.

Each test enforces one promised property at its stated tolerance and
runtime budget, and records a single PASS/FAIL line with the measured
values; the conftest prints those lines as a summary section at the end
of the run. The three training checks share one model, trained once per
module with the default toy recipe.
"""

import itertools
import time

import numpy as np
import pytest

from quadtrack import losses, numkit, tracker
from quadtrack.backbone import LEVEL_CHANNELS, STRIDES, Embedding, FeaturePyramid, init_weights
from quadtrack.config import Config
from quadtrack.correspondence import (
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
from quadtrack.harness import cli
from quadtrack.harness.synth import standard_sequence
from quadtrack.harness.train import STAGE2_TRAINABLE, build_samples, train_stage2, train_toy
from quadtrack.head import FusedFeature, HeadParams, detect, fuse_pyramid
from quadtrack.metrics import cxcywh_to_tlwh, mot_clear, mots_smotsa, sot_success_auc, vos_jf
from quadtrack.tracker import Model, hungarian


def _random_embedding(r, h=4, w=4, c=8) -> Embedding:
    return Embedding(h=h, w=w, c=c, e=r.standard_normal((h * w, c)))


def _random_boxes(r, n, extent=32.0):
    return [
        (
            float(r.uniform(0.0, extent - 0.01)),
            float(r.uniform(0.0, extent - 0.01)),
            float(r.uniform(4.0, 16.0)),
            float(r.uniform(4.0, 16.0)),
        )
        for _ in range(n)
    ]


# ------------------------------------------------------- correspondence


def test_correspondence_rows_stochastic_and_constants_preserved(verdict):
    t0 = time.perf_counter()
    r = np.random.default_rng(11)
    worst = 0.0
    constants_ok = True
    zeros = TargetMap(h=4, w=4, t=np.zeros((16, 1)))
    ones = TargetMap(h=4, w=4, t=np.ones((16, 1)))
    for _ in range(1000):
        e_cur = _random_embedding(r)
        e_ref = _random_embedding(r)
        c_pix = pixel_correspondence(e_cur, e_ref)
        worst = max(worst, float(np.max(np.abs(c_pix.c.sum(axis=1) - 1.0))))
        c_inst = instance_correspondence(
            extract_instance_embeddings(e_cur, _random_boxes(r, 3)),
            extract_instance_embeddings(e_ref, _random_boxes(r, 4)),
        )
        worst = max(worst, float(np.max(np.abs(c_inst.c.sum(axis=1) - 1.0))))
        constants_ok = constants_ok and np.array_equal(propagate(c_pix, zeros).t, zeros.t)
        constants_ok = constants_ok and np.array_equal(propagate(c_pix, ones).t, ones.t)
    elapsed = time.perf_counter() - t0
    verdict(
        worst <= 1e-9 and constants_ok and elapsed < 5.0,
        "correspondence rows sum to 1 on 1000 random embeddings "
        f"(worst |sum-1| {worst:.2e} <= 1e-9) and constant maps propagate "
        f"bitwise ({elapsed:.1f}s < 5s)",
    )


def test_instance_logits_are_submatrix_of_pixel_logits(verdict):
    t0 = time.perf_counter()
    r = np.random.default_rng(22)
    bitwise = True
    for _ in range(100):
        e_cur = _random_embedding(r)
        e_ref = _random_embedding(r)
        full = pixel_logits(e_cur, e_ref)
        inst_cur = extract_instance_embeddings(e_cur, _random_boxes(r, int(r.integers(1, 6))))
        inst_ref = extract_instance_embeddings(e_ref, _random_boxes(r, int(r.integers(1, 6))))
        sub = numkit.matmul(inst_cur.e, inst_ref.e.T)
        rows = [i * e_cur.w + j for i, j in inst_cur.cells]
        cols = [i * e_ref.w + j for i, j in inst_ref.cells]
        bitwise = bitwise and np.array_equal(sub, full[np.ix_(rows, cols)])
    elapsed = time.perf_counter() - t0
    verdict(
        bitwise and elapsed < 5.0,
        "instance logits equal the indexed pixel logits bitwise on 100 "
        f"random 4x4 grids ({elapsed:.1f}s < 5s)",
    )


def test_zero_prior_leaves_detection_unchanged(verdict):
    t0 = time.perf_counter()
    cfg = Config()
    params = HeadParams.from_config(init_weights(42, cfg), cfg)
    r = np.random.default_rng(33)
    identical = True
    total_dets = 0
    for _ in range(100):
        levels = {s: r.standard_normal((64 // s, 64 // s, LEVEL_CHANNELS[s])) for s in STRIDES}
        fused = fuse_pyramid(FeaturePyramid(levels=levels), zero_prior("mot", 8, 8))
        plain = {s: FusedFeature(stride=s, f=levels[s].copy()) for s in STRIDES}
        da = detect(fused, params)
        db = detect(plain, params)
        identical = identical and len(da) == len(db)
        if identical:
            for x, y in zip(da, db):
                if x.box != y.box or x.score != y.score or x.cell != y.cell:
                    identical = False
                    break
        total_dets += len(da)
    elapsed = time.perf_counter() - t0
    verdict(
        identical and total_dets > 0 and elapsed < 10.0,
        "fusing a zero prior reproduces plain-feature detections bitwise on "
        f"100 random feature sets ({total_dets} detections, {elapsed:.1f}s < 10s)",
    )


# ---------------------------------------------------------------- losses


def _dice_case(seed):
    r = np.random.default_rng(1000 + seed)
    g = (r.random(12) > 0.5).astype(float)
    if not g.any():
        g[0] = 1.0
    return (lambda x: losses.dice_loss(x, g)), r.uniform(0.05, 0.95, size=12)


def _ce_case(seed):
    g = ground_truth_match([1, 2, 9], [2, 1, 3])

    def fn(x):
        probs = numkit.softmax_rows(x.reshape(3, 3))
        return losses.contrastive_ce_loss(InstanceCorrespondence(c=probs), g)

    return fn, np.random.default_rng(2000 + seed).normal(scale=1.5, size=9)


def _det_template(r):
    return {
        s: {
            "obj": r.normal(scale=1.5, size=(32 // s, 32 // s, 1)),
            "cls": r.normal(scale=1.5, size=(32 // s, 32 // s, 2)),
            "reg": r.normal(scale=1.5, size=(32 // s, 32 // s, 4)),
        }
        for s in (8, 16)
    }


def _det_case(seed):
    template = _det_template(np.random.default_rng(0))
    gt_boxes = [(12.0, 10.0, 10.0, 12.0), (24.0, 26.0, 8.0, 8.0)]

    def fn(x):
        return losses.detection_loss(
            losses.unflatten_raws(x, template), gt_boxes, [1, 2], num_classes=2
        )

    return fn, losses.flatten_raws(_det_template(np.random.default_rng(3000 + seed)))


def _mask_case(seed):
    gt = np.zeros((4, 4))
    gt[1:3, 1:3] = 1.0

    def fn(x):
        res = losses.mask_loss(x.reshape(4, 4), gt)
        return losses.LossResult(value=res.value, grad=res.grad.ravel())

    return fn, np.random.default_rng(4000 + seed).normal(scale=1.5, size=16)


def _fd_points(case, n_points=100):
    """Run the central-difference check on fresh random inputs until at
    least n_points coordinates with live gradient have been verified."""
    worst = 0.0
    checked = 0
    seed = 0
    while checked < n_points:
        fn, x0 = case(seed)
        grad = np.asarray(fn(x0).grad).ravel()
        checked += int(np.sum(np.abs(grad) > 1e-8))
        worst = max(worst, losses.finite_diff_check(fn, x0))
        seed += 1
    return worst, checked


def test_loss_gradients_match_central_differences(verdict):
    t0 = time.perf_counter()
    results = {
        name: _fd_points(case)
        for name, case in (
            ("dice", _dice_case),
            ("ce", _ce_case),
            ("detection", _det_case),
            ("mask", _mask_case),
        )
    }
    elapsed = time.perf_counter() - t0
    detail = ", ".join(
        f"{name} {worst:.1e} over {n} points" for name, (worst, n) in results.items()
    )
    verdict(
        all(worst < 1e-4 for worst, _ in results.values()) and elapsed < 30.0,
        f"loss gradients match central differences within rel 1e-4 ({detail}; "
        f"{elapsed:.1f}s < 30s)",
    )


# ------------------------------------------------------------ assignment


def test_assignment_matches_brute_force_exactly(verdict):
    t0 = time.perf_counter()
    r = np.random.default_rng(300)
    exact = True
    for _ in range(200):
        n = int(r.integers(1, 8))
        cost = r.random((n, n))
        pairs = sorted(hungarian(cost))
        got = sum(cost[i, j] for i, j in pairs)
        best = min(
            sum(cost[i, p[i]] for i in range(n))
            for p in itertools.permutations(range(n))
        )
        exact = exact and got == best
        exact = exact and sorted(j for _, j in pairs) == list(range(n))
    elapsed = time.perf_counter() - t0
    verdict(
        exact and elapsed < 10.0,
        "assignment equals brute-force enumeration on 200 random matrices "
        f"up to 7x7, exactly ({elapsed:.1f}s < 10s)",
    )


# --------------------------------------------------------------- metrics


def test_metric_hand_oracles_exact(verdict):
    a = (10.0, 10.0, 10.0, 10.0)
    b = (50.0, 50.0, 10.0, 10.0)
    gt = {1: [(1, a), (2, b)], 2: [(1, a), (2, b)], 3: [(1, a), (2, b)]}
    pred = {
        1: [(101, a), (102, b)],
        2: [(101, a), (103, b), (104, (80.0, 80.0, 10.0, 10.0))],
        3: [(101, a)],
    }
    mota = mot_clear(pred, gt).metrics["mota"]

    boxes = [(0.0, 0.0, 4.0, 4.0)] * 5
    half = [(0.0, 0.0, 2.0, 4.0)] * 5
    auc = sot_success_auc(half, boxes).metrics["auc"]

    full = np.zeros((20, 20), dtype=bool)
    full[5:15, 5:15] = True
    sub = np.zeros((20, 20), dtype=bool)
    sub[5:15, 5:11] = True
    smotsa = mots_smotsa(
        {1: [(9, full)], 2: [(9, sub)]}, {1: [(1, full)], 2: [(1, full)]}
    ).metrics["smotsa"]

    ok = (
        abs(mota - 0.5) <= 1e-9
        and abs(auc - 11.0 / 21.0) <= 1e-9
        and abs(smotsa - 0.8) <= 1e-9
    )
    verdict(
        ok,
        f"hand-counted metrics exact to 1e-9 (MOTA {mota} vs 0.5, "
        f"AUC {auc:.12f} vs 11/21, sMOTSA {smotsa} vs 0.8)",
    )


# -------------------------------------------------------------- training

EVAL_CANVAS = 128
EVAL_SIZES = (24.0, 40.0)


@pytest.fixture(scope="module")
def toy_run():
    t0 = time.perf_counter()
    model, records = train_toy(seed=0)
    return model, records, time.perf_counter() - t0


def _eval_sot(model, seed):
    seq = standard_sequence(seed, num_objects=1, num_frames=30, height=EVAL_CANVAS,
                            width=EVAL_CANVAS, size_range=EVAL_SIZES)
    state = tracker.init_sot(model, seq.frames[0], box=seq.boxes[1][0][1])
    preds, gts = [], []
    for t in range(1, len(seq.frames)):
        res = tracker.track_sot(state, seq.frames[t])
        preds.append(cxcywh_to_tlwh(res.box))
        gts.append(cxcywh_to_tlwh(seq.boxes[t + 1][0][1]))
    rep = sot_success_auc(preds, gts)
    return rep.metrics["mean_iou"], rep.metrics["auc"]


def _eval_mot(model, seed):
    seq = standard_sequence(seed, num_objects=2, num_frames=30, height=EVAL_CANVAS,
                            width=EVAL_CANVAS, size_range=EVAL_SIZES)
    state = tracker.init_mot(model)
    pred_frames, gt_frames = {}, {}
    for t in range(len(seq.frames)):
        outs = tracker.step_mot(state, seq.frames[t])
        gt_frames[t + 1] = [(oid, cxcywh_to_tlwh(bx)) for oid, bx in seq.boxes[t + 1]]
        pred_frames[t + 1] = [(o.track_id, cxcywh_to_tlwh(o.det.box)) for o in outs]
    return mot_clear(pred_frames, gt_frames).metrics


def _eval_vos(model, seed):
    seq = standard_sequence(seed, num_objects=1, num_frames=15, height=EVAL_CANVAS,
                            width=EVAL_CANVAS, size_range=EVAL_SIZES)
    state = tracker.init_sot(model, seq.frames[0], mask=seq.masks[1][0][1].astype(bool),
                             task="vos")
    preds, gts = [], []
    for t in range(1, len(seq.frames)):
        res = tracker.track_sot(state, seq.frames[t])
        gt_m = dict(seq.masks[t + 1])[1].astype(bool)
        preds.append(res.mask.data.astype(bool) if res.mask is not None else np.zeros_like(gt_m))
        gts.append(gt_m)
    return vos_jf(preds, gts).metrics["j"]


def test_toy_training_gives_usable_sot_tracker(toy_run, verdict):
    model, records, train_s = toy_run
    stage1_steps = sum(1 for r in records if r.stage == 1)
    mean_iou, auc = _eval_sot(model, seed=999)
    verdict(
        stage1_steps <= 2000 and train_s < 600.0 and mean_iou >= 0.5 and auc >= 0.5,
        f"toy-trained SOT on a held-out 30-frame sequence: mean IoU {mean_iou:.3f} "
        f">= 0.5 and AUC {auc:.3f} >= 0.5 ({stage1_steps} stage-1 steps, "
        f"trained in {train_s:.0f}s < 600s)",
    )


def test_toy_training_gives_usable_mot_tracker(toy_run, verdict):
    model, _, _ = toy_run
    t0 = time.perf_counter()
    m = _eval_mot(model, seed=1234)
    elapsed = time.perf_counter() - t0
    verdict(
        m["mota"] >= 0.9 and m["ids"] == 0 and elapsed < 120.0,
        f"toy-trained MOT on a held-out 2-object 30-frame sequence: MOTA "
        f"{m['mota']:.3f} >= 0.9 and IDS {m['ids']:.0f} == 0 "
        f"(FP {m['fp']:.0f}, FN {m['fn']:.0f}, {elapsed:.0f}s < 120s)",
    )


def test_stage2_fits_masks_and_freezes_everything_else(toy_run, verdict):
    model, records, _ = toy_run
    s2 = [r for r in records if r.stage == 2]
    drop = 1.0 - s2[-1].loss / s2[0].loss
    j = _eval_vos(model, seed=777)

    # run a few more mask-fitting steps on the trained weights and prove
    # bit for bit that nothing outside the mask branch moves
    seq = standard_sequence(4242, num_objects=1, num_frames=4, height=64, width=64,
                            size_range=(14.0, 20.0))
    singles = build_samples(seq, model.weights, model.cfg, "single")
    more, _ = train_stage2(model.weights, singles, model.cfg, steps=5)
    frozen = all(
        more[k].tobytes() == model.weights[k].tobytes()
        for k in model.weights
        if k not in STAGE2_TRAINABLE
    )
    touched = any(more[k].tobytes() != model.weights[k].tobytes() for k in STAGE2_TRAINABLE)
    verdict(
        drop >= 0.5 and j >= 0.6 and frozen and touched,
        f"stage 2 drops the mask loss {100 * drop:.0f}% >= 50% "
        f"({s2[0].loss:.4f} -> {s2[-1].loss:.4f}), held-out J {j:.3f} >= 0.6, "
        "and leaves non-mask weights bitwise unchanged",
    )


# ---------------------------------------------------------- determinism


def _run_pipeline(root):
    root.mkdir()
    spec = root / "spec.txt"
    spec.write_text(
        "seed = 5\nnum_objects = 2\nnum_frames = 5\nheight = 64\nwidth = 64\n"
        "size_min = 14\nsize_max = 18\n"
    )
    seq = root / "seq"
    assert cli.main(["simulate", "--spec", str(spec), "--out", str(seq)]) == 0
    assert cli.main(["selftest", "--out", str(root / "selftest.txt")]) == 0
    toy = root / "toy"
    assert cli.main([
        "train-toy", "--out", str(toy), "--seed", "3", "--steps", "6",
        "--stage2-steps", "2", "--frames", "4", "--size", "64",
        "--singles", "1", "--multis", "1", "--size-min", "14", "--size-max", "18",
    ]) == 0
    for task in ("sot", "mot", "vos", "mots"):
        res = root / f"res_{task}"
        assert cli.main([
            "track", "--task", task, "--seq", str(seq),
            "--weights", str(toy / "weights.qtw"), "--out", str(res),
        ]) == 0
        assert cli.main([
            "eval", "--task", task, "--seq", str(seq), "--results", str(res),
            "--out", str(root / f"rep_{task}"), "--deterministic",
        ]) == 0


def _tree_bytes(root):
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def test_pipeline_artifacts_are_byte_identical_across_runs(tmp_path, verdict):
    _run_pipeline(tmp_path / "a")
    _run_pipeline(tmp_path / "b")
    a = _tree_bytes(tmp_path / "a")
    b = _tree_bytes(tmp_path / "b")
    same_names = sorted(a) == sorted(b)
    differing = [k for k in a if same_names and a[k] != b[k]]
    pngs = sum(1 for k in a if k.endswith(".png"))
    verdict(
        same_names and not differing and len(a) > 20 and pngs >= 4,
        f"two seeded selftest+pipeline runs produced {len(a)} byte-identical "
        f"artifacts including {pngs} rendered figures"
        + ("" if not differing else f" (differs: {differing[:5]})"),
    )

"""Command line driver: simulate, track, eval, train-toy, selftest.

Exit codes: 0 on success, 1 on an internal failure (the message names the
offending path or value), 2 on unknown arguments (argparse usage error).
Artifacts are byte-stable for fixed seeds; the one timestamp field in the
evaluation report is suppressed by --deterministic.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

from ..backbone import load_weights, save_weights
from ..config import Config, load_config, save_config
from ..tracker import Model, init_mot, init_sot, step_mot, track_sot
from . import seqio
from .report import write_report, write_training_artifacts
from .selftest import format_results, run_selftest
from .synth import OcclusionWindow, standard_sequence
from .train import train_toy

TASKS = ("sot", "mot", "vos", "mots")

SPEC_FIELDS = {
    "seed": (int, 0),
    "num_objects": (int, 1),
    "num_frames": (int, 30),
    "height": (int, 96),
    "width": (int, 96),
    "jitter": (float, 0.1),
    "size_min": (float, 16.0),
    "size_max": (float, 28.0),
    "occlude_obj": (int, None),   # 0-based object index
    "occlude_start": (int, None),  # 0-based frame, inclusive
    "occlude_end": (int, None),    # exclusive
}


def read_sequence_spec(path: str) -> dict:
    """Flat key = value sequence spec; unknown keys are rejected."""
    values = {k: d for k, (_, d) in SPEC_FIELDS.items()}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path} line {lineno}: expected key = value")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in SPEC_FIELDS:
                raise ValueError(f"{path} line {lineno}: unknown key {key!r}")
            try:
                values[key] = SPEC_FIELDS[key][0](val.strip())
            except ValueError as exc:
                raise ValueError(f"{path} line {lineno}: {exc}") from exc
    occ_keys = ("occlude_obj", "occlude_start", "occlude_end")
    given = [k for k in occ_keys if values[k] is not None]
    if given and len(given) != len(occ_keys):
        raise ValueError(f"{path}: occlusion needs all of {', '.join(occ_keys)}")
    return values


def _timestamp(deterministic: bool) -> str | None:
    if deterministic:
        return None
    return time.strftime("%Y-%m-%dT%H:%M:%S")


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    spec = read_sequence_spec(args.spec)
    occlusions = None
    if spec["occlude_obj"] is not None:
        occlusions = [
            OcclusionWindow(
                obj=spec["occlude_obj"], start=spec["occlude_start"], end=spec["occlude_end"]
            )
        ]
    seq = standard_sequence(
        seed=spec["seed"],
        num_objects=spec["num_objects"],
        num_frames=spec["num_frames"],
        height=spec["height"],
        width=spec["width"],
        jitter=spec["jitter"],
        occlusions=occlusions,
        size_range=(spec["size_min"], spec["size_max"]),
    )
    seqio.write_sequence(seq, args.out)
    print(f"wrote {spec['num_frames']} frames, {spec['num_objects']} objects to {args.out}")
    return 0


def _load_model(weights_path: str, config_path: str | None) -> Model:
    if not os.path.isfile(weights_path):
        raise ValueError(f"weights file {weights_path} does not exist")
    weights, _ = load_weights(weights_path)
    cfg = load_config(config_path) if config_path else Config()
    return Model(weights=weights, cfg=cfg)


def _first_frame_target(loaded: seqio.LoadedSequence):
    if 1 not in loaded.boxes or not loaded.boxes[1]:
        raise ValueError("sequence has no ground-truth box on frame 1 to start from")
    obj_id, box, _ = sorted(loaded.boxes[1], key=lambda r: r[0])[0]
    mask = None
    for mid, m in loaded.masks.get(1, []):
        if mid == obj_id:
            mask = m
    return obj_id, seqio.cxcywh(box), mask


def cmd_track(args) -> int:
    model = _load_model(args.weights, args.config)
    loaded = seqio.read_sequence(args.seq)
    frames = loaded.frames
    boxes: dict[int, list] = {}
    masks: dict[int, list] = {}

    if args.task in ("sot", "vos"):
        obj_id, box0, mask0 = _first_frame_target(loaded)
        if args.task == "vos" and mask0 is not None:
            state = init_sot(model, frames[0], mask=mask0, task=args.task)
        else:
            state = init_sot(model, frames[0], box=box0, task=args.task)
        boxes[1] = [(obj_id, seqio.tlwh(state.targets[0].last_box), 1.0)]
        if args.task == "vos" and state.targets[0].last_mask is not None:
            masks[1] = [(obj_id, state.targets[0].last_mask.data)]
        for t, frame in enumerate(frames[1:], start=2):
            res = track_sot(state, frame)
            boxes[t] = [(obj_id, seqio.tlwh(res.box), res.score)]
            if args.task == "vos" and res.mask is not None:
                masks[t] = [(obj_id, res.mask.data)]
    else:
        state = init_mot(model, task=args.task)
        for t, frame in enumerate(frames, start=1):
            outs = step_mot(state, frame)
            boxes[t] = [(o.track_id, seqio.tlwh(o.det.box), o.det.score) for o in outs]
            if args.task == "mots":
                masks[t] = [(o.track_id, o.mask.data) for o in outs if o.mask is not None]

    os.makedirs(args.out, exist_ok=True)
    seqio.write_box_csv(os.path.join(args.out, "results.csv"), boxes)
    if masks:
        seqio.write_masks(os.path.join(args.out, "masks"), masks)
    n = sum(len(v) for v in boxes.values())
    print(f"tracked {len(frames)} frames ({args.task}), {n} result rows in {args.out}")
    return 0


def _pred_gt_boxes(loaded, pred, frame) -> tuple[list, list]:
    gt_row = {i: b for i, b, _ in loaded.boxes.get(frame, [])}
    pred_row = {i: b for i, b, _ in pred.get(frame, [])}
    return pred_row, gt_row


def cmd_eval(args) -> int:
    from .. import metrics

    loaded = seqio.read_sequence(args.seq)
    results_csv = os.path.join(args.results, "results.csv")
    if not os.path.isfile(results_csv):
        raise ValueError(f"results file {results_csv} does not exist")
    pred = seqio.read_box_csv(results_csv)
    num_frames = len(loaded.frames)

    if args.task == "sot":
        if 1 not in loaded.boxes or not loaded.boxes[1]:
            raise ValueError("ground truth has no frame-1 box to define the target")
        target_id = min(i for i, _, _ in loaded.boxes[1])
        pred_list, gt_list = [], []
        for t in range(2, num_frames + 1):  # frame 1 is the given reference
            pred_row, gt_row = _pred_gt_boxes(loaded, pred, t)
            if target_id not in gt_row:
                continue
            if target_id not in pred_row:
                raise ValueError(f"results are missing the target on frame {t}")
            pred_list.append(pred_row[target_id])
            gt_list.append(gt_row[target_id])
        report = metrics.sot_success_auc(pred_list, gt_list)
    elif args.task == "vos":
        pred_masks_dir = os.path.join(args.results, "masks")
        if not os.path.isdir(pred_masks_dir):
            raise ValueError(f"mask directory {pred_masks_dir} does not exist")
        pred_masks = seqio.read_masks(pred_masks_dir)
        if 1 not in loaded.masks or not loaded.masks[1]:
            raise ValueError("ground truth has no frame-1 mask to define the target")
        target_id = min(i for i, _ in loaded.masks[1])
        pred_list, gt_list = [], []
        for t in range(2, num_frames + 1):
            gt_row = {i: m for i, m in loaded.masks.get(t, [])}
            if target_id not in gt_row:
                continue
            pred_row = {i: m for i, m in pred_masks.get(t, [])}
            if target_id not in pred_row:
                raise ValueError(f"results are missing the target mask on frame {t}")
            pred_list.append(pred_row[target_id].astype(bool))
            gt_list.append(gt_row[target_id].astype(bool))
        report = metrics.vos_jf(pred_list, gt_list)
    elif args.task == "mot":
        gt_frames = {t: [(i, b) for i, b, _ in rows] for t, rows in loaded.boxes.items()}
        pred_frames = {t: [(i, b) for i, b, _ in rows] for t, rows in pred.items()}
        report = metrics.mot_clear(pred_frames, gt_frames)
    else:  # mots
        pred_masks_dir = os.path.join(args.results, "masks")
        if not os.path.isdir(pred_masks_dir):
            raise ValueError(f"mask directory {pred_masks_dir} does not exist")
        pred_masks = seqio.read_masks(pred_masks_dir)
        gt_frames = {
            t: [(i, m.astype(bool)) for i, m in rows] for t, rows in loaded.masks.items()
        }
        pred_frames = {
            t: [(i, m.astype(bool)) for i, m in rows] for t, rows in pred_masks.items()
        }
        report = metrics.mots_smotsa(pred_frames, gt_frames)

    written = write_report(report, args.out, timestamp=_timestamp(args.deterministic))
    headline = " ".join(f"{k}={report.metrics[k]:.4f}" for k in sorted(report.metrics))
    print(f"{args.task}: {headline}")
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def cmd_train_toy(args) -> int:
    model, records = train_toy(
        seed=args.seed,
        stage1_steps=args.steps,
        stage2_steps=args.stage2_steps,
        lr=args.lr,
        num_frames=args.frames,
        size=args.size,
        num_single_seqs=args.singles,
        num_multi_seqs=args.multis,
        size_range=(args.size_min, args.size_max),
    )
    os.makedirs(args.out, exist_ok=True)
    weights_path = os.path.join(args.out, "weights.qtw")
    save_weights(
        model.weights,
        weights_path,
        meta={"seed": args.seed, "stage1_steps": args.steps, "stage2_steps": args.stage2_steps},
    )
    save_config(model.cfg, os.path.join(args.out, "config.txt"))
    write_training_artifacts(records, args.out)
    s1 = [r.loss for r in records if r.stage == 1]
    s2 = [r.loss for r in records if r.stage == 2]
    print(f"stage 1: {len(s1)} steps, loss {s1[0]:.4f} -> {s1[-1]:.4f}")
    if s2:
        print(f"stage 2: {len(s2)} steps, loss {s2[0]:.4f} -> {s2[-1]:.4f}")
    print(f"wrote weights to {weights_path}")
    return 0


def cmd_selftest(args) -> int:
    results = run_selftest(seed=args.seed)
    text = format_results(results)
    print(text, end="")
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w") as f:
            f.write(text)
    return 0 if all(r.ok for r in results) else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quadtrack",
        description="Unified detector-tracker on synthetic sequences.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a synthetic sequence directory from a spec file")
    p.add_argument("--spec", required=True, help="key = value sequence spec")
    p.add_argument("--out", required=True, help="sequence directory to create")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("track", help="run the tracker over a sequence directory")
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--seq", required=True, help="sequence directory (from simulate)")
    p.add_argument("--weights", required=True, help="weight file (from train-toy)")
    p.add_argument("--config", default=None, help="optional config key = value file")
    p.add_argument("--out", required=True, help="results directory to create")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score results against ground truth, with figures")
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--seq", required=True, help="sequence directory with ground truth")
    p.add_argument("--results", required=True, help="results directory (from track)")
    p.add_argument("--out", required=True, help="report directory to create")
    p.add_argument("--deterministic", action="store_true",
                   help="omit the timestamp so reruns are byte-identical")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train-toy", help="train fresh weights on synthetic sequences")
    p.add_argument("--out", required=True, help="output directory for weights and loss trace")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=2000, help="stage-1 steps")
    p.add_argument("--stage2-steps", type=int, default=400)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--frames", type=int, default=8, help="frames per training sequence")
    p.add_argument("--size", type=int, default=128, help="training canvas side")
    p.add_argument("--singles", type=int, default=10, help="single-object sequences")
    p.add_argument("--multis", type=int, default=8, help="multi-object sequences")
    p.add_argument("--size-min", type=float, default=24.0, help="smallest object side")
    p.add_argument("--size-max", type=float, default=40.0, help="largest object side")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("selftest", help="run the invariant suite, print PASS/FAIL lines")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="also write the lines to this file")
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - the contract is exit 1 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Rendered evaluation artifacts: delimited tables plus figures.

Every writer here is deterministic: the same report produces the same
bytes. A timestamp appears in the text report only when the caller passes
one, so reproducible runs simply pass None and get stable files.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from ..metrics import MetricReport  # noqa: E402
from .train import TrainRecord, write_loss_csv  # noqa: E402

FIGURE_DPI = 110
PNG_METADATA = {"Software": None}  # drop the library banner from the PNG header


def report_text(report: MetricReport, timestamp: str | None = None) -> str:
    text = report.to_text()
    if timestamp:
        text += f"generated = {timestamp}\n"
    return text


def per_frame_table(report: MetricReport) -> str:
    """One row per frame from every ``*_per_frame`` curve, comma-delimited.

    The frame column comes from the ``frames`` curve when the metric
    recorded one, else it counts from 1.
    """
    series = {k[: -len("_per_frame")]: v for k, v in report.curves.items()
              if k.endswith("_per_frame")}
    if not series:
        return "frame\n"
    names = sorted(series)
    length = len(series[names[0]])
    for name in names:
        if len(series[name]) != length:
            raise ValueError(f"curve {name!r} length differs from the others")
    frames = report.curves.get("frames", [i + 1 for i in range(length)])
    lines = ["frame," + ",".join(names)]
    for i in range(length):
        vals = ",".join(f"{series[n][i]:.6f}" for n in names)
        lines.append(f"{int(frames[i])},{vals}")
    return "\n".join(lines) + "\n"


def save_figure(fig, path: str) -> None:
    fig.savefig(path, format="png", dpi=FIGURE_DPI, metadata=PNG_METADATA)
    plt.close(fig)


def success_curve_figure(report: MetricReport):
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.plot(report.curves["success_thresholds"], report.curves["success"],
            marker="o", markersize=3, color="tab:blue")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    ax.set_title(f"Success curve (AUC {report.metrics['auc']:.3f})")
    fig.tight_layout()
    return fig


def overlap_per_frame_figure(report: MetricReport):
    ious = report.curves["iou_per_frame"]
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.plot(range(1, len(ious) + 1), ious, color="tab:green")
    ax.axhline(0.5, color="gray", linestyle="--", linewidth=1)
    ax.set_xlabel("frame")
    ax.set_ylabel("IoU")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    ax.set_title(f"Overlap per frame (mean {report.metrics['mean_iou']:.3f})")
    fig.tight_layout()
    return fig


def region_per_frame_figure(report: MetricReport):
    js = report.curves["j_per_frame"]
    fs = report.curves["f_per_frame"]
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    frames = range(1, len(js) + 1)
    ax.plot(frames, js, color="tab:blue", label="J (region)")
    ax.plot(frames, fs, color="tab:orange", label="F (boundary)")
    ax.set_xlabel("frame")
    ax.set_ylabel("similarity")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower left")
    ax.set_title(f"Mask quality (J&F {report.metrics['jf']:.3f})")
    fig.tight_layout()
    return fig


def error_counts_figure(report: MetricReport):
    frames = report.curves["frames"]
    fp = report.curves["fp_per_frame"]
    fn = report.curves["fn_per_frame"]
    ids = report.curves["ids_per_frame"]
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.bar(frames, fp, color="tab:red", label="FP")
    ax.bar(frames, fn, bottom=fp, color="tab:orange", label="FN")
    bottom = [a + b for a, b in zip(fp, fn)]
    ax.bar(frames, ids, bottom=bottom, color="tab:purple", label="ID switch")
    ax.set_xlabel("frame")
    ax.set_ylabel("errors")
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend(loc="upper right")
    headline = "mota" if "mota" in report.metrics else "smotsa"
    ax.set_title(f"Tracking errors ({headline.upper()} {report.metrics[headline]:.3f})")
    fig.tight_layout()
    return fig


_FIGURES = {
    "sot": (("success_curve.png", success_curve_figure),
            ("iou_per_frame.png", overlap_per_frame_figure)),
    "vos": (("jf_per_frame.png", region_per_frame_figure),),
    "mot": (("error_counts.png", error_counts_figure),),
    "mots": (("error_counts.png", error_counts_figure),),
}


def write_report(report: MetricReport, outdir: str, timestamp: str | None = None) -> list[str]:
    """report.txt + report.json + per_frame.csv + the task's figures."""
    if report.task not in _FIGURES:
        raise ValueError(f"no report layout for task {report.task!r}")
    os.makedirs(outdir, exist_ok=True)
    written = []

    def emit(name: str, text: str) -> None:
        path = os.path.join(outdir, name)
        with open(path, "w") as f:
            f.write(text)
        written.append(path)

    emit("report.txt", report_text(report, timestamp))
    emit("report.json", report.to_json())
    emit("per_frame.csv", per_frame_table(report))
    for name, builder in _FIGURES[report.task]:
        path = os.path.join(outdir, name)
        save_figure(builder(report), path)
        written.append(path)
    return written


def loss_curve_figure(records: list[TrainRecord]):
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for stage, color in ((1, "tab:blue"), (2, "tab:orange")):
        steps = [r.step for r in records if r.stage == stage]
        losses = [r.loss for r in records if r.stage == stage]
        if steps:
            ax.plot(steps, losses, color=color, label=f"stage {stage}")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="upper right")
    ax.set_title("Training loss")
    fig.tight_layout()
    return fig


def write_training_artifacts(records: list[TrainRecord], outdir: str) -> list[str]:
    os.makedirs(outdir, exist_ok=True)
    csv_path = os.path.join(outdir, "loss.csv")
    write_loss_csv(csv_path, records)
    fig_path = os.path.join(outdir, "loss_curve.png")
    save_figure(loss_curve_figure(records), fig_path)
    return [csv_path, fig_path]

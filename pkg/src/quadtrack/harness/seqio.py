"""On-disk sequence layout and the file formats it uses.

A sequence directory holds:

    meta.txt            key = value (height, width, num_frames)
    frames/000001.npy   one (h, w, 3) float array per frame, 1-based
    gt.csv              frame,id,x,y,w,h,conf,class,visibility
    masks/000001_001.rle    run-length masks, frame then object id

Box CSV rows are top-left (x, y, w, h) with two decimals, sorted by
(frame, id). Run-length masks store "h w" on the first line and the runs
on the second, always starting with the count of leading zeros (which may
be 0). Tracker results reuse the same formats, so ground truth and
predictions read back through one code path.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .synth import Sequence

MOT_FIELDS = 9


# ---------------------------------------------------------------- rle


def encode_rle(mask: np.ndarray) -> str:
    """Row-major run lengths, zero run first. A 2x2 zero mask is "4"."""
    if mask.ndim != 2:
        raise ValueError("mask must be 2-d")
    flat = np.asarray(mask).reshape(-1)
    if not np.isin(flat, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    counts = []
    value = 0
    run = 0
    for v in flat:
        if v == value:
            run += 1
        else:
            counts.append(run)
            value = 1 - value
            run = 1
    counts.append(run)
    return f"{mask.shape[0]} {mask.shape[1]}\n" + " ".join(str(c) for c in counts)


def decode_rle(text: str) -> np.ndarray:
    lines = text.strip().split("\n")
    if len(lines) != 2:
        raise ValueError("run-length text must have a size line and a counts line")
    try:
        h, w = (int(v) for v in lines[0].split())
    except ValueError as exc:
        raise ValueError(f"bad size line {lines[0]!r}") from exc
    counts = [int(v) for v in lines[1].split()]
    if any(c < 0 for c in counts):
        raise ValueError("run lengths must be nonnegative")
    if any(c == 0 for c in counts[1:]):
        raise ValueError("only the leading zero run may be empty")
    if sum(counts) != h * w:
        raise ValueError(f"run lengths sum to {sum(counts)}, expected {h * w}")
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    value = 0
    for c in counts:
        flat[pos : pos + c] = value
        pos += c
        value = 1 - value
    return flat.reshape(h, w)


# ---------------------------------------------------------------- boxes


def tlwh(box) -> tuple[float, float, float, float]:
    cx, cy, w, h = box
    return (cx - w / 2, cy - h / 2, w, h)


def cxcywh(box) -> tuple[float, float, float, float]:
    x, y, w, h = box
    return (x + w / 2, y + h / 2, w, h)


def write_box_csv(path: str, rows: dict[int, list[tuple[int, tuple, float]]]) -> None:
    """rows: frame -> [(id, tlwh box, conf)]; class and visibility are 1."""
    out = []
    for frame in sorted(rows):
        for obj_id, box, conf in sorted(rows[frame], key=lambda r: r[0]):
            x, y, w, h = box
            out.append(
                f"{frame},{obj_id},{x:.2f},{y:.2f},{w:.2f},{h:.2f},{conf:.2f},1,1.0"
            )
    with open(path, "w") as f:
        f.write("\n".join(out) + ("\n" if out else ""))


def read_box_csv(path: str) -> dict[int, list[tuple[int, tuple, float]]]:
    rows: dict[int, list] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != MOT_FIELDS:
                raise ValueError(
                    f"{path} line {lineno}: expected {MOT_FIELDS} fields, got {len(parts)}"
                )
            try:
                frame = int(parts[0])
                obj_id = int(parts[1])
                x, y, w, h, conf = (float(v) for v in parts[2:7])
            except ValueError as exc:
                raise ValueError(f"{path} line {lineno}: {exc}") from exc
            rows.setdefault(frame, []).append((obj_id, (x, y, w, h), conf))
    return rows


# ---------------------------------------------------------------- frames


def frame_name(frame: int) -> str:
    return f"{frame:06d}.npy"


def mask_name(frame: int, obj_id: int) -> str:
    return f"{frame:06d}_{obj_id:03d}.rle"


def write_frames(dirpath: str, frames: list[np.ndarray]) -> None:
    os.makedirs(dirpath, exist_ok=True)
    for t, frame in enumerate(frames, start=1):
        np.save(os.path.join(dirpath, frame_name(t)), frame)


def read_frames(dirpath: str) -> list[np.ndarray]:
    names = sorted(n for n in os.listdir(dirpath) if n.endswith(".npy"))
    if not names:
        raise ValueError(f"no frames under {dirpath}")
    return [np.load(os.path.join(dirpath, n)) for n in names]


def write_masks(dirpath: str, masks: dict[int, list[tuple[int, np.ndarray]]]) -> None:
    os.makedirs(dirpath, exist_ok=True)
    for frame in sorted(masks):
        for obj_id, mask in masks[frame]:
            with open(os.path.join(dirpath, mask_name(frame, obj_id)), "w") as f:
                f.write(encode_rle(mask) + "\n")


def read_masks(dirpath: str) -> dict[int, list[tuple[int, np.ndarray]]]:
    masks: dict[int, list] = {}
    for name in sorted(os.listdir(dirpath)):
        if not name.endswith(".rle"):
            continue
        stem = name[: -len(".rle")]
        try:
            frame_s, id_s = stem.split("_")
            frame, obj_id = int(frame_s), int(id_s)
        except ValueError as exc:
            raise ValueError(f"mask file {name!r} is not frame_id.rle") from exc
        with open(os.path.join(dirpath, name)) as f:
            masks.setdefault(frame, []).append((obj_id, decode_rle(f.read())))
    return masks


# ---------------------------------------------------------------- meta


def write_meta(path: str, meta: dict[str, int]) -> None:
    with open(path, "w") as f:
        for key in sorted(meta):
            f.write(f"{key} = {meta[key]}\n")


def read_meta(path: str) -> dict[str, int]:
    meta = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path} line {lineno}: expected key = value")
            key, _, value = line.partition("=")
            meta[key.strip()] = int(value.strip())
    return meta


# ---------------------------------------------------------------- dirs


@dataclass
class LoadedSequence:
    meta: dict[str, int]
    frames: list[np.ndarray]
    boxes: dict[int, list[tuple[int, tuple, float]]]
    masks: dict[int, list[tuple[int, np.ndarray]]]


def write_sequence(seq: Sequence, root: str, with_masks: bool = True) -> None:
    os.makedirs(root, exist_ok=True)
    write_meta(
        os.path.join(root, "meta.txt"),
        {"height": seq.spec.height, "width": seq.spec.width, "num_frames": seq.spec.num_frames},
    )
    write_frames(os.path.join(root, "frames"), seq.frames)
    gt = {
        frame: [(obj_id, tlwh(box), 1.0) for obj_id, box in pairs]
        for frame, pairs in seq.boxes.items()
    }
    write_box_csv(os.path.join(root, "gt.csv"), gt)
    if with_masks:
        write_masks(os.path.join(root, "masks"), seq.masks)


def read_sequence(root: str) -> LoadedSequence:
    meta = read_meta(os.path.join(root, "meta.txt"))
    frames = read_frames(os.path.join(root, "frames"))
    boxes = read_box_csv(os.path.join(root, "gt.csv"))
    masks_dir = os.path.join(root, "masks")
    masks = read_masks(masks_dir) if os.path.isdir(masks_dir) else {}
    return LoadedSequence(meta=meta, frames=frames, boxes=boxes, masks=masks)

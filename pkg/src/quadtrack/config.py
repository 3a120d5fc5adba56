"""Pipeline configuration.

A single flat dataclass holds every tunable the pipeline reads: interaction
layout, head thresholds, association weights, track lifecycle limits. It
round-trips through a plain ``key = value`` text file so experiment configs
stay diffable. Unknown keys and malformed values are rejected with the
offending key named.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path


@dataclass
class Config:
    # interaction / embedding
    interaction_mode: str = "deformable"  # deformable | full | none
    attention_heads: int = 2
    sample_points: int = 4
    embed_channels: int = 16
    # 0.0 means "auto": 1/sqrt(embed_channels)
    temperature: float = 0.0

    # head
    num_classes: int = 1
    score_threshold: float = 0.30
    nms_iou_threshold: float = 0.65
    mask_threshold: float = 0.5

    # association
    lambda_emb: float = 0.7
    gate_cosine: float = 0.3
    embedding_momentum: float = 0.9
    confirm_hits: int = 2
    max_misses: int = 5
    # unmatched detections below this score never open a new track
    spawn_threshold: float = 0.7

    # kalman noise scale, relative to box height
    kalman_pos_weight: float = 0.05
    kalman_vel_weight: float = 0.00625

    def resolved_temperature(self) -> float:
        if self.temperature > 0.0:
            return self.temperature
        return 1.0 / math.sqrt(self.embed_channels)

    def validate(self) -> None:
        if self.interaction_mode not in ("deformable", "full", "none"):
            raise ValueError(f"unknown interaction_mode: {self.interaction_mode!r}")
        if self.attention_heads < 1:
            raise ValueError("attention_heads must be >= 1")
        if self.sample_points < 1:
            raise ValueError("sample_points must be >= 1")
        if self.embed_channels < 1:
            raise ValueError("embed_channels must be >= 1")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("score_threshold must lie in [0, 1]")
        if not 0.0 < self.nms_iou_threshold <= 1.0:
            raise ValueError("nms_iou_threshold must lie in (0, 1]")
        if not 0.0 <= self.lambda_emb <= 1.0:
            raise ValueError("lambda_emb must lie in [0, 1]")
        if self.confirm_hits < 1:
            raise ValueError("confirm_hits must be >= 1")
        if self.max_misses < 1:
            raise ValueError("max_misses must be >= 1")
        if not 0.0 <= self.spawn_threshold <= 1.0:
            raise ValueError("spawn_threshold must lie in [0, 1]")


def parse_config_text(text: str) -> Config:
    """Parse ``key = value`` lines into a Config.

    Blank lines and ``#`` comments are skipped. Keys must match Config
    fields; values are coerced to the field's declared type.
    """
    fields = {f.name: f for f in dataclasses.fields(Config)}
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in fields:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        ftype = fields[key].type
        try:
            if ftype == "int":
                values[key] = int(val)
            elif ftype == "float":
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: bad value for {key!r}: {val!r}") from exc
    cfg = Config(**values)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> Config:
    return parse_config_text(Path(path).read_text())


def save_config(cfg: Config, path: str | Path) -> None:
    lines = []
    for f in dataclasses.fields(cfg):
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    Path(path).write_text("\n".join(lines) + "\n")

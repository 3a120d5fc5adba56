"""Seeded synthetic sequences with exact ground truth.

Objects are flat-colored rectangles and ellipses moving at constant
velocity plus a small uniform jitter, bouncing off the frame walls so the
whole box stays visible. Ground-truth boxes are the continuous object
states; masks are rasterized by pixel-center coverage, later objects
drawn on top. An occlusion window hides an object completely: it is
neither rendered nor reported for those frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SHAPES = ("rectangle", "ellipse")
BACKGROUND = 0.08
PALETTE = (
    (0.90, 0.30, 0.25),
    (0.25, 0.60, 0.95),
    (0.35, 0.85, 0.40),
    (0.95, 0.80, 0.25),
    (0.75, 0.35, 0.90),
    (0.30, 0.85, 0.85),
)


@dataclass
class ObjectSpec:
    shape: str
    size: tuple[float, float]
    color: tuple[float, float, float]
    start: tuple[float, float]
    velocity: tuple[float, float]

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}, expected one of {SHAPES}")
        if self.size[0] <= 0 or self.size[1] <= 0:
            raise ValueError("object size must be positive")


@dataclass
class OcclusionWindow:
    obj: int  # 0-based index into the object list
    start: int
    end: int  # exclusive

    def covers(self, frame: int) -> bool:
        return self.start <= frame < self.end


@dataclass
class SequenceSpec:
    height: int
    width: int
    num_frames: int
    objects: list[ObjectSpec]
    seed: int = 0
    jitter: float = 0.1
    occlusions: list[OcclusionWindow] = field(default_factory=list)

    def validate(self) -> None:
        if self.height <= 0 or self.width <= 0:
            raise ValueError("frame size must be positive")
        if self.height % 32 or self.width % 32:
            raise ValueError("frame sides must be multiples of 32")
        if self.num_frames <= 0:
            raise ValueError("num_frames must be positive")
        if not self.objects:
            raise ValueError("a sequence needs at least one object")
        if self.jitter < 0:
            raise ValueError("jitter must be nonnegative")
        for i, obj in enumerate(self.objects):
            w, h = obj.size
            if w >= self.width or h >= self.height:
                raise ValueError(f"object {i} does not fit in the frame")
            cx, cy = obj.start
            if not (w / 2 <= cx <= self.width - w / 2 and h / 2 <= cy <= self.height - h / 2):
                raise ValueError(f"object {i} starts partly outside the frame")
        for occ in self.occlusions:
            if not 0 <= occ.obj < len(self.objects):
                raise ValueError(f"occlusion names object {occ.obj}, which does not exist")
            if not 0 <= occ.start < occ.end <= self.num_frames:
                raise ValueError("occlusion window must satisfy 0 <= start < end <= num_frames")


@dataclass
class Sequence:
    """Frames plus ground truth keyed by 1-based frame number.

    boxes[frame] is a list of (object_id, (cx, cy, w, h)) with float
    coordinates; masks[frame] pairs the same ids with (h, w) uint8 arrays.
    Object ids are 1-based positions in the spec. Hidden objects have no
    entry at all for that frame.
    """

    spec: SequenceSpec
    frames: list[np.ndarray]
    boxes: dict[int, list[tuple[int, tuple[float, float, float, float]]]]
    masks: dict[int, list[tuple[int, np.ndarray]]]


def rasterize_box(box, h: int, w: int) -> np.ndarray:
    """Pixels whose centers fall inside the (cx, cy, w, h) box."""
    cx, cy, bw, bh = box
    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5
    inside_y = (ys >= cy - bh / 2) & (ys <= cy + bh / 2)
    inside_x = (xs >= cx - bw / 2) & (xs <= cx + bw / 2)
    return (inside_y[:, None] & inside_x[None, :]).astype(np.uint8)


def rasterize_ellipse(box, h: int, w: int) -> np.ndarray:
    """Pixels whose centers fall inside the ellipse inscribed in the box."""
    cx, cy, bw, bh = box
    ys = (np.arange(h) + 0.5 - cy) / (bh / 2)
    xs = (np.arange(w) + 0.5 - cx) / (bw / 2)
    return ((ys[:, None] ** 2 + xs[None, :] ** 2) <= 1.0).astype(np.uint8)


def _silhouette(obj: ObjectSpec, pos, h: int, w: int) -> np.ndarray:
    box = (pos[0], pos[1], obj.size[0], obj.size[1])
    if obj.shape == "rectangle":
        return rasterize_box(box, h, w)
    return rasterize_ellipse(box, h, w)


def _bounce(p: float, half: float, limit: float) -> tuple[float, int]:
    """Reflect p into [half, limit - half]; returns (position, sign flip)."""
    lo, hi = half, limit - half
    flips = 1
    for _ in range(16):
        if p < lo:
            p = 2 * lo - p
            flips = -flips
        elif p > hi:
            p = 2 * hi - p
            flips = -flips
        else:
            return p, flips
    raise ValueError("object cannot be reflected into the frame")


def generate_sequence(spec: SequenceSpec) -> Sequence:
    """Run the motion model and render every frame.

    Deterministic per seed: the same spec always yields identical frames
    and ground truth.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    pos = [np.array(o.start, dtype=np.float64) for o in spec.objects]
    vel = [np.array(o.velocity, dtype=np.float64) for o in spec.objects]

    frames = []
    boxes: dict[int, list] = {}
    masks: dict[int, list] = {}
    for t in range(spec.num_frames):
        frame_no = t + 1
        hidden = {occ.obj for occ in spec.occlusions if occ.covers(t)}
        silhouettes = {}
        for i, obj in enumerate(spec.objects):
            if i not in hidden:
                silhouettes[i] = _silhouette(obj, pos[i], h, w)

        img = np.full((h, w, 3), BACKGROUND)
        for i in sorted(silhouettes):
            color = np.array(spec.objects[i].color)
            img[silhouettes[i].astype(bool)] = color
        frames.append(img)

        boxes[frame_no] = []
        masks[frame_no] = []
        covered = np.zeros((h, w), dtype=bool)
        for i in sorted(silhouettes, reverse=True):  # later objects on top
            visible = silhouettes[i] & ~covered
            covered |= silhouettes[i].astype(bool)
            obj = spec.objects[i]
            box = (float(pos[i][0]), float(pos[i][1]), obj.size[0], obj.size[1])
            boxes[frame_no].append((i + 1, box))
            masks[frame_no].append((i + 1, visible.astype(np.uint8)))
        boxes[frame_no].sort()
        masks[frame_no].sort(key=lambda pair: pair[0])

        for i, obj in enumerate(spec.objects):
            step = vel[i] + rng.uniform(-spec.jitter, spec.jitter, size=2)
            nxt = pos[i] + step
            nxt[0], fx = _bounce(nxt[0], obj.size[0] / 2, w)
            nxt[1], fy = _bounce(nxt[1], obj.size[1] / 2, h)
            vel[i] = vel[i] * np.array([fx, fy], dtype=np.float64)
            pos[i] = nxt

    return Sequence(spec=spec, frames=frames, boxes=boxes, masks=masks)


def place_objects(
    rng: np.random.Generator,
    count: int,
    height: int,
    width: int,
    size_range: tuple[float, float] = (16.0, 28.0),
    speed: float = 1.5,
    max_tries: int = 200,
) -> list[ObjectSpec]:
    """Sample non-overlapping starting objects; rejection-sampled placement."""
    if count > len(PALETTE):
        raise ValueError(f"at most {len(PALETTE)} objects are supported")
    objs: list[ObjectSpec] = []
    for i in range(count):
        for attempt in range(max_tries):
            bw = float(rng.uniform(*size_range))
            bh = float(rng.uniform(*size_range))
            cx = float(rng.uniform(bw / 2 + 1, width - bw / 2 - 1))
            cy = float(rng.uniform(bh / 2 + 1, height - bh / 2 - 1))
            # keep starting boxes apart so early frames are unambiguous
            clear = all(
                abs(cx - o.start[0]) > (bw + o.size[0]) / 2 + 6
                or abs(cy - o.start[1]) > (bh + o.size[1]) / 2 + 6
                for o in objs
            )
            if not clear:
                continue
            angle = rng.uniform(0, 2 * np.pi)
            objs.append(
                ObjectSpec(
                    shape=SHAPES[i % 2],
                    size=(bw, bh),
                    color=PALETTE[i],
                    start=(cx, cy),
                    velocity=(speed * float(np.cos(angle)), speed * float(np.sin(angle))),
                )
            )
            break
        else:
            raise ValueError("could not place objects without overlap")
    return objs


def standard_sequence(
    seed: int,
    num_objects: int = 1,
    num_frames: int = 30,
    height: int = 96,
    width: int = 96,
    jitter: float = 0.1,
    occlusions: list[OcclusionWindow] | None = None,
    size_range: tuple[float, float] = (16.0, 28.0),
) -> Sequence:
    """A ready-made sequence for demos, training, and acceptance runs."""
    rng = np.random.default_rng(seed)
    objects = place_objects(rng, num_objects, height, width, size_range=size_range)
    spec = SequenceSpec(
        height=height,
        width=width,
        num_frames=num_frames,
        objects=objects,
        seed=seed + 1,
        jitter=jitter,
        occlusions=occlusions or [],
    )
    return generate_sequence(spec)

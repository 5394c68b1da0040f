"""Synthetic road scenes with exact disparity ground truth.

The generator renders a textured ground plane plus fronto-parallel box
obstacles, derives the integer disparity field from the stereo geometry
(u = f*B/Z), and warps the left image into the right one so the pair is
matchable by construction.  Everything is seeded and bit-reproducible,
which makes these scenes the oracle for end-to-end accuracy, road-model,
and detection tests.  The texture families double as the training corpus
for the cascade recognizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from stereovis.imgio import GrayImage, StereoPair
from stereovis.roadobs import StereoGeometry
from stereovis.viterbi import DisparityMap


@dataclass
class SceneObstacle:
    """Fronto-parallel box resting on the road at the given distance."""

    distance_m: float
    lateral_px: int = 0
    width_px: int = 60
    height_px: int = 60

    def __post_init__(self):
        if self.distance_m <= 0:
            raise ValueError("obstacle distance must be positive")


@dataclass
class SceneSpec:
    """Road-plane scene description; defaults give a 10 m obstacle whose
    disparity (f*B/Z = 6) is exactly integral."""

    width: int = 256
    height: int = 192
    focal_px: float = 500.0
    baseline_m: float = 0.12
    camera_height_m: float = 1.5
    background_disparity: int = 1
    obstacles: list = field(default_factory=list)
    seed: int = 0

    @property
    def geometry(self) -> StereoGeometry:
        return StereoGeometry(self.focal_px, self.baseline_m)


@dataclass
class GtBox:
    x: int
    y: int
    w: int
    h: int
    disparity: int
    distance: float

    def to_dict(self) -> dict:
        return {
            "x": self.x,
            "y": self.y,
            "w": self.w,
            "h": self.h,
            "disparity": self.disparity,
            "distance": self.distance,
        }


def road_texture(shape, rng) -> np.ndarray:
    """Mildly rough mid-gray surface (roads, background clutter)."""
    return rng.integers(98, 158, size=shape).astype(np.uint8)


def _two_tone_blocks(shape, rng, lo_range, hi_range) -> np.ndarray:
    h, w = shape
    block = max(3, int(round(min(h, w) * rng.uniform(0.16, 0.28))))
    gh = (h + block - 1) // block
    gw = (w + block - 1) // block
    levels = np.where(
        rng.choice([0, 1], size=(gh, gw)) == 0,
        rng.integers(*lo_range, size=(gh, gw)),
        rng.integers(*hi_range, size=(gh, gw)),
    )
    return np.repeat(np.repeat(levels, block, axis=0), block, axis=1)[:h, :w]


def obstacle_texture(shape, rng) -> np.ndarray:
    """Blocky two-tone obstacle surface, in several sub-families.

    Flat block interiors keep the all-neighbors-equal LBP signature; the
    sub-families (sparse speckle, low contrast, a road strip under the
    box) spread the class the way real obstacle ROIs vary.  The spread is
    what keeps single weak classifiers from covering every positive at the
    cascade's hit-rate floor.
    """
    h, w = shape
    draw = rng.random()
    if draw < 0.55:
        big = _two_tone_blocks(shape, rng, (35, 75), (180, 220))
        if draw >= 0.25:
            # sparse speckle: a few percent of pixels perturbed
            n_bad = int(h * w * rng.uniform(0.02, 0.08))
            ys = rng.integers(0, h, n_bad)
            xs = rng.integers(0, w, n_bad)
            big[ys, xs] += rng.integers(-25, 26, n_bad)
    elif draw < 0.75:
        big = _two_tone_blocks(shape, rng, (80, 105), (150, 175))
    else:
        big = _two_tone_blocks(shape, rng, (35, 75), (180, 220))
        strip = max(2, int(h * rng.uniform(0.1, 0.25)))
        big[h - strip :, :] = road_texture((strip, w), rng)
    return np.clip(big, 0, 255).astype(np.uint8)


def ramp_texture(shape, rng) -> np.ndarray:
    """Smooth brightness ramp in a random direction (hard flat negative)."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = xs * np.cos(angle) + ys * np.sin(angle)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    lo = rng.integers(40, 100)
    span = rng.integers(60, 140)
    return np.clip(lo + ramp * span + rng.integers(-4, 5, size=shape), 0, 255).astype(np.uint8)


def flat_texture(shape, rng) -> np.ndarray:
    """Uniform patch, sometimes split by one step edge (walls, sky).

    Shares the flat-cell LBP signature of obstacle interiors, so a single
    threshold cannot separate it; the cascade must combine cues.
    """
    h, w = shape
    base = np.full(shape, int(rng.integers(60, 200)), dtype=np.int64)
    if rng.random() < 0.5:
        other = int(rng.integers(60, 200))
        if rng.random() < 0.5:
            base[:, int(rng.integers(1, w)) :] = other
        else:
            base[int(rng.integers(1, h)) :, :] = other
    return base.astype(np.uint8)


def noisy_blocks_texture(shape, rng) -> np.ndarray:
    """Blocky layout with light pixel noise (rough walls, facades).

    The hard negative family: geometry matches the obstacle pattern and
    only the interior flatness differs, by a noise-dependent degree.
    """
    h, w = shape
    block = max(3, int(round(min(h, w) * rng.uniform(0.16, 0.28))))
    gh = (h + block - 1) // block
    gw = (w + block - 1) // block
    levels = np.where(
        rng.choice([0, 1], size=(gh, gw)) == 0,
        rng.integers(35, 75, size=(gh, gw)),
        rng.integers(180, 220, size=(gh, gw)),
    )
    big = np.repeat(np.repeat(levels, block, axis=0), block, axis=1)[:h, :w]
    amp = int(rng.integers(2, 6))
    noise = rng.integers(-amp, amp + 1, size=shape)
    return np.clip(big + noise, 0, 255).astype(np.uint8)


def stripe_texture(shape, rng) -> np.ndarray:
    """Fine periodic stripes (fences, gratings): structured but nothing
    like the flat-celled obstacle pattern."""
    h, w = shape
    period = max(2, int(round(min(h, w) * rng.uniform(0.06, 0.14))))
    lo = int(rng.integers(60, 110))
    hi = int(rng.integers(150, 200))
    axis = np.arange(w) if rng.random() < 0.5 else np.arange(h)[:, None]
    bands = (axis // (period // 2 + 1)) % 2
    big = np.where(np.broadcast_to(bands, shape) == 0, lo, hi)
    noise = rng.integers(-6, 7, size=shape)
    return np.clip(big + noise, 0, 255).astype(np.uint8)


def _warp_right(left: np.ndarray, disp: np.ndarray, rng) -> np.ndarray:
    """Right image from left and its disparity field: right(x - u) = left(x).

    Larger disparities write last, so nearer surfaces win where several
    left pixels land on one right pixel; disoccluded holes take fresh
    texture (they are regions no left pixel sees).
    """
    h, w = left.shape
    right = np.zeros_like(left)
    filled = np.zeros((h, w), dtype=bool)
    cols = np.broadcast_to(np.arange(w), (h, w))
    for u in np.unique(disp):
        ys, xs = np.nonzero((disp == u) & (cols >= u))
        right[ys, xs - u] = left[ys, xs]
        filled[ys, xs - u] = True
    holes = ~filled
    right[holes] = road_texture((int(holes.sum()),), rng)
    return right


def generate_synthetic_scene(spec: SceneSpec):
    """Render the scene: (StereoPair, ground-truth DisparityMap, GT boxes).

    Deterministic per seed.  Raises if an obstacle's disparity leaves
    [1, available range] or its box leaves the frame.
    """
    h, w = spec.height, spec.width
    geom = spec.geometry
    if spec.background_disparity < 1:
        raise ValueError("background disparity must be at least 1")
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    rows = np.arange(h)
    u_road = np.round((rows - cy) * spec.baseline_m / spec.camera_height_m).astype(np.int32)
    disp = np.maximum(u_road, spec.background_disparity)[:, None] * np.ones((1, w), np.int32)

    rng = np.random.default_rng(spec.seed)
    left = road_texture((h, w), rng)

    boxes = []
    for obs in spec.obstacles:
        u_obs = int(round(geom.focal_px * spec.baseline_m / obs.distance_m))
        if u_obs < 1:
            raise ValueError(f"obstacle at {obs.distance_m} m renders below disparity 1")
        contact = int(round(cy + u_obs * spec.camera_height_m / spec.baseline_m))
        y1 = contact
        y0 = y1 - obs.height_px
        x0 = int(round(cx + obs.lateral_px - obs.width_px / 2))
        x1 = x0 + obs.width_px
        if y0 < 0 or y1 > h or x0 < 0 or x1 > w:
            raise ValueError("obstacle box leaves the frame")
        nearer = disp[y0:y1, x0:x1] < u_obs
        disp[y0:y1, x0:x1][nearer] = u_obs
        left[y0:y1, x0:x1] = obstacle_texture((obs.height_px, obs.width_px), rng)
        boxes.append(
            GtBox(x0, y0, obs.width_px, obs.height_px, u_obs, geom.distance_of(u_obs))
        )

    right = _warp_right(left, disp, rng)
    pair = StereoPair(GrayImage(left), GrayImage(right))
    gt = DisparityMap(disp, np.ones((h, w), dtype=bool), int(disp.max()))
    return pair, gt, boxes


NEGATIVE_FAMILIES = (road_texture, ramp_texture, stripe_texture, flat_texture, noisy_blocks_texture)


def corpus_window(kind: str, rng, size_range=(30, 90)) -> GrayImage:
    """One labeled training window: 'pos' draws the obstacle texture,
    'neg' draws uniformly from the negative families."""
    size = int(rng.integers(size_range[0], size_range[1] + 1))
    if kind == "pos":
        return GrayImage(obstacle_texture((size, size), rng))
    family = NEGATIVE_FAMILIES[int(rng.integers(0, len(NEGATIVE_FAMILIES)))]
    return GrayImage(family((size, size), rng))


def synthetic_training_corpus(n_pos: int, n_neg: int, seed: int = 0):
    """Window images for cascade training: (positives, negatives)."""
    rng = np.random.default_rng(seed)
    pos = [corpus_window("pos", rng) for _ in range(n_pos)]
    neg = [corpus_window("neg", rng) for _ in range(n_neg)]
    return pos, neg

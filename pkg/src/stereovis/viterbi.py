"""Multi-path Viterbi disparity optimization with a total-variation penalty.

A sweep runs dynamic programming along one pixel chain (row, column, or
diagonal) over the disparity trellis.  The transition penalty is linear in
the disparity change, lam * exp(-g) * |u - v|, which admits a two-pass
lower-envelope evaluation: one ascending and one descending pass over
disparities replace the all-pairs minimum, 2m work per pixel instead of m^2.
``viterbi_sweep_direct`` keeps the all-pairs form as the reference oracle.

Four direction pairs are decoded in a fixed hierarchy (horizontal, vertical,
diagonal, anti-diagonal); each pair's merged node energies augment the node
costs of the next pair, so the horizontal result acts as a strong prior for
the rest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from stereovis.cost import CostParams, build_patch_stats, ssim_cost_volume
from stereovis.imgio import GradientMap, StereoPair, gradient_magnitude

# sentinel energy for trellis cells that no real path has reached
UNREACHED = 1e30


class PathDirection(Enum):
    """The eight sweep directions, as (dy, dx) pixel steps."""

    LEFT_TO_RIGHT = (0, 1)
    RIGHT_TO_LEFT = (0, -1)
    TOP_TO_BOTTOM = (1, 0)
    BOTTOM_TO_TOP = (-1, 0)
    DOWN_RIGHT = (1, 1)
    UP_LEFT = (-1, -1)
    DOWN_LEFT = (1, -1)
    UP_RIGHT = (-1, 1)

    @property
    def step(self) -> tuple[int, int]:
        return self.value

    @property
    def pair_name(self) -> str:
        return _PAIR_OF[self]


_PAIR_OF = {
    PathDirection.LEFT_TO_RIGHT: "horizontal",
    PathDirection.RIGHT_TO_LEFT: "horizontal",
    PathDirection.TOP_TO_BOTTOM: "vertical",
    PathDirection.BOTTOM_TO_TOP: "vertical",
    PathDirection.DOWN_RIGHT: "diagonal",
    PathDirection.UP_LEFT: "diagonal",
    PathDirection.DOWN_LEFT: "antidiagonal",
    PathDirection.UP_RIGHT: "antidiagonal",
}

# execution order of the hierarchy: (forward, backward, merge rule)
LAYER_ORDER = (
    (PathDirection.LEFT_TO_RIGHT, PathDirection.RIGHT_TO_LEFT, "min"),
    (PathDirection.TOP_TO_BOTTOM, PathDirection.BOTTOM_TO_TOP, "mean"),
    (PathDirection.DOWN_RIGHT, PathDirection.UP_LEFT, "mean"),
    (PathDirection.DOWN_LEFT, PathDirection.UP_RIGHT, "mean"),
)


@dataclass
class PenaltyParams:
    """TV transition penalty: lam * exp(-g / gradient_scale) * |u - v|.

    ``occlusion_asymmetry`` multiplies the penalty for small-to-large
    disparity transitions; it is applied only in the right-to-left
    horizontal sweep, where such jumps indicate occlusions.
    ``gradient_scale`` rescales gradient magnitudes before the exponential
    (1.0 reproduces the raw formula; natural images want a larger scale).
    """

    lam: float = 1.0
    occlusion_asymmetry: float = 2.0
    gradient_scale: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.occlusion_asymmetry < 1:
            raise ValueError("occlusion_asymmetry must be >= 1")
        if self.gradient_scale <= 0:
            raise ValueError("gradient_scale must be positive")

    def weight(self, g: float) -> float:
        return self.lam * math.exp(-g / self.gradient_scale)


@dataclass
class TrellisLayer:
    """Accumulated energies for one sweep: shape (path length, d_max + 1)."""

    energies: np.ndarray
    direction: PathDirection | None = None

    def __post_init__(self):
        self.energies = np.asarray(self.energies, dtype=np.float64)
        if self.energies.ndim != 2:
            raise ValueError("trellis energies must be 2D (pixels x disparities)")

    @property
    def d_max(self) -> int:
        return self.energies.shape[1] - 1


@dataclass
class SweepStats:
    """Operation accounting for the fast sweep (criterion: <= 2m per pixel)."""

    min_ops: int = 0
    pixels: int = 0


@dataclass
class DisparityMap:
    """Per-pixel integer disparity with a validity mask."""

    disparity: np.ndarray
    valid: np.ndarray
    d_max: int

    def __post_init__(self):
        self.disparity = np.asarray(self.disparity, dtype=np.int32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.disparity.shape != self.valid.shape or self.disparity.ndim != 2:
            raise ValueError("disparity and validity mask must share a 2D shape")
        inside = self.disparity[self.valid]
        if inside.size and (inside.min() < 0 or inside.max() > self.d_max):
            raise ValueError(f"valid disparities must lie in [0, {self.d_max}]")

    @property
    def width(self) -> int:
        return self.disparity.shape[1]

    @property
    def height(self) -> int:
        return self.disparity.shape[0]

    @staticmethod
    def full(height: int, width: int, value: int, d_max: int) -> "DisparityMap":
        return DisparityMap(
            np.full((height, width), value, dtype=np.int32),
            np.ones((height, width), dtype=bool),
            d_max,
        )


def tv_penalty(u: int, v: int, g: float, params: PenaltyParams) -> float:
    """Transition cost lam * exp(-g) * |u - v| (asymmetry handled by callers)."""
    return params.weight(g) * abs(u - v)


def _weights_for(params: PenaltyParams, gradients, n: int) -> np.ndarray:
    if gradients is None:
        return np.full(n, params.lam, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    if g.shape != (n,):
        raise ValueError(f"gradients must have shape ({n},), got {g.shape}")
    return params.lam * np.exp(-g / params.gradient_scale)


def viterbi_sweep_direct(
    costs: np.ndarray,
    penalty: PenaltyParams,
    gradients=None,
    init=None,
    asymmetric: bool = False,
    direction: PathDirection | None = None,
) -> TrellisLayer:
    """Reference sweep: all-to-all transitions, O(m^2) per pixel.

    costs[p, u] is the node cost of disparity u at step p; gradients[p] is
    the gradient magnitude at the destination pixel of step p (g[0] unused).
    init adds a per-disparity prior to the base case.  With asymmetric=True
    the occlusion multiplier applies to transitions that increase disparity.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2 or costs.shape[0] == 0:
        raise ValueError("costs must be a non-empty (pixels x disparities) array")
    n, m = costs.shape
    w = _weights_for(penalty, gradients, n)
    up_mult = penalty.occlusion_asymmetry if asymmetric else 1.0
    u_idx = np.arange(m)
    diff = u_idx[:, None] - u_idx[None, :]  # u - v
    dist = np.abs(diff).astype(np.float64)
    dist[diff > 0] *= up_mult
    e = np.empty_like(costs)
    e[0] = costs[0] + (0.0 if init is None else np.asarray(init, dtype=np.float64))
    for p in range(1, n):
        trans = e[p - 1][None, :] + w[p] * dist
        e[p] = trans.min(axis=1) + costs[p]
    return TrellisLayer(e, direction)


def _envelope(prev: np.ndarray, w_up, w_down, idx: np.ndarray) -> np.ndarray:
    """min over v of prev[..., v] + penalty(v -> u), for linear penalties.

    Ascending pass covers v <= u with slope w_up, descending pass covers
    v >= u with slope w_down; both include v == u.  Works on any leading
    batch shape; w_up/w_down broadcast against it.
    """
    asc = np.minimum.accumulate(prev - w_up * idx, axis=-1) + w_up * idx
    rev = (prev + w_down * idx)[..., ::-1]
    desc = np.minimum.accumulate(rev, axis=-1)[..., ::-1] - w_down * idx
    return np.minimum(asc, desc)


def viterbi_sweep_fast(
    costs: np.ndarray,
    penalty: PenaltyParams,
    gradients=None,
    init=None,
    asymmetric: bool = False,
    direction: PathDirection | None = None,
    stats: SweepStats | None = None,
) -> TrellisLayer:
    """Fast sweep: lower-envelope propagation, 2m work per pixel.

    Produces energies equal (within float rounding) to the direct sweep.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2 or costs.shape[0] == 0:
        raise ValueError("costs must be a non-empty (pixels x disparities) array")
    n, m = costs.shape
    w = _weights_for(penalty, gradients, n)
    up_mult = penalty.occlusion_asymmetry if asymmetric else 1.0
    idx = np.arange(m, dtype=np.float64)
    e = np.empty_like(costs)
    e[0] = costs[0] + (0.0 if init is None else np.asarray(init, dtype=np.float64))
    for p in range(1, n):
        e[p] = _envelope(e[p - 1], w[p] * up_mult, w[p], idx) + costs[p]
        if stats is not None:
            stats.min_ops += 2 * m
            stats.pixels += 1
    return TrellisLayer(e, direction)


def backtrack_path(
    layer: TrellisLayer,
    costs: np.ndarray,
    penalty: PenaltyParams,
    gradients=None,
    asymmetric: bool = False,
) -> np.ndarray:
    """Minimum-energy disparity sequence of a single sweep.

    Ties break toward the smaller disparity at every step.
    """
    e = layer.energies
    costs = np.asarray(costs, dtype=np.float64)
    n, m = e.shape
    w = _weights_for(penalty, gradients, n)
    up_mult = penalty.occlusion_asymmetry if asymmetric else 1.0
    u_idx = np.arange(m)
    path = np.empty(n, dtype=np.int64)
    path[-1] = int(np.argmin(e[-1]))
    for p in range(n - 1, 0, -1):
        u = path[p]
        diff = u - u_idx  # u - v
        dist = np.abs(diff).astype(np.float64)
        dist[diff > 0] *= up_mult
        path[p - 1] = int(np.argmin(e[p - 1] + w[p] * dist))
    return path


def merge_bidirectional(
    forward: TrellisLayer, backward: TrellisLayer, direction_pair: str
) -> TrellisLayer:
    """Combine opposite sweeps: min for the horizontal pair (sharpens edges),
    arithmetic mean for vertical and diagonal pairs (suppresses noise)."""
    if forward.energies.shape != backward.energies.shape:
        raise ValueError("cannot merge trellis layers of different shapes")
    merged = _merge_energies(forward.energies, backward.energies, direction_pair)
    return TrellisLayer(merged, forward.direction)


def _merge_energies(fwd: np.ndarray, bwd: np.ndarray, pair: str) -> np.ndarray:
    if pair == "horizontal" or pair == "min":
        return np.minimum(fwd, bwd)
    if pair in ("vertical", "diagonal", "antidiagonal", "mean"):
        return (fwd + bwd) / 2.0
    raise ValueError(f"unknown direction pair {pair!r}")


def _sweep_image(
    costs: np.ndarray,
    weights: np.ndarray,
    direction: PathDirection,
    up_mult: float,
) -> np.ndarray:
    """One full-image sweep on the dense (h, w, m) trellis.

    Rows (or columns) advance as wavefronts so the envelope vectorizes over
    every concurrent path; each pixel still performs the 2m envelope work.
    """
    h, w, m = costs.shape
    dy, dx = direction.step
    idx = np.arange(m, dtype=np.float64)
    e = np.empty_like(costs)

    if dy == 0:
        xs = range(0, w) if dx > 0 else range(w - 1, -1, -1)
        first = next(iter(xs))
        e[:, first] = costs[:, first]
        for x in xs:
            if x == first:
                continue
            wcol = weights[:, x : x + 1]
            env = _envelope(e[:, x - dx], wcol * up_mult, wcol, idx)
            e[:, x] = env + costs[:, x]
        return e

    ys = range(0, h) if dy > 0 else range(h - 1, -1, -1)
    first = next(iter(ys))
    e[first] = costs[first]
    for y in ys:
        if y == first:
            continue
        prev = e[y - dy]
        if dx == 0:
            wrow = weights[y][:, None]
            env = _envelope(prev, wrow * up_mult, wrow, idx)
            e[y] = env + costs[y]
        else:
            # diagonal: predecessor sits one column over; columns with no
            # predecessor restart their path at the node cost; the weight
            # comes from the destination pixel of each step
            e[y] = costs[y]
            if dx > 0:
                wlane = weights[y, 1:][:, None]
                e[y, 1:] += _envelope(prev[:-1], wlane * up_mult, wlane, idx)
            else:
                wlane = weights[y, :-1][:, None]
                e[y, :-1] += _envelope(prev[1:], wlane * up_mult, wlane, idx)
    return e


def run_mpv_energies(
    node_costs: np.ndarray,
    gradient: np.ndarray,
    penalty: PenaltyParams,
    carry_weight: float = 1.0,
) -> np.ndarray:
    """Run the 4-layer hierarchy over a dense cost volume.

    node_costs is (h, w, m); gradient is the per-pixel magnitude used for
    the TV weight at the destination pixel of each step.  Each layer's
    merged energies, scaled by carry_weight, augment the node costs of the
    next layer.  Returns the final merged energies.
    """
    if node_costs.ndim != 3:
        raise ValueError("node costs must be (height, width, disparities)")
    weights = penalty.lam * np.exp(-np.asarray(gradient, np.float64) / penalty.gradient_scale)
    if weights.shape != node_costs.shape[:2]:
        raise ValueError("gradient shape must match the image")
    merged = None
    for fwd, bwd, rule in LAYER_ORDER:
        layer_costs = node_costs if merged is None else node_costs + carry_weight * merged
        e_fwd = _sweep_image(layer_costs, weights, fwd, 1.0)
        up = penalty.occlusion_asymmetry if bwd is PathDirection.RIGHT_TO_LEFT else 1.0
        e_bwd = _sweep_image(layer_costs, weights, bwd, up)
        merged = _merge_energies(e_fwd, e_bwd, rule)
    return merged


def disparity_from_energies(
    energies: np.ndarray,
    d_max: int,
    axis_offset: int = 0,
    scope_lo: np.ndarray | None = None,
    scope_hi: np.ndarray | None = None,
) -> DisparityMap:
    """Argmin over the disparity axis; ties break toward smaller disparity.

    When per-pixel scopes are given, cells outside [lo, hi] are masked so a
    virtual (padding) node can never win.
    """
    if scope_lo is not None and scope_hi is not None:
        k = energies.shape[2]
        axis = axis_offset + np.arange(k)
        outside = (axis[None, None, :] < scope_lo[:, :, None]) | (
            axis[None, None, :] > scope_hi[:, :, None]
        )
        masked = np.where(outside, np.inf, energies)
        best = np.argmin(masked, axis=2)
    else:
        best = np.argmin(energies, axis=2)
    disp = (best + axis_offset).astype(np.int32)
    return DisparityMap(disp, np.ones(disp.shape, dtype=bool), d_max)


def run_mpv(
    pair: StereoPair,
    d_max: int,
    cost_params: CostParams | None = None,
    penalty: PenaltyParams | None = None,
    carry_weight: float = 1.0,
    gradient: GradientMap | None = None,
) -> DisparityMap:
    """Full-range multi-path Viterbi matching of a rectified pair.

    Layers run horizontal, vertical, diagonal, anti-diagonal; both sweep
    directions of a layer are merged (min/mean) and seed the next layer.
    The final disparity is the per-pixel argmin of the last merged energy.
    """
    if d_max < 1:
        raise ValueError("d_max must be at least 1")
    cost_params = cost_params or CostParams()
    penalty = penalty or PenaltyParams()
    left_stats = build_patch_stats(pair.left, cost_params)
    right_stats = build_patch_stats(pair.right, cost_params)
    volume = ssim_cost_volume(left_stats, right_stats, range(d_max + 1), cost_params)
    grad = gradient if gradient is not None else gradient_magnitude(pair.left)
    energies = run_mpv_energies(volume, grad.magnitude, penalty, carry_weight)
    return disparity_from_energies(energies, d_max)

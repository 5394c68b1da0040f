"""SSIM-based matching cost with sliding-window patch statistics.

Window sums are built once per image from running row/column cumulative
sums, so any patch mean/variance is an O(1) lookup.  That decomposition is
the performance contract of this module; per-patch loops exist only in the
test oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from stereovis.imgio import GrayImage


@dataclass
class CostParams:
    """Window size and SSIM constants.

    C1, C2, C3 derive from (K1, K2, L); alpha/beta/gamma weight the
    luminance, contrast, and structure components.
    """

    window: int = 7
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 255.0
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if not (0 < self.k1 < 0.2 and 0 < self.k2 < 0.2):
            raise ValueError("K1 and K2 must lie in (0, 0.2)")
        if self.alpha <= 0 or self.beta <= 0 or self.gamma <= 0:
            raise ValueError("component exponents must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2.0


def _window_sum(padded: np.ndarray, n: int) -> np.ndarray:
    # summed-area table over an edge-padded image; one subtraction per axis
    # retrieves any n x n window sum
    sat = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.float64)
    np.cumsum(padded, axis=0, out=sat[1:, 1:])
    np.cumsum(sat[1:, 1:], axis=1, out=sat[1:, 1:])
    return sat[n:, n:] - sat[:-n, n:] - sat[n:, :-n] + sat[:-n, :-n]


@dataclass
class PatchStats:
    """Per-pixel N x N window sums for one image.

    Borders use clamped (edge-replicated) windows.  ``padded`` retains the
    replicated image so cross-covariances between two stats objects can be
    formed for any disparity shift.
    """

    params: CostParams
    padded: np.ndarray
    win_sum: np.ndarray
    win_sumsq: np.ndarray
    shape: tuple[int, int] = field(init=False)

    def __post_init__(self):
        self.shape = self.win_sum.shape

    @property
    def count(self) -> int:
        return self.params.window * self.params.window

    def mean(self) -> np.ndarray:
        return self.win_sum / self.count

    def variance(self) -> np.ndarray:
        var = self.win_sumsq / self.count - (self.win_sum / self.count) ** 2
        return np.maximum(var, 0.0)

    def mean_at(self, x: int, y: int) -> float:
        return float(self.win_sum[y, x]) / self.count

    def variance_at(self, x: int, y: int) -> float:
        mu = self.mean_at(x, y)
        return max(float(self.win_sumsq[y, x]) / self.count - mu * mu, 0.0)

    def window_values(self, x: int, y: int) -> np.ndarray:
        """The clamped window contents around (x, y), as float64."""
        n = self.params.window
        return self.padded[y : y + n, x : x + n]


def build_patch_stats(img: GrayImage, params: CostParams | None = None) -> PatchStats:
    """Build sliding-window sums for an image.

    Raises ValueError if the image is smaller than the window.
    """
    params = params or CostParams()
    n = params.window
    if img.width < n or img.height < n:
        raise ValueError(
            f"image {img.width}x{img.height} smaller than {n}x{n} stats window"
        )
    r = n // 2
    padded = np.pad(img.pixels.astype(np.float64), r, mode="edge")
    return PatchStats(
        params=params,
        padded=padded,
        win_sum=_window_sum(padded, n),
        win_sumsq=_window_sum(padded * padded, n),
    )


def _covariance_at(left: PatchStats, right: PatchStats, x: int, y: int, u: int) -> float:
    lw = left.window_values(x, y)
    rw = right.window_values(x - u, y)
    n = left.count
    return float((lw * rw).sum()) / n - left.mean_at(x, y) * right.mean_at(x - u, y)


def ssim_components(
    left: PatchStats,
    right: PatchStats,
    x: int,
    y: int,
    u: int,
    params: CostParams | None = None,
) -> tuple[float, float, float]:
    """Luminance, contrast, and structure similarity of the patch pair at
    left (x, y) versus right (x - u, y).

    Identical patches give exactly (1, 1, 1).  Raises ValueError when the
    disparity pushes the right patch center out of bounds.
    """
    params = params or left.params
    h, w = left.shape
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"pixel ({x}, {y}) outside {w}x{h} image")
    if not 0 <= x - u < right.shape[1]:
        raise ValueError(f"disparity {u} at column {x} leaves the right image")
    mu_l = left.mean_at(x, y)
    mu_r = right.mean_at(x - u, y)
    var_l = left.variance_at(x, y)
    var_r = right.variance_at(x - u, y)
    sd_l = math.sqrt(var_l)
    sd_r = math.sqrt(var_r)
    cov = _covariance_at(left, right, x, y, u)
    lum = (2 * mu_l * mu_r + params.c1) / (mu_l * mu_l + mu_r * mu_r + params.c1)
    con = (2 * sd_l * sd_r + params.c2) / (var_l + var_r + params.c2)
    stru = (cov + params.c3) / (sd_l * sd_r + params.c3)
    return lum, con, stru


def _powered_product(lum, con, stru, params: CostParams):
    # structure can go negative for anti-correlated patches; extend fractional
    # powers by sign so the cost stays real
    s_pow = math.copysign(abs(stru) ** params.gamma, stru)
    return (lum**params.alpha) * (con**params.beta) * s_pow


def ssim_cost(
    left: PatchStats,
    right: PatchStats,
    x: int,
    y: int,
    u: int,
    params: CostParams | None = None,
) -> float:
    """Matching cost (1 - l^a c^b s^g) * L / 2, clamped to [0, L].

    Out-of-bounds disparities cost exactly L, the maximal penalty.
    """
    params = params or left.params
    if not 0 <= x - u < right.shape[1]:
        return params.dynamic_range
    lum, con, stru = ssim_components(left, right, x, y, u, params)
    cost = (1.0 - _powered_product(lum, con, stru, params)) * params.dynamic_range / 2.0
    return min(max(cost, 0.0), params.dynamic_range)


def ssim_cost_volume(
    left: PatchStats,
    right: PatchStats,
    disparities,
    params: CostParams | None = None,
) -> np.ndarray:
    """Dense cost volume over the given disparity values.

    Returns float64 of shape (height, width, len(disparities)), with cost L
    wherever the shifted right patch center leaves the image.  Each disparity
    plane is produced with box-filtered window sums, never per-patch loops.
    """
    params = params or left.params
    disparities = list(disparities)
    h, w = left.shape
    n = params.window
    cnt = n * n
    big = params.dynamic_range

    mu_l = left.mean()
    mu_r = right.mean()
    var_l = left.variance()
    var_r = right.variance()
    sd_l = np.sqrt(var_l)
    sd_r = np.sqrt(var_r)

    volume = np.full((h, w, len(disparities)), big, dtype=np.float64)
    for k, u in enumerate(disparities):
        if u < 0 or u >= w:
            continue
        span = w - u
        # product of left window and right window shifted by u, via one
        # summed-area pass over the aligned padded images
        prod = left.padded[:, u:] * right.padded[:, : left.padded.shape[1] - u]
        prod_sum = _window_sum(prod, n)
        cov = prod_sum / cnt - mu_l[:, u:] * mu_r[:, :span]
        lum = (2 * mu_l[:, u:] * mu_r[:, :span] + params.c1) / (
            mu_l[:, u:] ** 2 + mu_r[:, :span] ** 2 + params.c1
        )
        con = (2 * sd_l[:, u:] * sd_r[:, :span] + params.c2) / (
            var_l[:, u:] + var_r[:, :span] + params.c2
        )
        stru = (cov + params.c3) / (sd_l[:, u:] * sd_r[:, :span] + params.c3)
        prod_sim = (
            np.power(lum, params.alpha)
            * np.power(con, params.beta)
            * np.copysign(np.power(np.abs(stru), params.gamma), stru)
        )
        plane = (1.0 - prod_sim) * big / 2.0
        volume[:, u:, k] = np.clip(plane, 0.0, big)
    return volume

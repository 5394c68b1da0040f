"""Road-surface and obstacle detection in disparity-histogram space.

A planar road traces a line in the v-disparity histogram (pixel counts per
disparity and image row); vertical obstacles show up as tall runs in the
u-disparity histogram (counts per disparity and column).  The road line is
located twice: a discrete Radon transform finds the dominant straight line,
and a maximizing Viterbi pass extracts the exact row-per-disparity path
inside a band around it.  Road pixels back-project through the stereo
geometry (u/B = f/Z = x/X = y/Y) to a metric plane fit, which supports the
small-object height test and above-road obstacle masks.

Image coordinates are centered at the principal point (taken as the image
center) with y growing downward, so a road below the camera has positive Y
and its fitted unit normal keeps a positive b component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from stereovis.viterbi import DisparityMap


@dataclass
class StereoGeometry:
    """Calibrated focal length (pixels) and baseline (meters)."""

    focal_px: float
    baseline_m: float

    def __post_init__(self):
        if self.focal_px <= 0 or self.baseline_m <= 0:
            raise ValueError("focal length and baseline must be positive")

    def distance_of(self, disparity: float) -> float:
        if disparity <= 0:
            raise ValueError("disparity must be positive to give a distance")
        return self.focal_px * self.baseline_m / disparity


@dataclass
class VDisparity:
    """counts[i, j] = valid pixels with disparity i in image row j."""

    counts: np.ndarray

    @property
    def d_bins(self) -> int:
        return self.counts.shape[0]

    @property
    def rows(self) -> int:
        return self.counts.shape[1]


@dataclass
class UDisparity:
    """counts[i, x] = valid pixels with disparity i in image column x."""

    counts: np.ndarray

    @property
    def d_bins(self) -> int:
        return self.counts.shape[0]

    @property
    def cols(self) -> int:
        return self.counts.shape[1]


@dataclass
class RoadPath:
    """Viterbi road profile: row per disparity bin over [d_lo, d_lo + len)."""

    d_lo: int
    rows: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)

    @property
    def d_hi(self) -> int:
        return self.d_lo + len(self.rows) - 1

    def disparity_per_row(self, height: int) -> np.ndarray:
        """Invert the path to an expected road disparity per image row.

        Rows between path points interpolate linearly; rows beyond the
        path's span clamp to the end disparities (the profile extends flat).
        """
        order = np.argsort(self.rows)
        rows = self.rows[order]
        disps = (self.d_lo + np.arange(len(self.rows)))[order].astype(np.float64)
        return np.interp(np.arange(height), rows, disps)


@dataclass
class RoadModel:
    """Road description shared by the detection stages.

    line is the Radon-space (d, phi); plane is (a, b, c, d_off) with unit
    normal and aX + bY + cZ = d_off in camera space.
    """

    line: tuple[float, float]
    geometry: StereoGeometry
    path: RoadPath | None = None
    plane: tuple[float, float, float, float] | None = None
    line_score: float = 0.0

    def to_dict(self) -> dict:
        return {
            "line": {"d": self.line[0], "phi": self.line[1], "score": self.line_score},
            "plane": None
            if self.plane is None
            else dict(zip(("a", "b", "c", "d_off"), (float(v) for v in self.plane))),
            "path": None
            if self.path is None
            else {"d_lo": self.path.d_lo, "rows": self.path.rows.tolist()},
            "geometry": {"focal_px": self.geometry.focal_px, "baseline_m": self.geometry.baseline_m},
        }


@dataclass
class RoiBox:
    """Obstacle region of interest with its mean disparity and distance."""

    x: int
    y: int
    w: int
    h: int
    mean_disparity: float
    distance: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError("ROI box must have positive extent")
        if self.distance <= 0:
            raise ValueError("ROI distance must be positive")

    def to_dict(self) -> dict:
        return {
            "x": self.x,
            "y": self.y,
            "w": self.w,
            "h": self.h,
            "mean_disparity": self.mean_disparity,
            "distance": self.distance,
        }


@dataclass
class RoadObsParams:
    """Thresholds for the road/obstacle stages.

    small_object_height (meters) is the band of the height test; LIDAR-class
    sensors start missing objects right around 0.05 m.  min_run_frac sets
    the u-disparity obstacle threshold as a fraction of image height.
    """

    small_object_height: float = 0.05
    min_run_frac: float = 0.10
    min_component_area: int = 30
    straightness: float = 20.0
    radon_band: int = 8
    road_disparity_tol: float = 1.0
    # disparities below this are past the effective measurement range
    # (u = 1 at a 0.12 m baseline and ~500 px focal is beyond 60 m) and
    # would otherwise swamp the line detectors as a vertical stripe
    min_line_disparity: int = 2


def vdisparity(disp: DisparityMap) -> VDisparity:
    """Row histogram per Kronecker-delta counting; invalid pixels excluded."""
    counts = np.zeros((disp.d_max + 1, disp.height), dtype=np.int64)
    ys, xs = np.nonzero(disp.valid)
    np.add.at(counts, (disp.disparity[ys, xs], ys), 1)
    return VDisparity(counts)


def udisparity(disp: DisparityMap) -> UDisparity:
    """Column histogram, symmetric to the row version."""
    counts = np.zeros((disp.d_max + 1, disp.width), dtype=np.int64)
    ys, xs = np.nonzero(disp.valid)
    np.add.at(counts, (disp.disparity[ys, xs], xs), 1)
    return UDisparity(counts)


def radon_line(
    v: VDisparity, d_bins: int | None = None, phi_bins: int = 180
) -> tuple[float, float, float]:
    """Dominant line of the v-disparity histogram by discrete Radon argmax.

    The line is i*cos(phi) + j*sin(phi) = d over (disparity bin i, row j).
    Cell mass accumulates into its nearest d bin per phi (1-pixel bins by
    default).  Returns (d, phi, score); ties prefer the larger phi (flatter
    road), then the smaller d.
    """
    weights = v.counts
    if not weights.any():
        raise ValueError("v-disparity histogram is empty")
    ii, jj = np.nonzero(weights)
    mass = weights[ii, jj].astype(np.float64)
    phis = (np.arange(phi_bins) + 0.0) * (math.pi / phi_bins)
    rho_min = -float(v.d_bins)  # cos(phi) < 0 at steep phi makes rho negative
    rho_max = float(math.hypot(v.d_bins, v.rows))
    if d_bins is None:
        d_bins = int(math.ceil(rho_max - rho_min)) + 1
    width = (rho_max - rho_min) / d_bins
    acc = np.zeros((d_bins, phi_bins), dtype=np.float64)
    for k, phi in enumerate(phis):
        rho = ii * math.cos(phi) + jj * math.sin(phi)
        bins = np.floor((rho - rho_min) / width + 0.5).astype(np.intp)
        np.clip(bins, 0, d_bins - 1, out=bins)
        np.add.at(acc[:, k], bins, mass)
    best = acc.max()
    cand_d, cand_phi = np.nonzero(acc == best)
    pick = np.lexsort((cand_d, -cand_phi))[0]
    d = rho_min + cand_d[pick] * width
    return float(d), float(phis[cand_phi[pick]]), float(best)


def road_viterbi(
    v: VDisparity,
    straightness: float,
    d_range: tuple[int, int] | None = None,
    row_band: tuple[np.ndarray, np.ndarray] | None = None,
) -> RoadPath:
    """Maximum-count path P (row per disparity) with bounded steps.

    Successive rows must satisfy 0 < P(i) - P(i-1) < straightness.  The DP
    accumulates histogram counts and backtracks deterministically (ties go
    to the smaller row).  d_range restricts the disparity bins traversed
    (default: the support of the histogram); row_band optionally confines
    each bin's rows, e.g. around a detected Radon line.
    """
    if straightness < 1:
        raise ValueError("straightness bound must be >= 1")
    counts = v.counts.astype(np.float64)
    if d_range is None:
        support = np.nonzero(counts.any(axis=1))[0]
        if support.size == 0:
            raise ValueError("v-disparity histogram is empty")
        d_lo, d_hi = int(support[0]), int(support[-1])
    else:
        d_lo, d_hi = d_range
    n = d_hi - d_lo + 1
    rows = v.rows
    max_step = int(math.ceil(straightness)) - 1
    if max_step < 1:
        raise ValueError("straightness bound admits no positive row step")
    if rows < n:
        raise ValueError(
            f"infeasible: {n} strictly increasing rows cannot fit in {rows} rows"
        )

    neg = -np.inf
    score = np.full((n, rows), neg)
    parent = np.zeros((n, rows), dtype=np.int64)
    score[0] = counts[d_lo]
    if row_band is not None:
        lo_b, hi_b = row_band
        j = np.arange(rows)
        score[0][(j < lo_b[0]) | (j > hi_b[0])] = neg
    for t in range(1, n):
        prev = score[t - 1]
        best = np.full(rows, neg)
        arg = np.zeros(rows, dtype=np.int64)
        for step in range(1, max_step + 1):
            cand = np.full(rows, neg)
            cand[step:] = prev[:-step]
            better = cand >= best  # ties fall to the larger step,
            best[better] = cand[better]  # i.e. the smaller predecessor row
            arg[better] = np.arange(rows)[better] - step
        score[t] = best + counts[d_lo + t]
        parent[t] = arg
        if row_band is not None:
            j = np.arange(rows)
            score[t][(j < lo_b[t]) | (j > hi_b[t])] = neg
    if not np.isfinite(score[-1]).any():
        raise ValueError("infeasible: no path satisfies the step constraint")
    path = np.zeros(n, dtype=np.int64)
    path[-1] = int(np.argmax(score[-1]))
    for t in range(n - 1, 0, -1):
        path[t - 1] = parent[t, path[t]]
    return RoadPath(d_lo, path)


def _centered_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    return np.arange(width) - cx, np.arange(height) - cy


def back_project(
    x_c: np.ndarray, y_c: np.ndarray, u: np.ndarray, geometry: StereoGeometry
) -> np.ndarray:
    """(X, Y, Z) = (x*B/u, y*B/u, f*B/u) for centered pixel coords."""
    b = geometry.baseline_m
    u = np.asarray(u, dtype=np.float64)
    return np.stack([x_c * b / u, y_c * b / u, geometry.focal_px * b / u], axis=-1)


def expected_road_disparity(
    road: RoadPath | tuple[float, float], height: int
) -> np.ndarray:
    """Per-row road disparity from either the Viterbi path or a Radon line."""
    if isinstance(road, RoadPath):
        return road.disparity_per_row(height)
    d, phi = road
    cos_p, sin_p = math.cos(phi), math.sin(phi)
    if abs(cos_p) < 1e-9:
        raise ValueError("degenerate road line: disparity independent of row")
    j = np.arange(height, dtype=np.float64)
    return (d - j * sin_p) / cos_p


def _plane_through(pts: np.ndarray) -> tuple[float, float, float, float]:
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    if svals[1] < 1e-9 * max(svals[0], 1.0):
        raise ValueError("degenerate road samples: collinear point set")
    normal = vt[2]
    if normal[1] < 0:
        normal = -normal
    a, b, c = (float(t) for t in normal)
    return a, b, c, float(normal @ centroid)


def fit_plane(
    road: RoadPath | tuple[float, float],
    geometry: StereoGeometry,
    disp: DisparityMap,
    tol: float = 1.0,
) -> tuple[float, float, float, float]:
    """Least-squares plane aX + bY + cZ = d_off through road pixels.

    Road pixels are those within tol of the expected per-row disparity.
    Two trimmed refits drop samples beyond twice the residual RMS, so
    obstacle pixels standing near their road contact row cannot tilt the
    fit (noise-free maps are untouched: all residuals are zero).  The
    normal is unit length with b forced positive.  Raises on fewer than 3
    samples or a collinear sample set.
    """
    expected = expected_road_disparity(road, disp.height)
    xs_c, ys_c = _centered_grid(disp.height, disp.width)
    u = disp.disparity.astype(np.float64)
    mask = disp.valid & (u > 0) & np.isfinite(expected)[:, None]
    mask &= np.abs(u - expected[:, None]) <= tol
    ys, xs = np.nonzero(mask)
    if ys.size < 3:
        raise ValueError(f"plane fit needs >= 3 road samples, found {ys.size}")
    pts = back_project(xs_c[xs], ys_c[ys], u[ys, xs], geometry)
    a, b, c, d_off = _plane_through(pts)
    for _ in range(2):
        res = pts @ np.array([a, b, c]) - d_off
        rms = float(np.sqrt(np.mean(res * res)))
        if rms < 1e-12:
            break
        keep = np.abs(res) <= 2.0 * rms
        if keep.sum() < 3 or keep.all():
            break
        pts = pts[keep]
        a, b, c, d_off = _plane_through(pts)
    return a, b, c, d_off


def signed_height(
    x: float, y: float, u: float, plane, geometry: StereoGeometry, shape
) -> float:
    """Signed distance from the back-projected pixel to the road plane.

    Positive on the normal's side (downward for a y-down road fit); x/y are
    image column/row indices, centered internally.
    """
    a, b, c, d_off = plane
    norm = math.sqrt(a * a + b * b + c * c)
    h, w = shape
    x_c = x - (w - 1) / 2.0
    y_c = y - (h - 1) / 2.0
    bb = geometry.baseline_m
    f = geometry.focal_px
    return (a * x_c * bb + b * y_c * bb + c * f * bb - d_off * u) / (u * norm)


def classify_small_object(
    x: int,
    y: int,
    u: float,
    plane,
    geometry: StereoGeometry,
    s_h: float,
    road_region: np.ndarray,
) -> bool:
    """True iff (x, y) sits in the road region and its back-projection lies
    strictly between the plane and s_h along the plane normal."""
    if u <= 0:
        raise ValueError("disparity must be positive (u == 0 is at infinity)")
    if not road_region[y, x]:
        return False
    height = signed_height(x, y, u, plane, geometry, road_region.shape)
    return 0.0 < height < s_h


def road_region_mask(
    disp: DisparityMap, road: RoadPath | tuple[float, float], tol: float = 1.0
) -> np.ndarray:
    """Pixels whose disparity sits within tol of the road profile at their row."""
    expected = expected_road_disparity(road, disp.height)
    u = disp.disparity.astype(np.float64)
    mask = disp.valid & np.isfinite(expected)[:, None]
    return mask & (np.abs(u - expected[:, None]) <= tol)


def extract_obstacle_rois(
    disp: DisparityMap,
    road: RoadModel,
    u_hist: UDisparity,
    params: RoadObsParams | None = None,
) -> list[RoiBox]:
    """Group obstacle pixels into ROI boxes.

    Obstacle pixels are those clearly above the road plane (beyond the
    small-object band, outside the road region) or those belonging to
    u-disparity column runs of at least min_run pixels.  4-connected
    components become boxes with their mean disparity and metric distance.
    """
    params = params or RoadObsParams()
    h, w = disp.height, disp.width
    u = disp.disparity.astype(np.float64)
    obstacle = np.zeros((h, w), dtype=bool)

    if road.plane is not None:
        profile = road.path if road.path is not None else road.line
        in_road = road_region_mask(disp, profile, params.road_disparity_tol)
        xs_c, ys_c = _centered_grid(h, w)
        a, b, c, d_off = road.plane
        bb = road.geometry.baseline_m
        f = road.geometry.focal_px
        with np.errstate(divide="ignore", invalid="ignore"):
            num = (
                a * xs_c[None, :] * bb
                + b * ys_c[:, None] * bb
                + c * f * bb
                - d_off * u
            )
            height = num / (u * math.sqrt(a * a + b * b + c * c))
        above = disp.valid & (u >= params.min_line_disparity) & ~in_road
        # above-road points sit on the negative (upward) side of a y-down fit
        above &= height < -params.small_object_height
        obstacle |= above

    min_run = max(1, int(round(params.min_run_frac * h)))
    runs = u_hist.counts >= min_run
    runs[: params.min_line_disparity] = False  # past the measurement range
    if runs.any():
        obstacle |= disp.valid & runs[disp.disparity, np.arange(w)[None, :]]

    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    labels, _ = ndimage.label(obstacle, structure=structure)
    boxes: list[RoiBox] = []
    for comp in ndimage.find_objects(labels):
        if comp is None:
            continue
        region = labels[comp] > 0
        if region.sum() < params.min_component_area:
            continue
        mean_u = float(u[comp][region].mean())
        if mean_u <= 0:
            continue
        ysl, xsl = comp
        boxes.append(
            RoiBox(
                x=int(xsl.start),
                y=int(ysl.start),
                w=int(xsl.stop - xsl.start),
                h=int(ysl.stop - ysl.start),
                mean_disparity=mean_u,
                distance=road.geometry.distance_of(mean_u),
            )
        )
    return boxes


def build_road_model(
    disp: DisparityMap, geometry: StereoGeometry, params: RoadObsParams | None = None
) -> RoadModel:
    """Full road stage: v-disparity, Radon line, banded Viterbi path, plane.

    The Radon line seeds the Viterbi search band (its rows +/- radon_band);
    the plane fit consumes the Viterbi path.  Falls back to a line-only
    model when the path or fit degenerates.
    """
    params = params or RoadObsParams()
    v = vdisparity(disp)
    near = VDisparity(v.counts.copy())
    near.counts[: params.min_line_disparity] = 0
    if not near.counts.any():
        near = v  # everything is far: fall back to the raw histogram
    d, phi, score = radon_line(near)
    model = RoadModel((d, phi), geometry, line_score=score)
    sin_p, cos_p = math.sin(phi), math.cos(phi)
    support = np.nonzero(near.counts.any(axis=1))[0]
    if support.size == 0 or abs(sin_p) < 1e-9:
        return model
    i_arr = np.arange(support[0], support[-1] + 1)
    line_rows = (d - i_arr * cos_p) / sin_p
    inside = (line_rows >= -params.radon_band) & (line_rows <= v.rows - 1 + params.radon_band)
    if not inside.any():
        return model
    d_lo = int(i_arr[inside][0])
    d_hi = int(i_arr[inside][-1])
    sel = slice(d_lo - i_arr[0], d_hi - i_arr[0] + 1)
    lo_b = np.clip(np.floor(line_rows[sel] - params.radon_band), 0, v.rows - 1).astype(int)
    hi_b = np.clip(np.ceil(line_rows[sel] + params.radon_band), 0, v.rows - 1).astype(int)
    try:
        path = road_viterbi(near, params.straightness, (d_lo, d_hi), (lo_b, hi_b))
        model.path = path
        model.plane = fit_plane(path, geometry, disp, params.road_disparity_tol)
    except ValueError:
        pass
    return model

"""End-to-end orchestration: configuration, per-frame flow, evaluation.

A frame runs rectify -> multiscale matching -> disparity histograms ->
road model -> obstacle ROIs -> cascade detection.  Sequences may overlap
the matching of frame k+1 with the analysis of frame k (a two-stage
pipeline over an ordered queue); every stage is a pure function of its
frame, so results are identical at any concurrency width.
"""

from __future__ import annotations

import hashlib
import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stereovis.cost import CostParams
from stereovis.imgio import GrayImage, StereoPair, apply_remap, load_image, load_remap_table
from stereovis.multiscale import EvalCounter, MultiscaleParams, run_multiscale_mpv
from stereovis.recog import CascadeModel, DetectorConfig, detect_in_roi
from stereovis.roadobs import (
    RoadModel,
    RoadObsParams,
    StereoGeometry,
    build_road_model,
    extract_obstacle_rois,
    udisparity,
)
from stereovis.viterbi import DisparityMap, PenaltyParams

log = logging.getLogger("stereovis")


@dataclass
class PipelineConfig:
    """All stage parameters plus the camera geometry.

    The focal length may be given in millimeters (with the pixel pitch
    converting it to pixels, as lens datasheets quote it) or directly as
    focal_px, which wins when set.
    """

    d_max: int = 64
    focal_mm: float = 8.0
    pixel_pitch_mm: float = 0.006
    focal_px: float | None = None
    baseline_m: float = 0.12
    concurrency_width: int = 1
    carry_weight: float = 1.0
    model_path: str | None = None
    remap_left: str | None = None
    remap_right: str | None = None
    cost: CostParams = field(default_factory=CostParams)
    penalty: PenaltyParams = field(default_factory=PenaltyParams)
    multiscale: MultiscaleParams = field(default_factory=MultiscaleParams)
    road: RoadObsParams = field(default_factory=RoadObsParams)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        if self.d_max < 1:
            raise ValueError("d_max must be at least 1")
        if not 1 <= self.concurrency_width <= 8:
            raise ValueError("concurrency width must be in [1, 8]")

    @property
    def geometry(self) -> StereoGeometry:
        f = self.focal_px if self.focal_px is not None else self.focal_mm / self.pixel_pitch_mm
        return StereoGeometry(f, self.baseline_m)

    def to_dict(self) -> dict:
        return {
            "d_max": self.d_max,
            "focal_mm": self.focal_mm,
            "pixel_pitch_mm": self.pixel_pitch_mm,
            "focal_px": self.focal_px,
            "baseline_m": self.baseline_m,
            "concurrency_width": self.concurrency_width,
            "carry_weight": self.carry_weight,
            "model_path": self.model_path,
            "remap_left": self.remap_left,
            "remap_right": self.remap_right,
            "cost": {
                "window": self.cost.window,
                "k1": self.cost.k1,
                "k2": self.cost.k2,
                "dynamic_range": self.cost.dynamic_range,
                "alpha": self.cost.alpha,
                "beta": self.cost.beta,
                "gamma": self.cost.gamma,
            },
            "penalty": {
                "lam": self.penalty.lam,
                "occlusion_asymmetry": self.penalty.occlusion_asymmetry,
                "gradient_scale": self.penalty.gradient_scale,
            },
            "multiscale": {
                "block_sizes": list(self.multiscale.block_sizes),
                "carry_weight": self.multiscale.carry_weight,
            },
            "road": {
                "small_object_height": self.road.small_object_height,
                "min_run_frac": self.road.min_run_frac,
                "min_component_area": self.road.min_component_area,
                "straightness": self.road.straightness,
                "radon_band": self.road.radon_band,
                "road_disparity_tol": self.road.road_disparity_tol,
            },
            "detector": {
                "min_size": self.detector.min_size,
                "max_size": self.detector.max_size,
                "growth": self.detector.growth,
                "stride": self.detector.stride,
            },
        }

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        kwargs = {
            k: d[k]
            for k in (
                "d_max",
                "focal_mm",
                "pixel_pitch_mm",
                "focal_px",
                "baseline_m",
                "concurrency_width",
                "carry_weight",
                "model_path",
                "remap_left",
                "remap_right",
            )
            if k in d
        }
        if "cost" in d:
            kwargs["cost"] = CostParams(**d["cost"])
        if "penalty" in d:
            kwargs["penalty"] = PenaltyParams(**d["penalty"])
        if "multiscale" in d:
            ms = dict(d["multiscale"])
            if "block_sizes" in ms:
                ms["block_sizes"] = tuple(ms["block_sizes"])
            kwargs["multiscale"] = MultiscaleParams(**ms)
        if "road" in d:
            kwargs["road"] = RoadObsParams(**d["road"])
        if "detector" in d:
            kwargs["detector"] = DetectorConfig(**d["detector"])
        return PipelineConfig(**kwargs)

    @staticmethod
    def load(path) -> "PipelineConfig":
        return PipelineConfig.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class FrameResult:
    """Everything one frame produces, with per-stage timings in ms."""

    index: int
    disparity: DisparityMap
    road: RoadModel
    rois: list
    detections: list  # dicts: box + distance + source ROI index
    timings: dict
    eval_counter: EvalCounter | None = None

    def __post_init__(self):
        for det in self.detections:
            if det["distance"] <= 0:
                raise ValueError("detection distance must be positive")
            roi = self.rois[det["roi"]]
            inside = (
                det["x"] >= roi.x
                and det["y"] >= roi.y
                and det["x"] + det["w"] <= roi.x + roi.w
                and det["y"] + det["h"] <= roi.y + roi.h
            )
            if not inside:
                raise ValueError("detection box leaves its source ROI")

    def to_record(self, config: PipelineConfig, include_timings: bool = False) -> dict:
        rec = {
            "frame": self.index,
            "config_hash": config.hash(),
            "road": self.road.to_dict(),
            "rois": [r.to_dict() for r in self.rois],
            "detections": self.detections,
        }
        if include_timings:
            rec["timings_ms"] = self.timings
        return rec


@dataclass
class EvalReport:
    """Aggregate disparity-error and timing summary for a sequence."""

    per_image: list
    mean_error_rate: float | None
    timing_means_ms: dict
    skipped: list

    def to_dict(self) -> dict:
        return {
            "per_image": self.per_image,
            "mean_error_rate": self.mean_error_rate,
            "timing_means_ms": self.timing_means_ms,
            "skipped": self.skipped,
        }


def evaluate_disparity(pred: DisparityMap, gt: DisparityMap, tau: float = 3.0) -> float:
    """Fraction of valid GT pixels whose prediction is off by more than tau."""
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ValueError("prediction and ground truth dimensions differ")
    mask = gt.valid
    total = int(mask.sum())
    if total == 0:
        raise ValueError("ground truth has no valid pixels")
    diff = np.abs(pred.disparity.astype(np.float64) - gt.disparity.astype(np.float64))
    bad = int((diff[mask] > tau).sum())
    return bad / total


def write_pfm(path, values: np.ndarray) -> None:
    """Grayscale PFM, little-endian, rows stored bottom-to-top."""
    arr = np.asarray(values, dtype="<f4")
    h, w = arr.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + arr[::-1].tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"Pf":
        raise ValueError(f"{path}: not a grayscale PFM file")
    w, h = (int(t) for t in parts[1].split())
    scale = float(parts[2])
    body = parts[3][: w * h * 4]
    if len(body) != w * h * 4:
        raise ValueError(f"{path}: truncated PFM body")
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(body, dtype=dtype).reshape(h, w)
    return arr[::-1].astype(np.float64)


def disparity_to_image(disp: DisparityMap) -> GrayImage:
    """Lossy 8-bit view of a disparity map, scaled to use the full range."""
    scale = 255.0 / max(disp.d_max, 1)
    view = np.floor(disp.disparity * scale + 0.5).clip(0, 255).astype(np.uint8)
    view[~disp.valid] = 0
    return GrayImage(view)


def pfm_to_disparity(values: np.ndarray, d_max: int) -> DisparityMap:
    """PFM floats to a disparity map; non-finite or <= 0 marks invalid."""
    valid = np.isfinite(values) & (values > 0)
    disp = np.where(valid, np.round(values), 0).astype(np.int32)
    disp = np.clip(disp, 0, d_max)
    return DisparityMap(disp, valid, d_max)


def _rectify(pair: StereoPair, config: PipelineConfig) -> StereoPair:
    if not (config.remap_left and config.remap_right):
        return pair
    left = apply_remap(pair.left, load_remap_table(config.remap_left))
    right = apply_remap(pair.right, load_remap_table(config.remap_right))
    return StereoPair(left, right)


def compute_disparity(pair: StereoPair, config: PipelineConfig) -> tuple[DisparityMap, EvalCounter, dict]:
    """Rectification plus multiscale matching (the pipeline's first stage)."""
    timings = {}
    t0 = time.perf_counter()
    rectified = _rectify(pair, config)
    timings["rectify"] = (time.perf_counter() - t0) * 1000
    t0 = time.perf_counter()
    disp, counter = run_multiscale_mpv(
        rectified,
        config.d_max,
        config.cost,
        config.penalty,
        config.multiscale,
    )
    timings["matching"] = (time.perf_counter() - t0) * 1000
    return disp, counter, timings


def analyze_frame(
    index: int,
    disp: DisparityMap,
    config: PipelineConfig,
    model: CascadeModel | None,
    left: GrayImage,
    counter: EvalCounter | None = None,
    timings: dict | None = None,
) -> FrameResult:
    """Post-disparity stages: road model, ROIs, cascade detection."""
    timings = dict(timings or {})
    t0 = time.perf_counter()
    road = build_road_model(disp, config.geometry, config.road)
    timings["road"] = (time.perf_counter() - t0) * 1000
    t0 = time.perf_counter()
    rois = extract_obstacle_rois(disp, road, udisparity(disp), config.road)
    timings["rois"] = (time.perf_counter() - t0) * 1000
    t0 = time.perf_counter()
    detections = []
    if model is None:
        if rois:
            log.warning("no cascade model configured: reporting ROIs only")
    else:
        for k, roi in enumerate(rois):
            for box in detect_in_roi(left, roi, model, config.detector):
                detections.append(
                    {
                        "x": box.x,
                        "y": box.y,
                        "w": box.w,
                        "h": box.h,
                        "windows": box.windows,
                        "distance": roi.distance,
                        "roi": k,
                    }
                )
    timings["detect"] = (time.perf_counter() - t0) * 1000
    return FrameResult(index, disp, road, rois, detections, timings, counter)


def run_frame(
    pair: StereoPair,
    config: PipelineConfig,
    model: CascadeModel | None = None,
    index: int = 0,
) -> FrameResult:
    """Process one stereo pair through the whole pipeline."""
    disp, counter, timings = compute_disparity(pair, config)
    return analyze_frame(index, disp, config, model, pair.left, counter, timings)


def discover_pairs(input_dir) -> tuple[list, list]:
    """Find NNN_left / NNN_right image pairs; return (pairs, skipped names).

    pairs is a sorted list of (stem, left path, right path, gt path or None).
    """
    directory = Path(input_dir)
    lefts = {}
    rights = {}
    for p in sorted(directory.iterdir()) if directory.is_dir() else []:
        if p.suffix.lower() not in (".pgm", ".png"):
            continue
        if p.stem.endswith("_left"):
            lefts[p.stem[: -len("_left")]] = p
        elif p.stem.endswith("_right"):
            rights[p.stem[: -len("_right")]] = p
    pairs = []
    skipped = sorted(set(lefts) ^ set(rights))
    for stem in sorted(set(lefts) & set(rights)):
        gt = directory / f"{stem}_gt.pfm"
        pairs.append((stem, lefts[stem], rights[stem], gt if gt.is_file() else None))
    return pairs, skipped


def run_sequence(
    input_dir,
    config: PipelineConfig,
    model: CascadeModel | None = None,
    tau: float = 3.0,
) -> tuple[list, EvalReport]:
    """Process every pair in a directory; returns results and a report.

    With concurrency_width > 1 the matcher runs one frame ahead of the
    analysis stage in a worker thread; ordered handoff keeps frame k's
    analysis from ever seeing frame k+1's state.
    """
    pairs, skipped = discover_pairs(input_dir)
    for name in skipped:
        log.warning("unpaired frame skipped: %s", name)
    if not pairs:
        log.warning("no stereo pairs found in %s", input_dir)

    loaded = []
    for stem, lp, rp, gtp in pairs:
        try:
            pair = StereoPair(load_image(lp), load_image(rp))
        except ValueError as exc:
            log.warning("frame %s skipped: %s", stem, exc)
            skipped.append(stem)
            continue
        loaded.append((stem, pair, gtp))

    results = []
    if config.concurrency_width <= 1:
        staged = (
            (i, stem, pair, gtp, compute_disparity(pair, config))
            for i, (stem, pair, gtp) in enumerate(loaded)
        )
    else:
        handoff: queue.Queue = queue.Queue(maxsize=config.concurrency_width - 1)

        def matcher():
            for i, (stem, pair, gtp) in enumerate(loaded):
                handoff.put((i, stem, pair, gtp, compute_disparity(pair, config)))
            handoff.put(None)

        threading.Thread(target=matcher, daemon=True).start()

        def drain():
            while True:
                item = handoff.get()
                if item is None:
                    return
                yield item

        staged = drain()

    per_image = []
    expected = 0
    for i, stem, pair, gtp, (disp, counter, timings) in staged:
        assert i == expected, "pipeline handoff out of order"
        expected += 1
        result = analyze_frame(i, disp, config, model, pair.left, counter, timings)
        results.append(result)
        entry = {"name": stem, "detections": len(result.detections)}
        if gtp is not None:
            gt = pfm_to_disparity(read_pfm(gtp), config.d_max)
            entry["error_rate"] = evaluate_disparity(disp, gt, tau)
        per_image.append(entry)

    rates = [e["error_rate"] for e in per_image if "error_rate" in e]
    stage_names = set()
    for r in results:
        stage_names.update(r.timings)
    timing_means = {
        s: float(np.mean([r.timings[s] for r in results if s in r.timings]))
        for s in sorted(stage_names)
    }
    report = EvalReport(
        per_image=per_image,
        mean_error_rate=float(np.mean(rates)) if rates else None,
        timing_means_ms=timing_means,
        skipped=sorted(skipped),
    )
    return results, report

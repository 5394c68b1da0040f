"""ROI target recognition: LBP features, Gentle AdaBoost, staged cascade.

Candidate windows are normalized to a fixed 24x24 patch, described by
concatenated per-cell histograms of local binary pattern codes (gray-shift
invariant by construction), and pushed through an ordered cascade of
boosted depth-limited regression trees.  Early stages reject most negative
windows after very little work; only survivors reach the later, costlier
stages.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stereovis.imgio import GrayImage, load_image, resize_bilinear

PATCH_SIZE = 24
CELL_GRID = 3


class TrainingError(RuntimeError):
    """Cascade training cannot proceed (degenerate or irreducible data)."""


@dataclass
class LbpParams:
    """Neighbor count and sampling radius of the LBP operator."""

    p: int = 8
    r: float = 1.0

    def __post_init__(self):
        if self.p not in (8, 16):
            raise ValueError("neighbor count must be 8 or 16")
        if self.r < 1:
            raise ValueError("radius must be at least 1")

    def offsets(self) -> list[tuple[float, float]]:
        """(dx, dy) per neighbor, starting east and going counter-clockwise
        (y grows downward, so counter-clockwise means dy = -sin)."""
        out = []
        for k in range(self.p):
            theta = 2.0 * math.pi * k / self.p
            out.append((round(self.r * math.cos(theta), 9), round(-self.r * math.sin(theta), 9)))
        return out


def lbp_code(img: GrayImage, x: int, y: int, params: LbpParams | None = None) -> int:
    """LBP code of one pixel: bit k set iff neighbor_k - center >= 0.

    Neighbors sample a radius-r circle with bilinear interpolation.  Border
    pixels whose neighborhood leaves the image are rejected.
    """
    params = params or LbpParams()
    margin = int(math.ceil(params.r))
    if not (margin <= x < img.width - margin and margin <= y < img.height - margin):
        raise ValueError(f"pixel ({x}, {y}) too close to the border for radius {params.r}")
    px = img.pixels.astype(np.float64)
    h, w = px.shape
    center = px[y, x]
    code = 0
    for k, (dx, dy) in enumerate(params.offsets()):
        xs, ys = x + dx, y + dy
        x0, y0 = int(math.floor(xs)), int(math.floor(ys))
        fx, fy = xs - x0, ys - y0
        x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)  # weight 0 when frac is 0
        val = (
            px[y0, x0] * (1 - fx) * (1 - fy)
            + px[y0, x1] * fx * (1 - fy)
            + px[y1, x0] * (1 - fx) * fy
            + px[y1, x1] * fx * fy
        )
        if val - center >= 0:
            code |= 1 << k
    return code


def lbp_code_map(img: GrayImage, params: LbpParams | None = None) -> np.ndarray:
    """Codes for every interior pixel (shape (h - 2*margin, w - 2*margin)).

    Vectorized over the image: each neighbor direction is one interpolated
    array shift.
    """
    params = params or LbpParams()
    margin = int(math.ceil(params.r))
    px = img.pixels.astype(np.float64)
    h, w = px.shape
    if h <= 2 * margin or w <= 2 * margin:
        raise ValueError("image too small for the LBP radius")
    center = px[margin : h - margin, margin : w - margin]
    codes = np.zeros(center.shape, dtype=np.int64)
    for k, (dx, dy) in enumerate(params.offsets()):
        x0, y0 = int(math.floor(dx)), int(math.floor(dy))
        fx, fy = dx - x0, dy - y0
        ys = margin + y0
        xs = margin + x0
        he, we = center.shape

        def shifted(oy, ox):
            return px[ys + oy : ys + oy + he, xs + ox : xs + ox + we]

        val = shifted(0, 0) * (1 - fx) * (1 - fy)
        if fx:
            val += shifted(0, 1) * fx * (1 - fy)
        if fy:
            val += shifted(1, 0) * (1 - fx) * fy
        if fx and fy:
            val += shifted(1, 1) * fx * fy
        codes |= (val - center >= 0).astype(np.int64) << k
    return codes


def feature_length(params: LbpParams | None = None) -> int:
    params = params or LbpParams()
    return CELL_GRID * CELL_GRID * (1 << params.p)


def extract_features(window: GrayImage, params: LbpParams | None = None) -> np.ndarray:
    """Feature vector of a window: rescale to 24x24, LBP codes over the
    interior, one 2^p-bin histogram per cell of a 3x3 grid, concatenated.

    Adding a constant to all pixels (without clipping) leaves the vector
    unchanged.
    """
    params = params or LbpParams()
    if window.width < 2 or window.height < 2:
        raise ValueError("degenerate window")
    patch = window
    if (window.width, window.height) != (PATCH_SIZE, PATCH_SIZE):
        patch = resize_bilinear(window, PATCH_SIZE, PATCH_SIZE)
    margin = int(math.ceil(params.r))
    codes = lbp_code_map(patch, params)
    bins = 1 << params.p
    cell = PATCH_SIZE // CELL_GRID
    feats = np.zeros(CELL_GRID * CELL_GRID * bins, dtype=np.float64)
    ys, xs = np.mgrid[0 : codes.shape[0], 0 : codes.shape[1]]
    cell_idx = ((ys + margin) // cell) * CELL_GRID + (xs + margin) // cell
    np.add.at(feats, cell_idx.ravel() * bins + codes.ravel(), 1.0)
    return feats


@dataclass
class WeakClassifier:
    """Depth-limited regression tree with real-valued leaves, plus its
    combination weight (1.0 under Gentle AdaBoost).

    Nodes live in parallel arrays; children indices of -1 mark leaves.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.value)):
            raise ValueError("leaf values must be finite")

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        node = np.zeros(X.shape[0], dtype=np.int64)
        # depth is tiny, walk all samples level by level
        for _ in range(8):
            at_leaf = self.left[node] < 0
            if at_leaf.all():
                break
            go = ~at_leaf
            cols = self.feature[node[go]]
            below = X[np.nonzero(go)[0], cols] <= self.threshold[node[go]]
            nxt = np.where(below, self.left[node[go]], self.right[node[go]])
            node[go] = nxt
        return self.weight * self.value[node]

    def depth(self) -> int:
        def walk(i):
            if self.left[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "weight": self.weight,
        }

    @staticmethod
    def from_dict(d: dict) -> "WeakClassifier":
        return WeakClassifier(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=np.float64),
            float(d["weight"]),
        )


def _best_split(X, targets, weights, rows):
    """Best weighted-SSE split over all features for the given sample rows.

    Returns (gain, feature, threshold) or None if nothing splits.
    """
    Xs = X[rows]
    t = targets[rows]
    w = weights[rows]
    n = len(rows)
    if n < 2 or np.all(t == t[0]):
        return None
    total_w = w.sum()
    total_wy = (w * t).sum()

    order = np.argsort(Xs, axis=0, kind="stable")
    xs_sorted = np.take_along_axis(Xs, order, axis=0)
    w_sorted = w[order]
    wy_sorted = (w * t)[order]

    cw = np.cumsum(w_sorted, axis=0)
    cwy = np.cumsum(wy_sorted, axis=0)
    # candidate split after position i (left = [0..i]); skip value ties
    left_w = cw[:-1]
    left_wy = cwy[:-1]
    right_w = total_w - left_w
    right_wy = total_wy - left_wy
    valid = (xs_sorted[:-1] < xs_sorted[1:]) & (left_w > 0) & (right_w > 0)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        score = left_wy**2 / left_w + right_wy**2 / right_w
    score[~valid] = -np.inf
    # zero-gain splits are allowed on impure nodes: a deeper level may
    # separate what one threshold cannot (the XOR case)
    pos, feat = np.unravel_index(np.argmax(score), score.shape)
    gain = score[pos, feat] - total_wy * total_wy / total_w
    thr = 0.5 * (xs_sorted[pos, feat] + xs_sorted[pos + 1, feat])
    return float(gain), int(feat), float(thr)


def fit_regression_tree(
    X: np.ndarray, targets: np.ndarray, weights: np.ndarray, max_depth: int
) -> WeakClassifier:
    """Greedy weighted least-squares tree of depth <= max_depth."""
    feature, threshold, left, right, value = [], [], [], [], []

    def leaf_value(rows):
        w = weights[rows]
        return float((w * targets[rows]).sum() / w.sum())

    def grow(rows, depth):
        idx = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(leaf_value(rows))
        if depth >= max_depth:
            return idx
        split = _best_split(X, targets, weights, rows)
        if split is None:
            return idx
        _, f, thr = split
        mask = X[rows, f] <= thr
        feature[idx] = f
        threshold[idx] = thr
        left[idx] = grow(rows[mask], depth + 1)
        right[idx] = grow(rows[~mask], depth + 1)
        return idx

    grow(np.arange(X.shape[0]), 0)
    return WeakClassifier(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=np.float64),
    )


def train_gentle_adaboost(
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
    max_depth: int = 2,
    rounds: int = 20,
) -> list[WeakClassifier]:
    """Gentle AdaBoost: each round fits a regression tree to the +/-1 labels
    under the current weights and reweights by exp(-y * h(x)).

    The weighted 0/1 training error of the running strong classifier is
    kept non-increasing: a round that would raise it is dropped and
    boosting stops there.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    classes = np.unique(y)
    if not np.array_equal(classes, [-1.0, 1.0]):
        if classes.size < 2:
            raise TrainingError("both classes must be present in the training set")
        raise ValueError("labels must be -1/+1")
    base_w = np.full(len(y), 1.0 / len(y)) if weights is None else np.asarray(weights, float)
    base_w = base_w / base_w.sum()
    w = base_w.copy()
    ensemble: list[WeakClassifier] = []
    scores = np.zeros(len(y))

    def weighted_error(s):
        predicted = np.where(s >= 0, 1.0, -1.0)
        return float(base_w[predicted != y].sum())

    prev_err = weighted_error(scores)
    for _ in range(rounds):
        tree = fit_regression_tree(X, y, w, max_depth)
        h = tree.predict(X)
        new_scores = scores + h
        err = weighted_error(new_scores)
        if err > prev_err + 1e-12:
            break
        ensemble.append(tree)
        scores = new_scores
        prev_err = err
        w = w * np.exp(-y * h)
        total = w.sum()
        if total <= 0 or not np.isfinite(total):
            break
        w /= total
        if prev_err == 0.0:
            break
    if not ensemble:
        raise TrainingError("no weak classifier reduced the weighted error")
    return ensemble


@dataclass
class CascadeStage:
    classifiers: list
    threshold: float
    false_alarm: float = 1.0
    hit_rate: float = 1.0

    def score(self, feats: np.ndarray) -> np.ndarray:
        feats2d = np.atleast_2d(feats)
        total = np.zeros(feats2d.shape[0])
        for clf in self.classifiers:
            total += clf.predict(feats2d)
        return total


@dataclass
class CascadeConfig:
    stages: int = 17
    max_depth: int = 2
    max_false_alarm: float = 0.5
    min_hit_rate: float = 0.99
    max_rounds_per_stage: int = 25
    mining_attempts: int = 40

    def __post_init__(self):
        if not (0 < self.max_false_alarm <= 1 and 0 < self.min_hit_rate <= 1):
            raise ValueError("rates must lie in (0, 1]")


@dataclass
class CascadeModel:
    """Ordered rejection stages over LBP feature vectors."""

    stages: list
    lbp: LbpParams = field(default_factory=LbpParams)
    config: CascadeConfig = field(default_factory=CascadeConfig)

    def classify_features(self, feats: np.ndarray) -> tuple[bool, int]:
        evaluated = 0
        for stage in self.stages:
            evaluated += 1
            if stage.score(feats)[0] < stage.threshold:
                return False, evaluated
        return True, evaluated

    def to_dict(self) -> dict:
        return {
            "format": "stereovis-cascade",
            "version": 1,
            "lbp": {"p": self.lbp.p, "r": self.lbp.r},
            "config": {
                "stages": self.config.stages,
                "max_depth": self.config.max_depth,
                "max_false_alarm": self.config.max_false_alarm,
                "min_hit_rate": self.config.min_hit_rate,
            },
            "stages": [
                {
                    "threshold": s.threshold,
                    "false_alarm": s.false_alarm,
                    "hit_rate": s.hit_rate,
                    "weak": [c.to_dict() for c in s.classifiers],
                }
                for s in self.stages
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "CascadeModel":
        if d.get("format") != "stereovis-cascade" or d.get("version") != 1:
            raise ValueError("not a recognizable cascade model file")
        cfg = CascadeConfig(
            stages=d["config"]["stages"],
            max_depth=d["config"]["max_depth"],
            max_false_alarm=d["config"]["max_false_alarm"],
            min_hit_rate=d["config"]["min_hit_rate"],
        )
        stages = [
            CascadeStage(
                [WeakClassifier.from_dict(c) for c in s["weak"]],
                s["threshold"],
                s.get("false_alarm", 1.0),
                s.get("hit_rate", 1.0),
            )
            for s in d["stages"]
        ]
        return CascadeModel(stages, LbpParams(d["lbp"]["p"], d["lbp"]["r"]), cfg)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @staticmethod
    def load(path) -> "CascadeModel":
        return CascadeModel.from_dict(json.loads(Path(path).read_text()))


def cascade_classify(window: GrayImage, model: CascadeModel) -> tuple[bool, int]:
    """Run a window through the cascade: reject at the first stage whose
    weighted sum falls below its threshold; report stages evaluated."""
    feats = extract_features(window, model.lbp)
    return model.classify_features(feats)


def _stage_threshold(pos_scores: np.ndarray, min_hit: float) -> float:
    """Largest threshold admitting at least min_hit of the positives."""
    s = np.sort(pos_scores)
    cut = int(math.floor((1.0 - min_hit) * len(s)))
    return float(s[cut])


def train_cascade_features(
    pos: np.ndarray,
    neg: np.ndarray,
    config: CascadeConfig | None = None,
    mine_negatives=None,
    lbp: LbpParams | None = None,
) -> CascadeModel:
    """Train the staged cascade on feature vectors.

    Stage k trains on all positives plus the negatives surviving stages
    1..k-1; fresh negatives are mined through ``mine_negatives(count)``
    (returning feature rows) when the survivor pool drains.  Training stops
    early, with the stages completed so far, once no negatives remain.
    """
    config = config or CascadeConfig()
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise TrainingError("both corpora must be non-empty")
    target_neg = len(neg)
    stages: list[CascadeStage] = []
    model = CascadeModel(stages, lbp or LbpParams(), config)

    def survives_all(feats: np.ndarray) -> np.ndarray:
        keep = np.ones(len(feats), dtype=bool)
        for stage in stages:
            if not keep.any():
                break
            keep[keep] = stage.score(feats[keep]) >= stage.threshold
        return keep

    min_neg = max(5, target_neg // 20)
    for _ in range(config.stages):
        if len(neg) < min_neg:
            break  # starved negative pool only yields brittle stages
        X = np.vstack([pos, neg])
        y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
        ensemble: list[WeakClassifier] = []
        w = np.full(len(y), 1.0 / len(y))
        scores = np.zeros(len(y))
        stage_done = False
        for _ in range(config.max_rounds_per_stage):
            tree = fit_regression_tree(X, y, w, config.max_depth)
            h = tree.predict(X)
            ensemble.append(tree)
            scores += h
            w = w * np.exp(-y * h)
            w /= w.sum()
            thr = _stage_threshold(scores[: len(pos)], config.min_hit_rate)
            fa = float(np.mean(scores[len(pos) :] >= thr))
            hit = float(np.mean(scores[: len(pos)] >= thr))
            if fa <= config.max_false_alarm:
                stage = CascadeStage(ensemble, thr, fa, hit)
                stage_done = True
                break
        if not stage_done:
            raise TrainingError(
                f"stage {len(stages) + 1}: false alarm {fa:.3f} stuck above "
                f"{config.max_false_alarm} after {config.max_rounds_per_stage} "
                "rounds (irreducible training set?)"
            )
        stages.append(stage)
        neg = neg[scores[len(pos) :] >= stage.threshold]
        if mine_negatives is not None and len(neg) < target_neg:
            for _ in range(config.mining_attempts):
                if len(neg) >= target_neg:
                    break
                fresh = np.atleast_2d(mine_negatives(target_neg))
                keep = survives_all(fresh)
                if keep.any():
                    neg = np.vstack([neg, fresh[keep]]) if len(neg) else fresh[keep]
            neg = neg[:target_neg]
    return model


def _load_corpus(directory) -> list:
    paths = sorted(
        p for p in Path(directory).iterdir() if p.suffix.lower() in (".pgm", ".png")
    )
    if not paths:
        raise TrainingError(f"no PGM/PNG images in {directory}")
    return [load_image(p) for p in paths]


def train_cascade(
    pos_dir,
    neg_dir,
    config: CascadeConfig | None = None,
    lbp: LbpParams | None = None,
    mining_seed: int = 0,
) -> CascadeModel:
    """Train from two directories of window images (positives/negatives).

    Later stages bootstrap fresh negatives as random square sub-crops of
    the negative images, filtered through the stages trained so far.
    """
    lbp = lbp or LbpParams()
    neg_imgs = _load_corpus(neg_dir)
    pos = np.stack([extract_features(im, lbp) for im in _load_corpus(pos_dir)])
    neg = np.stack([extract_features(im, lbp) for im in neg_imgs])
    rng = np.random.default_rng(mining_seed)

    def mine(count):
        crops = []
        for _ in range(count):
            im = neg_imgs[int(rng.integers(0, len(neg_imgs)))]
            max_side = min(im.width, im.height)
            side = int(rng.integers(PATCH_SIZE, max_side + 1)) if max_side > PATCH_SIZE else max_side
            x0 = int(rng.integers(0, im.width - side + 1))
            y0 = int(rng.integers(0, im.height - side + 1))
            window = GrayImage(im.pixels[y0 : y0 + side, x0 : x0 + side])
            crops.append(extract_features(window, lbp))
        return np.stack(crops)

    return train_cascade_features(pos, neg, config, mine_negatives=mine, lbp=lbp)


@dataclass
class DetectorConfig:
    """Window sweep: square sizes from min to max growing by the given rate."""

    min_size: int = 30
    max_size: int = 90
    growth: float = 1.3
    stride: int = 4

    def __post_init__(self):
        if self.min_size > self.max_size:
            raise ValueError("min window must not exceed max window")
        if self.growth <= 1:
            raise ValueError("growth rate must exceed 1")
        if self.stride < 1:
            raise ValueError("stride must be positive")

    def window_sizes(self) -> list[int]:
        sizes = []
        s = float(self.min_size)
        while round(s) <= self.max_size:
            sizes.append(int(round(s)))
            s = round(s) * self.growth
        return sizes


@dataclass
class DetectionBox:
    x: int
    y: int
    w: int
    h: int
    windows: int = 1

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h, "windows": self.windows}


def _overlap_over_smaller(a, b) -> float:
    ix = max(0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    smaller = min(a[2] * a[3], b[2] * b[3])
    return inter / smaller if smaller else 0.0


def merge_detections(boxes: list, min_overlap: float = 0.5) -> list[DetectionBox]:
    """Group boxes by >= min_overlap intersection-over-smaller and emit one
    averaged box per group."""
    n = len(boxes)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if _overlap_over_smaller(boxes[i], boxes[j]) >= min_overlap:
                parent[find(i)] = find(j)
    groups: dict[int, list] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(boxes[i])
    merged = []
    for members in groups.values():
        arr = np.asarray(members, dtype=np.float64)
        x, y, w, h = arr.mean(axis=0)
        merged.append(DetectionBox(int(round(x)), int(round(y)), int(round(w)), int(round(h)), len(members)))
    merged.sort(key=lambda b: (b.y, b.x))
    return merged


def detect_in_roi(
    img: GrayImage,
    roi,
    model: CascadeModel,
    config: DetectorConfig | None = None,
) -> list[DetectionBox]:
    """Sweep square windows over an ROI and merge cascade acceptances.

    ROIs smaller than the minimum window give an empty list.
    """
    config = config or DetectorConfig()
    x0 = max(0, roi.x)
    y0 = max(0, roi.y)
    x1 = min(img.width, roi.x + roi.w)
    y1 = min(img.height, roi.y + roi.h)
    accepted = []
    for size in config.window_sizes():
        if size > x1 - x0 or size > y1 - y0:
            continue
        xs = list(range(x0, x1 - size + 1, config.stride))
        ys = list(range(y0, y1 - size + 1, config.stride))
        if xs and xs[-1] != x1 - size:
            xs.append(x1 - size)
        if ys and ys[-1] != y1 - size:
            ys.append(y1 - size)
        for wy in ys:
            for wx in xs:
                window = GrayImage(img.pixels[wy : wy + size, wx : wx + size])
                ok, _ = cascade_classify(window, model)
                if ok:
                    accepted.append((wx, wy, size, size))
    return merge_detections(accepted)

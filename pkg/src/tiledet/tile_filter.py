"""Tile filtering: color-histogram features and a linear SVM gate.

Before a tile reaches the detector it is summarized as a concatenated
per-channel color histogram and classified as target / background. The
classifier is a linear SVM trained by seeded, epoch-shuffled subgradient
descent on the L2-regularized hinge loss, so training is exactly
reproducible and inference costs one dot product per tile.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tiling import TileGridSpec, assign_gt_to_tile, crop_tile, plan_tiles

MODEL_FORMAT = "tiledet-svm/1"


class ModelFormatError(ValueError):
    """Raised for unreadable or internally inconsistent model files."""


@dataclass(frozen=True)
class HistogramConfig:
    """Equal-width per-channel histogram over 8-bit values, R,G,B order."""

    bins_per_channel: int = 32

    def __post_init__(self) -> None:
        if self.bins_per_channel < 2:
            raise ValueError(f"need at least 2 bins per channel: {self.bins_per_channel}")

    @property
    def dim(self) -> int:
        return 3 * self.bins_per_channel


@dataclass(frozen=True)
class FilterSample:
    feature: np.ndarray
    positive: bool  # True when the tile contains a target


@dataclass
class FilterDataset:
    """Feature matrix plus labels for one split of the filter dataset."""

    features: np.ndarray  # (n, dim) float64
    labels: np.ndarray  # (n,) bool, True = positive
    hist_config: HistogramConfig

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def positives(self) -> int:
        return int(self.labels.sum())

    def samples(self) -> list[FilterSample]:
        return [FilterSample(f, bool(l)) for f, l in zip(self.features, self.labels)]

    def save(self, directory: str | Path, name: str) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / f"{name}_features.npy", self.features)
        np.save(directory / f"{name}_labels.npy", self.labels)

    @classmethod
    def load(cls, directory: str | Path, name: str, hist_config: HistogramConfig) -> "FilterDataset":
        directory = Path(directory)
        features = np.load(directory / f"{name}_features.npy")
        labels = np.load(directory / f"{name}_labels.npy")
        if features.ndim != 2 or features.shape[0] != labels.shape[0]:
            raise ModelFormatError(f"inconsistent arrays in {directory}/{name}")
        if features.shape[1] != hist_config.dim:
            raise ModelFormatError(
                f"feature dim {features.shape[1]} does not match {hist_config.dim}"
            )
        return cls(features, labels.astype(bool), hist_config)


@dataclass
class TrainingInfo:
    epochs: int
    regularization: float
    seed: int
    train_accuracy: float
    epoch_objectives: list[float] = field(default_factory=list)


@dataclass
class LinearSvmModel:
    weights: np.ndarray
    bias: float
    hist_config: HistogramConfig
    training: TrainingInfo

    def __post_init__(self) -> None:
        if self.weights.shape != (self.hist_config.dim,):
            raise ModelFormatError(
                f"weight dim {self.weights.shape} does not match histogram dim {self.hist_config.dim}"
            )
        if not np.all(np.isfinite(self.weights)) or not np.isfinite(self.bias):
            raise ModelFormatError("non-finite model parameters")


def histogram_feature(tile_raster: np.ndarray, cfg: HistogramConfig) -> np.ndarray:
    """Concatenated, per-channel L1-normalized color histogram of a raster.

    Value v lands in bin min(floor(v * bins / 256), bins - 1); each channel
    segment is divided by the pixel count so it sums to one.
    """
    if tile_raster.size == 0:
        raise ValueError("empty raster has no histogram")
    if tile_raster.ndim != 3 or tile_raster.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 raster, got shape {tile_raster.shape}")
    bins = cfg.bins_per_channel
    pixels = tile_raster.reshape(-1, 3).astype(np.int64)
    bin_idx = np.minimum(pixels * bins // 256, bins - 1)
    n = pixels.shape[0]
    segments = [np.bincount(bin_idx[:, c], minlength=bins).astype(np.float64) / n for c in range(3)]
    return np.concatenate(segments)


def build_filter_dataset(
    manifest,
    images_root: str | Path,
    grid: TileGridSpec,
    min_visible_ratio: float = 0.5,
    seed: int = 0,
    holdout_fraction: float = 0.2,
    hist_config: HistogramConfig = HistogramConfig(),
) -> tuple[FilterDataset, FilterDataset]:
    """Build balanced train/held-out tile sets from an annotated image set.

    Every tile of every image is labeled positive when it shows at least
    min_visible_ratio of some ground-truth box. Images are split into a
    train and a held-out part first (seeded, image-level, so tiles of one
    image never straddle the split); within each part all positives are
    kept and the larger side is uniformly subsampled without replacement
    until the positive:negative ratio is exactly 1:1.
    """
    from .data_io import load_raster  # local import, data_io depends on tiling too

    if not 0.0 <= holdout_fraction < 1.0:
        raise ValueError(f"holdout_fraction must be in [0, 1): {holdout_fraction}")
    if not manifest.images:
        raise ValueError("empty manifest")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(manifest.images))
    n_holdout = int(round(holdout_fraction * len(manifest.images)))
    holdout_idx = set(int(i) for i in order[:n_holdout])

    parts: dict[str, list[tuple[np.ndarray, bool]]] = {"train": [], "holdout": []}
    root = Path(images_root)
    for idx, record in enumerate(manifest.images):
        part = "holdout" if idx in holdout_idx else "train"
        raster = load_raster(root / record.path)
        gts = manifest.annotations_for(record.image_id)
        for tile in plan_tiles(record.width, record.height, grid):
            positive = bool(assign_gt_to_tile(tile, gts, min_visible_ratio))
            feature = histogram_feature(crop_tile(raster, tile), hist_config)
            parts[part].append((feature, positive))

    return (
        _balance(parts["train"], rng, hist_config),
        _balance(parts["holdout"], rng, hist_config, allow_empty=not parts["holdout"]),
    )


def _balance(
    samples: list[tuple[np.ndarray, bool]],
    rng: np.random.Generator,
    hist_config: HistogramConfig,
    allow_empty: bool = False,
) -> FilterDataset:
    if not samples and allow_empty:
        return FilterDataset(
            np.zeros((0, hist_config.dim)), np.zeros(0, dtype=bool), hist_config
        )
    pos = [i for i, (_, p) in enumerate(samples) if p]
    neg = [i for i, (_, p) in enumerate(samples) if not p]
    if not pos:
        raise ValueError("no tile contains a target; cannot build a filter dataset")
    if not neg:
        raise ValueError("every tile contains a target; no negatives to balance against")
    count = min(len(pos), len(neg))
    if len(pos) > count:
        pos = [pos[i] for i in sorted(rng.choice(len(pos), size=count, replace=False))]
    if len(neg) > count:
        neg = [neg[i] for i in sorted(rng.choice(len(neg), size=count, replace=False))]
    chosen = sorted(pos + neg)
    features = np.stack([samples[i][0] for i in chosen])
    labels = np.array([samples[i][1] for i in chosen], dtype=bool)
    return FilterDataset(features, labels, hist_config)


def hinge_objective(
    features: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, lam: float
) -> float:
    """(lam/2)*||w||^2 + mean hinge loss over the set."""
    margins = y * (features @ w + b)
    return 0.5 * lam * float(w @ w) + float(np.maximum(0.0, 1.0 - margins).mean())


def svm_train(
    dataset: FilterDataset,
    regularization: float = 1e-4,
    epochs: int = 100,
    seed: int = 0,
) -> LinearSvmModel:
    """Train a linear SVM by seeded epoch-shuffled subgradient descent.

    Step size 1/(lam * t) with t counting individual updates; the bias
    follows the hinge subgradient and is not regularized. Same samples and
    seed give a bitwise-identical model. epoch_objectives records the full
    objective at the running average of all iterates so far (the averaged
    iterate is the convergent sequence for this solver), evaluated at each
    epoch end; the returned parameters are the final iterate.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    labels = dataset.labels
    if labels.all() or not labels.any():
        raise ValueError("training needs both positive and negative samples")
    features = np.asarray(dataset.features, dtype=np.float64)
    if features.shape[1] != dataset.hist_config.dim:
        raise ValueError(
            f"feature dim {features.shape[1]} does not match histogram dim {dataset.hist_config.dim}"
        )
    y = np.where(labels, 1.0, -1.0)
    lam = float(regularization)
    rng = np.random.default_rng(seed)

    w = np.zeros(features.shape[1])
    b = 0.0
    t = 0
    w_avg = np.zeros_like(w)
    b_avg = 0.0
    objectives: list[float] = []
    for _ in range(epochs):
        for i in rng.permutation(len(y)):
            t += 1
            eta = 1.0 / (lam * t)
            x = features[i]
            if y[i] * (x @ w + b) < 1.0:
                w = (1.0 - eta * lam) * w + eta * y[i] * x
                b = b + eta * y[i]
            else:
                w = (1.0 - eta * lam) * w
            w_avg += w
            b_avg += b
        objectives.append(hinge_objective(features, y, w_avg / t, b_avg / t, lam))

    predictions = (features @ w + b) >= 0.0
    accuracy = float((predictions == labels).mean())
    return LinearSvmModel(
        weights=w,
        bias=float(b),
        hist_config=dataset.hist_config,
        training=TrainingInfo(epochs, lam, seed, accuracy, objectives),
    )


def svm_predict(
    model: LinearSvmModel, feature: np.ndarray, bias_offset: float = 0.0
) -> tuple[bool, float]:
    """Classify one feature vector.

    Returns (label, margin) where margin = w.x + b; the label is positive
    when margin + bias_offset >= 0. A positive bias_offset trades precision
    for recall.
    """
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != model.weights.shape:
        raise ValueError(f"feature shape {feature.shape} does not match model {model.weights.shape}")
    margin = float(model.weights @ feature + model.bias)
    return margin + bias_offset >= 0.0, margin


@dataclass(frozen=True)
class FilterMetrics:
    accuracy: float
    precision: float
    recall: float
    tp: int
    fp: int
    tn: int
    fn: int


def filter_eval(
    model: LinearSvmModel, dataset: FilterDataset, bias_offset: float = 0.0
) -> FilterMetrics:
    """Binary-classification metrics on a held-out set (recall on positives)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    margins = dataset.features @ model.weights + model.bias + bias_offset
    predicted = margins >= 0.0
    actual = dataset.labels
    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    tn = int(np.sum(~predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    return FilterMetrics(
        accuracy=(tp + tn) / len(dataset),
        precision=tp / (tp + fp) if tp + fp else 0.0,
        recall=tp / (tp + fn) if tp + fn else 0.0,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
    )


def model_fingerprint(model: LinearSvmModel) -> str:
    """Content fingerprint of the model parameters (not the file bytes)."""
    import hashlib

    h = hashlib.sha256()
    h.update(str(model.hist_config.bins_per_channel).encode())
    h.update(np.ascontiguousarray(model.weights).tobytes())
    h.update(repr(model.bias).encode())
    return h.hexdigest()[:16]


def save_model(model: LinearSvmModel, path: str | Path) -> None:
    """Write a model as a self-describing JSON document (exact round trip)."""
    doc = {
        "format": MODEL_FORMAT,
        "histogram": {"bins_per_channel": model.hist_config.bins_per_channel},
        "weights": [float(v) for v in model.weights],
        "bias": model.bias,
        "training": {
            "epochs": model.training.epochs,
            "regularization": model.training.regularization,
            "seed": model.training.seed,
            "train_accuracy": model.training.train_accuracy,
            "epoch_objectives": model.training.epoch_objectives,
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_model(path: str | Path) -> LinearSvmModel:
    """Load a model file, validating format and internal consistency."""
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"unreadable model file {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"{path} is not a {MODEL_FORMAT} document")
    try:
        hist = HistogramConfig(bins_per_channel=int(doc["histogram"]["bins_per_channel"]))
        weights = np.array(doc["weights"], dtype=np.float64)
        bias = float(doc["bias"])
        tr = doc["training"]
        training = TrainingInfo(
            epochs=int(tr["epochs"]),
            regularization=float(tr["regularization"]),
            seed=int(tr["seed"]),
            train_accuracy=float(tr["train_accuracy"]),
            epoch_objectives=[float(v) for v in tr.get("epoch_objectives", [])],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model file {path}: {exc}") from exc
    if weights.ndim != 1 or weights.shape[0] != hist.dim:
        raise ModelFormatError(
            f"{path}: weight dim {weights.shape} does not match {hist.bins_per_channel} bins/channel"
        )
    return LinearSvmModel(weights=weights, bias=bias, hist_config=hist, training=training)

"""Pixel and image scorers, score-map ingestion and KNN estimation of tau.

Both scorers are L2-regularised logistic regressions on hand-built
difference features.  Features are standardised with statistics taken
from the training set, which keeps full-batch gradient descent well
conditioned without a learning-rate search.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import map_coordinates, uniform_filter
from scipy.special import expit

from .types import SQRT3, ImagePair, difference_map

N_PIXEL_FEATURES = 7
N_IMAGE_FEATURES = 43
GRID = 4
HIST_BINS = 8
# bins are denser near zero where most differences live
HIST_EDGES = SQRT3 * (np.arange(HIST_BINS + 1) / HIST_BINS) ** 2
P_CLAMP = 1e-6
TAU_CLAMP = (0.01, 0.99)


def _gray(image: np.ndarray) -> np.ndarray:
    return image.mean(axis=2)


def _grad_magnitude(gray: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(gray)
    return np.hypot(gx, gy)


def _local_stats(delta: np.ndarray, size: int = 5) -> tuple[np.ndarray, np.ndarray]:
    # windows are truncated at the border, so every mean uses real pixels only
    count = uniform_filter(np.ones_like(delta), size, mode="constant")
    mean = uniform_filter(delta, size, mode="constant") / count
    sq = uniform_filter(delta**2, size, mode="constant") / count
    return mean, np.sqrt(np.maximum(sq - mean**2, 0.0))


def pixel_features(pair: ImagePair) -> np.ndarray:
    """Per-pixel difference features, shape (m, 7), row-major.

    Columns: |dr|, |dg|, |db|, delta, 5x5 mean of delta, 5x5 std of delta,
    absolute difference of grayscale gradient magnitudes.
    """
    a, b = pair.image_a, pair.image_b
    absdiff = np.abs(a - b)
    delta = difference_map(pair)
    mean, std = _local_stats(delta)
    grad = np.abs(_grad_magnitude(_gray(a)) - _grad_magnitude(_gray(b)))
    cols = [absdiff[..., 0], absdiff[..., 1], absdiff[..., 2], delta, mean, std, grad]
    return np.stack([c.ravel() for c in cols], axis=1)


def image_features(pair: ImagePair) -> np.ndarray:
    """Global descriptor of length 43.

    4x4 grid means of delta (16), grid maxima (16), the fraction of pixels
    in each of 8 delta bins (8) and the mean absolute difference per
    channel (3).
    """
    delta = difference_map(pair)
    h, w = delta.shape
    rows = np.array_split(np.arange(h), GRID)
    cols = np.array_split(np.arange(w), GRID)
    means, maxes = [], []
    for r in rows:
        for c in cols:
            cell = delta[np.ix_(r, c)]
            means.append(cell.mean() if cell.size else 0.0)
            maxes.append(cell.max() if cell.size else 0.0)
    hist, _ = np.histogram(np.minimum(delta, SQRT3), bins=HIST_EDGES)
    chan = np.abs(pair.image_a - pair.image_b).reshape(-1, 3).mean(axis=0)
    return np.concatenate([means, maxes, hist / delta.size, chan]).astype(np.float64)


@dataclass(frozen=True, eq=False)
class LogisticModel:
    weights: np.ndarray  # on standardised features
    bias: float
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    epochs: int
    reg: float
    single_class: bool = False

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]

    def decision(self, features: np.ndarray) -> np.ndarray:
        z = (np.asarray(features, dtype=np.float64) - self.feature_mean) / self.feature_scale
        return z @ self.weights + self.bias

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return expit(self.decision(features))

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "bias": float(self.bias),
            "feature_mean": self.feature_mean.tolist(),
            "feature_scale": self.feature_scale.tolist(),
            "epochs": int(self.epochs),
            "reg": float(self.reg),
            "single_class": bool(self.single_class),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LogisticModel":
        return cls(
            weights=np.asarray(data["weights"], dtype=np.float64),
            bias=float(data["bias"]),
            feature_mean=np.asarray(data["feature_mean"], dtype=np.float64),
            feature_scale=np.asarray(data["feature_scale"], dtype=np.float64),
            epochs=int(data["epochs"]),
            reg=float(data["reg"]),
            single_class=bool(data["single_class"]),
        )


def fit_logistic(
    x: np.ndarray, y: np.ndarray, reg: float = 1e-3, max_epochs: int = 500, grad_tol: float = 1e-5
) -> LogisticModel:
    """Class-balanced, L2-regularised logistic regression.

    Minimises the weighted mean log-loss plus ``reg/2 |w|^2`` (bias not
    penalised) with full-batch Nesterov gradient descent at step 1/L.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"{x.shape[0]} feature rows for {y.shape[0]} labels")
    if x.shape[0] == 0:
        raise ValueError("no training samples")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if reg < 0:
        raise ValueError("reg must be non-negative")

    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    z = np.column_stack([(x - mean) / scale, np.ones(x.shape[0])])

    n_pos = y.sum()
    n_neg = y.shape[0] - n_pos
    single = n_pos == 0 or n_neg == 0
    if single:
        warnings.warn("training labels contain a single class", RuntimeWarning, stacklevel=2)
        sample_w = np.full(y.shape[0], 1.0 / y.shape[0])
    else:
        sample_w = np.where(y == 1, 0.5 / n_pos, 0.5 / n_neg)

    penalty = np.full(z.shape[1], reg)
    penalty[-1] = 0.0
    lipschitz = 0.25 * np.linalg.eigvalsh((z * sample_w[:, None]).T @ z)[-1] + reg

    def gradient(theta: np.ndarray) -> np.ndarray:
        resid = expit(z @ theta) - y
        return z.T @ (sample_w * resid) + penalty * theta

    theta = np.zeros(z.shape[1])
    prev = theta.copy()
    epochs = 0
    for epoch in range(1, max_epochs + 1):
        look = theta + (epoch - 1) / (epoch + 2) * (theta - prev)
        grad = gradient(look)
        epochs = epoch
        if np.linalg.norm(grad) < grad_tol:
            theta = look
            break
        prev = theta
        theta = look - grad / lipschitz
    return LogisticModel(theta[:-1].copy(), float(theta[-1]), mean, scale, epochs, float(reg), bool(single))


def fit_pixel_unary(features: list[np.ndarray], pseudo_labels: list[np.ndarray], reg: float = 1e-3) -> LogisticModel:
    if len(features) != len(pseudo_labels):
        raise ValueError("feature and label lists differ in length")
    if not features:
        raise ValueError("no training images")
    x = np.concatenate([np.asarray(f, dtype=np.float64) for f in features])
    y = np.concatenate([np.asarray(lab).ravel() for lab in pseudo_labels])
    return fit_logistic(x, y, reg)


def fit_classifier(features: list[np.ndarray], labels: list[int], reg: float = 1e-3) -> LogisticModel:
    if len(features) != len(labels):
        raise ValueError("feature and label lists differ in length")
    if not features:
        raise ValueError("no training images")
    return fit_logistic(np.stack(features), np.asarray(labels), reg)


def probability_to_unary(p: np.ndarray) -> np.ndarray:
    """Energies (-log(1 - p), -log p) stacked on a new last axis."""
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    return np.stack([-np.log1p(-p), -np.log(p)], axis=-1)


def predict_unary(model: LogisticModel, pair: ImagePair) -> np.ndarray:
    """Pixel unary field of shape (H, W, 2)."""
    p = model.predict_proba(pixel_features(pair))
    return probability_to_unary(p.reshape(pair.shape))


def predict_label(model: LogisticModel, pair: ImagePair) -> tuple[int, float]:
    score = float(model.predict_proba(image_features(pair)[None, :])[0])
    return int(score >= 0.5), score


def _upsample_bilinear(prob: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    sh, sw = prob.shape
    # pixel-centre alignment, edges replicated
    rows = (np.arange(h) + 0.5) * sh / h - 0.5
    cols = (np.arange(w) + 0.5) * sw / w - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return map_coordinates(prob, [rr, cc], order=1, mode="nearest")


def read_probability_map(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        if path.suffix.lower() == ".npy":
            prob = np.load(path, allow_pickle=False).astype(np.float64)
        else:
            with Image.open(path) as img:
                if img.mode not in ("L", "P", "I", "I;16"):
                    img = img.convert("L")
                prob = np.asarray(img, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot parse score map {path}: {exc}") from exc
    if prob.ndim != 2:
        raise ValueError(f"score map {path} must be single-channel, got shape {prob.shape}")
    if not np.all(np.isfinite(prob)) or prob.min() < 0.0 or prob.max() > 1.0:
        raise ValueError(f"score map {path} holds values outside [0, 1]")
    return prob


def load_unary_from_file(path: str | Path, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Read a foreground-probability map and convert it to a unary field.

    ``.npy`` files hold float probabilities; PNG/PGM files hold 8-bit values
    read as value / 255.  A coarse map is bilinearly upsampled to ``shape``,
    whose sides it must divide.
    """
    prob = read_probability_map(path)
    if shape is not None and prob.shape != tuple(shape):
        h, w = shape
        sh, sw = prob.shape
        if sh > h or sw > w or h % sh or w % sw:
            raise ValueError(f"score map {prob.shape} does not divide target {tuple(shape)}")
        prob = np.clip(_upsample_bilinear(prob, (h, w)), 0.0, 1.0)
    return probability_to_unary(prob)


@dataclass
class TauReferenceSet:
    features: list[np.ndarray] = field(default_factory=list)
    proportions: list[float] = field(default_factory=list)

    def add(self, features: np.ndarray, proportion: float) -> None:
        if not 0.0 <= proportion <= 1.0:
            raise ValueError(f"proportion {proportion} outside [0, 1]")
        self.features.append(np.asarray(features, dtype=np.float64))
        self.proportions.append(float(proportion))

    def __len__(self) -> int:
        return len(self.proportions)

    def to_dict(self) -> dict:
        return {
            "features": [f.tolist() for f in self.features],
            "proportions": list(self.proportions),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TauReferenceSet":
        refs = cls()
        for f, p in zip(data["features"], data["proportions"]):
            refs.add(np.asarray(f), p)
        return refs


def knn_indices(query: np.ndarray, refs: TauReferenceSet, k: int) -> np.ndarray:
    """Indices of the k nearest references; equal distances keep insertion order."""
    if len(refs) == 0:
        raise ValueError("reference set is empty")
    if k < 1:
        raise ValueError("K must be at least 1")
    dist = np.linalg.norm(np.stack(refs.features) - np.asarray(query, dtype=np.float64), axis=1)
    return np.argsort(dist, kind="stable")[: min(k, len(refs))]


def estimate_tau_knn(query: np.ndarray, refs: TauReferenceSet, k: int = 6) -> float:
    idx = knn_indices(query, refs, k)
    tau = float(np.mean(np.asarray(refs.proportions)[idx]))
    return min(max(tau, TAU_CLAMP[0]), TAU_CLAMP[1])

"""Weakly supervised EM: pseudo-labels from constrained inference, refits from pseudo-labels."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .energy import CrfParams, effective_unary, kernel_features
from .meanfield import MarginalField, run_inference
from .predictors import (
    LogisticModel,
    TauReferenceSet,
    fit_classifier,
    fit_pixel_unary,
    image_features,
    pixel_features,
    predict_unary,
)
from .types import ImagePair

log = logging.getLogger(__name__)

TAU_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
COVERAGE = 0.15
CHECKPOINT_VERSION = 1


@dataclass(eq=False)
class TrainingExample:
    pair: ImagePair
    y: int
    pseudo_labels: np.ndarray | None = None
    gt_mask: np.ndarray | None = None  # evaluation only
    _pixel_feats: np.ndarray | None = field(default=None, repr=False)
    _image_feats: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.y not in (0, 1):
            raise ValueError("image label must be 0 or 1")

    @property
    def pixel_feats(self) -> np.ndarray:
        if self._pixel_feats is None:
            self._pixel_feats = pixel_features(self.pair)
        return self._pixel_feats

    @property
    def image_feats(self) -> np.ndarray:
        if self._image_feats is None:
            self._image_feats = image_features(self.pair)
        return self._image_feats


@dataclass(eq=False)
class TrainedModel:
    pixel_model: LogisticModel
    classifier: LogisticModel
    refs: TauReferenceSet
    params: CrfParams
    rounds: int = 0
    tau_train: float | None = None
    change_rates: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "pixel_model": self.pixel_model.to_dict(),
            "classifier": self.classifier.to_dict(),
            "refs": self.refs.to_dict(),
            "params": self.params.to_dict(),
            "rounds": self.rounds,
            "tau_train": self.tau_train,
            "change_rates": list(self.change_rates),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainedModel":
        if data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')!r}")
        return cls(
            pixel_model=LogisticModel.from_dict(data["pixel_model"]),
            classifier=LogisticModel.from_dict(data["classifier"]),
            refs=TauReferenceSet.from_dict(data["refs"]),
            params=CrfParams.from_dict(data["params"]),
            rounds=int(data["rounds"]),
            tau_train=data["tau_train"],
            change_rates=[float(r) for r in data["change_rates"]],
        )


def init_pseudo_labels(example: TrainingExample) -> np.ndarray:
    return np.full(example.pair.shape, example.y, dtype=np.uint8)


def segment_pair(
    pair: ImagePair, unary: np.ndarray, y: int, params: CrfParams, tau: float | None
) -> tuple[np.ndarray, list[MarginalField]]:
    """Infer on both images' kernel features and OR the decoded maps."""
    if y == 0:
        return np.zeros(pair.shape, dtype=np.uint8), []
    a = effective_unary(unary, y, pair, params)
    labels = np.zeros(pair.n_pixels, dtype=np.uint8)
    fields = []
    for source in ("a", "b"):
        feats = kernel_features(pair.image(source), params, source)
        fld, lab = run_inference(a, feats, params, tau=tau, y_star=y)
        labels |= lab
        fields.append(fld)
    return labels.reshape(pair.shape), fields


def e_step(model: TrainedModel, example: TrainingExample, tau_train: float) -> np.ndarray:
    """Pseudo-labels conditioned on the true image label."""
    if example.y == 0:
        return init_pseudo_labels(example)
    unary = predict_unary(model.pixel_model, example.pair)
    labels, _ = segment_pair(example.pair, unary, example.y, model.params, tau_train)
    return labels


def m_step(examples: list[TrainingExample], reg: float = 1e-3) -> tuple[LogisticModel, LogisticModel]:
    missing = [i for i, ex in enumerate(examples) if ex.pseudo_labels is None]
    if missing:
        raise ValueError(f"examples {missing[:5]} have no pseudo-labels")
    pixel = fit_pixel_unary([ex.pixel_feats for ex in examples], [ex.pseudo_labels for ex in examples], reg)
    clf = fit_classifier([ex.image_feats for ex in examples], [ex.y for ex in examples], reg)
    return pixel, clf


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def build_reference_set(examples: list[TrainingExample]) -> TauReferenceSet:
    refs = TauReferenceSet()
    for ex in examples:
        if ex.y == 1:
            refs.add(ex.image_feats, float(ex.pseudo_labels.mean()))
    return refs


def validate_tau(
    validation: list[TrainingExample],
    grid,
    model: TrainedModel,
    coverage: float = COVERAGE,
    threads: int = 1,
) -> float:
    """Smallest grid value whose pseudo-labels cover ``coverage`` of every image."""
    grid = sorted(float(t) for t in grid)
    if not grid:
        raise ValueError("tau grid is empty")
    if any(not 0.0 < t < 1.0 for t in grid):
        raise ValueError("tau grid values must lie in (0, 1)")
    positives = [ex for ex in validation if ex.y == 1]
    if not positives:
        raise ValueError("validation set has no changed pairs")
    for tau in grid:
        maps = _map(lambda ex: e_step(model, ex, tau), positives, threads)
        covered = [float(m.mean()) for m in maps]
        log.info("tau %.3f: minimum coverage %.3f", tau, min(covered))
        if min(covered) >= coverage:
            return tau
    return grid[-1]


def train(
    examples: list[TrainingExample],
    params: CrfParams,
    rounds: int = 3,
    tau_train: float | None = None,
    validation: list[TrainingExample] | None = None,
    grid=TAU_GRID,
    reg: float = 1e-3,
    threads: int = 1,
    resume: TrainedModel | None = None,
) -> TrainedModel:
    """Run M(h0) followed by ``rounds`` E/M rounds.

    With ``resume`` the loop continues from a model trained on the same
    examples, whose pseudo-labels must still be attached, up to ``rounds``
    rounds in total.  ``tau_train`` defaults to the coverage rule on
    ``validation`` (or on the training positives when none is given),
    evaluated with the initial model.
    """
    if not examples:
        raise ValueError("training set is empty")
    if rounds < 1:
        raise ValueError("rounds must be at least 1")

    if resume is None:
        for ex in examples:
            ex.pseudo_labels = init_pseudo_labels(ex)
        pixel, clf = m_step(examples, reg)
        model = TrainedModel(pixel, clf, TauReferenceSet(), params)
        if tau_train is None:
            model.tau_train = validate_tau(validation or examples, grid, model, threads=threads)
        else:
            model.tau_train = float(tau_train)
        log.info("training tau %.3f", model.tau_train)
    else:
        model = TrainedModel(
            resume.pixel_model,
            resume.classifier,
            resume.refs,
            resume.params,
            resume.rounds,
            resume.tau_train,
            list(resume.change_rates),
        )

    while model.rounds < rounds:
        new_labels = _map(lambda ex: e_step(model, ex, model.tau_train), examples, threads)
        changed = sum(int(np.sum(new != ex.pseudo_labels)) for new, ex in zip(new_labels, examples))
        total = sum(ex.pair.n_pixels for ex in examples)
        for ex, lab in zip(examples, new_labels):
            ex.pseudo_labels = lab
        model.pixel_model, model.classifier = m_step(examples, reg)
        model.rounds += 1
        model.change_rates.append(changed / total)
        log.info("round %d: pseudo-label change rate %.4f", model.rounds, changed / total)
    model.refs = build_reference_set(examples)
    return model

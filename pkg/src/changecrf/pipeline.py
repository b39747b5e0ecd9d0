"""Commands behind the CLI: training, sequential prediction, scoring and sweeps.

Prediction is sequential: the image label comes first, and only pairs
predicted as changed are segmented, with the foreground proportion fixed
by the configured tau policy.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import plotting
from .config import RunConfig
from .em import TrainedModel, TrainingExample, segment_pair, train
from .evaluation import (
    SegScore,
    accuracy,
    average_precision,
    difference_threshold_baseline,
    dt_thresholds,
    mean_per_image,
    miou,
    pooled,
    precision_recall,
)
from .io import (
    Record,
    load_pair,
    read_json,
    read_manifest,
    read_mask,
    read_roi,
    read_table,
    write_json,
    write_mask,
    write_table,
)
from .predictors import estimate_tau_knn, image_features, load_unary_from_file, predict_label, predict_unary
from .synth import substream
from .types import ImagePair

log = logging.getLogger(__name__)

PREDICTION_HEADER = ["id", "y_pred", "score", "tau", "foreground"]


class ConfigurationError(ValueError):
    pass


def _resize_pair(pair: ImagePair, side: int | None) -> ImagePair:
    if side is None or pair.shape == (side, side):
        return pair

    def resample(img):
        as8 = Image.fromarray(np.rint(img * 255.0).astype(np.uint8), mode="RGB")
        return np.asarray(as8.resize((side, side), Image.BILINEAR), dtype=np.float64) / 255.0

    return ImagePair(resample(pair.image_a), resample(pair.image_b), pair.id)


def _resize_labels(labels: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if labels.shape == tuple(shape):
        return labels
    img = Image.fromarray(labels.astype(np.uint8), mode="L")
    return np.asarray(img.resize((shape[1], shape[0]), Image.NEAREST), dtype=np.uint8)


def _map(fn, items, threads: int) -> list:
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def load_examples(records: list[Record], config: RunConfig, require_labels: bool = True) -> list[TrainingExample]:
    examples = []
    for rec in records:
        if rec.y is None:
            if require_labels:
                raise ConfigurationError(f"record {rec.id!r} has no image label y")
            continue
        pair = _resize_pair(load_pair(rec), config.resize)
        gt = None
        if rec.gt_mask_path is not None:
            gt = _resize_labels(read_mask(rec.gt_mask_path)[0], pair.shape)
        examples.append(TrainingExample(pair, rec.y, gt_mask=gt))
    return examples


def split_validation(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, validation) index split; validation gets round(fraction * n) items."""
    order = substream(seed, "trainer").permutation(n)
    n_val = int(round(fraction * n))
    if fraction > 0 and n > 1:
        n_val = min(max(n_val, 1), n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def train_cmd(manifest: str | Path, config: RunConfig, out: str | Path) -> TrainedModel:
    records = read_manifest(manifest)
    if not records:
        raise ConfigurationError("manifest is empty")
    examples = load_examples(records, config)
    train_idx, val_idx = split_validation(len(examples), config.val_fraction, config.seed)
    validation = [examples[i] for i in val_idx]
    if not any(ex.y == 1 for ex in validation):
        validation = None
    model = train(
        [examples[i] for i in train_idx],
        config.crf,
        rounds=config.rounds,
        validation=validation,
        grid=config.tau_grid,
        reg=config.reg,
        threads=config.threads,
    )
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, model.to_dict())
    return model


def load_model(path: str | Path) -> TrainedModel:
    return TrainedModel.from_dict(read_json(path))


@dataclass(frozen=True)
class Prediction:
    id: str
    y_pred: int
    score: float | None
    tau: float | None
    labels: np.ndarray

    @property
    def foreground(self) -> float:
        return float(self.labels.mean())


def choose_tau(pair: ImagePair, config: RunConfig, model: TrainedModel | None) -> float:
    crf = config.crf
    if crf.tau_policy == "fixed":
        return float(crf.tau)
    if model is None or len(model.refs) == 0:
        raise ConfigurationError("the knn tau policy needs a trained model with a reference set")
    return estimate_tau_knn(image_features(pair), model.refs, crf.knn_k)


def predict_record(
    rec: Record, config: RunConfig, model: TrainedModel | None, tau: float | None = None
) -> Prediction:
    """Image label first; segment only when it predicts change."""
    if model is None and rec.unary_path is None:
        raise ConfigurationError(f"record {rec.id!r}: no model and no unary_path")
    native = load_pair(rec)
    pair = _resize_pair(native, config.resize)
    if model is not None:
        y_pred, score = predict_label(model.classifier, pair)
    else:
        # without a classifier the external score map is trusted to hold a change
        y_pred, score = 1, None
    if y_pred == 0:
        return Prediction(rec.id, 0, score, None, np.zeros(native.shape, dtype=np.uint8))
    if tau is None:
        tau = choose_tau(pair, config, model)
    if rec.unary_path is not None:
        unary = load_unary_from_file(rec.unary_path, pair.shape)
    else:
        unary = predict_unary(model.pixel_model, pair)
    labels, _ = segment_pair(pair, unary, 1, config.crf, tau)
    return Prediction(rec.id, 1, score, tau, _resize_labels(labels, native.shape))


def infer(
    manifest: str | Path, config: RunConfig, model: TrainedModel | None, out: str | Path
) -> list[Prediction]:
    """Predict every record and write masks plus ``predictions.csv`` under ``out``."""
    records = read_manifest(manifest)
    out = Path(out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    preds = _map(lambda r: predict_record(r, config, model), records, config.threads)
    for p in preds:
        write_mask(out / "masks" / f"{p.id}.png", p.labels)
    rows = [[p.id, p.y_pred, p.score, p.tau, p.foreground] for p in preds]
    write_table(out / "predictions.csv", PREDICTION_HEADER, rows)
    return preds


def _ground_truth(rec: Record) -> tuple[np.ndarray, np.ndarray]:
    labels, roi = read_mask(rec.gt_mask_path)
    if rec.roi_path is not None:
        roi = roi & read_roi(rec.roi_path)
    return labels, roi


def _float_or_none(text: str) -> float | None:
    return None if text == "" else float(text)


@dataclass
class EvalReport:
    per_example: list[tuple[Record, SegScore]]
    summary: dict
    dt_rows: list[tuple[float, SegScore]]


def eval_cmd(manifest: str | Path, predictions: str | Path, config: RunConfig, out: str | Path) -> EvalReport:
    """Score stored predictions and the difference-threshold sweep.

    Writes ``per_example.csv``, ``summary.csv`` and ``dt_sweep.csv`` plus
    the PR-curve and threshold-sweep figures under ``out``.
    """
    records = read_manifest(manifest)
    predictions = Path(predictions)
    table = {row["id"]: row for row in read_table(predictions / "predictions.csv")}
    problems = []
    for rec in records:
        if rec.gt_mask_path is None:
            problems.append(f"{rec.id}: no gt_mask_path")
        if rec.id not in table:
            problems.append(f"{rec.id}: missing from predictions.csv")
        elif not (predictions / "masks" / f"{rec.id}.png").exists():
            problems.append(f"{rec.id}: missing mask file")
    if problems:
        raise ConfigurationError("cannot evaluate:\n  " + "\n  ".join(problems))

    thresholds = dt_thresholds(config.dt_count, config.dt_max)
    per_example = []
    dt_scores = [[] for _ in thresholds]
    for rec in records:
        gt, roi = _ground_truth(rec)
        pred, _ = read_mask(predictions / "masks" / f"{rec.id}.png")
        per_example.append((rec, miou(pred, gt, roi)))
        pair = load_pair(rec)
        for k, t in enumerate(thresholds):
            dt_scores[k].append(miou(difference_threshold_baseline(pair, t), gt, roi))

    seg = [s for _, s in per_example]
    total = pooled(seg)
    summary = {
        "n": len(records),
        "miou_pooled": total.miou,
        "iou_change_pooled": total.iou_change,
        "iou_background_pooled": total.iou_background,
        "miou_per_image": mean_per_image(seg),
    }
    dt_rows = [(float(t), pooled(s)) for t, s in zip(thresholds, dt_scores)]
    best_t, best = max(dt_rows, key=lambda r: r[1].miou)
    summary["dt_best_threshold"] = best_t
    summary["dt_best_miou"] = best.miou

    labelled = [(rec, table[rec.id]) for rec in records if rec.y is not None]
    curve = None
    if labelled:
        ys = [rec.y for rec, _ in labelled]
        summary["accuracy"] = accuracy([int(row["y_pred"]) for _, row in labelled], ys)
        scores = [_float_or_none(row["score"]) for _, row in labelled]
        if sum(ys) > 0 and all(s is not None for s in scores):
            summary["ap"] = average_precision(scores, ys)
            curve = precision_recall(scores, ys)

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    header = ["id", "y", "y_pred", "score", "tp", "fp", "fn", "tn", "excluded",
              "iou_background", "iou_change", "miou"]
    rows = []
    for rec, s in per_example:
        row = table[rec.id]
        rows.append([rec.id, rec.y, int(row["y_pred"]), _float_or_none(row["score"]),
                     s.tp, s.fp, s.fn, s.tn, s.excluded, s.iou_background, s.iou_change, s.miou])
    write_table(out / "per_example.csv", header, rows)
    write_table(out / "summary.csv", ["metric", "value"], [[k, summary[k]] for k in sorted(summary)])
    write_table(
        out / "dt_sweep.csv",
        ["threshold", "tp", "fp", "fn", "tn", "iou_background", "iou_change", "miou"],
        [[t, s.tp, s.fp, s.fn, s.tn, s.iou_background, s.iou_change, s.miou] for t, s in dt_rows],
    )
    plotting.dt_sweep_figure(
        [t for t, _ in dt_rows], [s.miou for _, s in dt_rows], total.miou, out / "dt_sweep.png"
    )
    if curve is not None:
        plotting.pr_curve_figure(curve[1], curve[0], summary["ap"], out / "pr_curve.png")
    return EvalReport(per_example, summary, dt_rows)


def tau_sweep(
    manifest: str | Path, config: RunConfig, model: TrainedModel, taus, out: str | Path
) -> list[tuple[float, SegScore]]:
    """Pooled scores with tau fixed to each value in turn; one row per value."""
    records = [r for r in read_manifest(manifest) if r.gt_mask_path is not None]
    if not records:
        raise ConfigurationError("tau sweep needs records with ground-truth masks")
    truth = [_ground_truth(r) for r in records]
    rows = []
    for tau in taus:
        tau = float(tau)
        if not 0.0 < tau < 1.0:
            raise ValueError(f"tau {tau} outside (0, 1)")
        preds = _map(lambda r: predict_record(r, config, model, tau=tau), records, config.threads)
        total = pooled([miou(p.labels, gt, roi) for p, (gt, roi) in zip(preds, truth)])
        rows.append((tau, total))
        log.info("tau %.2f: pooled mIOU %.4f", tau, total.miou)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(
        out / "tau_sweep.csv",
        ["tau", "tp", "fp", "fn", "tn", "iou_background", "iou_change", "miou"],
        [[t, s.tp, s.fp, s.fn, s.tn, s.iou_background, s.iou_change, s.miou] for t, s in rows],
    )
    plotting.tau_sweep_figure([t for t, _ in rows], [s.miou for _, s in rows], out / "tau_sweep.png")
    return rows


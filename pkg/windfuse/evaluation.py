"""Metrics, cross-validation, baseline comparison and report emission.

HIGH is the positive class. A ratio with a zero denominator is reported
as None (``null`` in JSON, ``undefined`` in CSV), never as 0.
"""

import io
import json
import logging
import os
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from scipy.special import softmax
from scipy.stats import rankdata

from windfuse import ingest, plots, tabular_models
from windfuse.config import RunConfig
from windfuse.core import FEATURE_NAMES, Dataset, EpochRecord, RiskLabel
from windfuse.errors import DataError
from windfuse.fusion import Pipeline, fit_pipeline
from windfuse.utils import parallel_map

logger = logging.getLogger(__name__)

REPORT_FIELDS = (
    "precision_low", "recall_low", "f1_low",
    "precision_high", "recall_high", "f1_high",
    "accuracy", "macro_f1", "roc_auc",
    "tp", "fp", "tn", "fn",
)
CURVE_FIELDS = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc")
COMPARISON_ROWS = (
    "logistic_regression", "decision_tree", "random_forest", "text_encoder", "fused",
)
UNDEFINED = "undefined"

Destination = Union[str, os.PathLike, io.TextIOBase]


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class EvalReport:
    confusion: ConfusionMatrix
    precision_low: Optional[float]
    recall_low: Optional[float]
    f1_low: Optional[float]
    precision_high: Optional[float]
    recall_high: Optional[float]
    f1_high: Optional[float]
    accuracy: Optional[float]
    macro_f1: Optional[float]
    roc_auc: Optional[float]
    support_low: int
    support_high: int

    def as_dict(self) -> Dict[str, Optional[float]]:
        """The fixed report fields, confusion counts included."""
        out = {name: getattr(self, name) for name in REPORT_FIELDS[:9]}
        out.update(asdict(self.confusion))
        return out


def confusion(labels: Sequence[int], predictions: Sequence[int]) -> ConfusionMatrix:
    """Counts by definition, HIGH positive.

    Raises:
        DataError: On empty input or a length mismatch.
    """
    y = np.asarray(labels, dtype=np.int64)
    p = np.asarray(predictions, dtype=np.int64)
    if len(y) != len(p):
        raise DataError(f"length mismatch: {len(y)} labels, {len(p)} predictions")
    if len(y) == 0:
        raise DataError("confusion needs at least one sample")
    high, low = RiskLabel.HIGH, RiskLabel.LOW
    return ConfusionMatrix(
        tp=int(np.sum((y == high) & (p == high))),
        fp=int(np.sum((y == low) & (p == high))),
        tn=int(np.sum((y == low) & (p == low))),
        fn=int(np.sum((y == high) & (p == low))),
    )


def _ratio(num: float, den: float) -> Optional[float]:
    return None if den == 0 else num / den


def _f1(precision: Optional[float], recall: Optional[float]) -> Optional[float]:
    if precision is None or recall is None:
        return None
    return _ratio(2.0 * precision * recall, precision + recall)


def metrics(cm: ConfusionMatrix, roc_auc_value: Optional[float] = None) -> EvalReport:
    """Per-class precision/recall/F1, accuracy and macro-F1 from counts."""
    precision_high = _ratio(cm.tp, cm.tp + cm.fp)
    recall_high = _ratio(cm.tp, cm.tp + cm.fn)
    # LOW as the positive class: tn plays tp, fn plays fp
    precision_low = _ratio(cm.tn, cm.tn + cm.fn)
    recall_low = _ratio(cm.tn, cm.tn + cm.fp)
    f1_high = _f1(precision_high, recall_high)
    f1_low = _f1(precision_low, recall_low)
    macro = None if f1_high is None or f1_low is None else (f1_low + f1_high) / 2.0
    return EvalReport(
        confusion=cm,
        precision_low=precision_low,
        recall_low=recall_low,
        f1_low=f1_low,
        precision_high=precision_high,
        recall_high=recall_high,
        f1_high=f1_high,
        accuracy=_ratio(cm.tp + cm.tn, cm.total),
        macro_f1=macro,
        roc_auc=roc_auc_value,
        support_low=cm.tn + cm.fp,
        support_high=cm.tp + cm.fn,
    )


def _split_scores(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(s) != len(y):
        raise DataError(f"length mismatch: {len(s)} scores, {len(y)} labels")
    n_high = int(np.sum(y == RiskLabel.HIGH))
    if n_high == 0 or n_high == len(y):
        raise DataError("roc_auc needs both classes")
    return s, y


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: P(score_high > score_low) with half credit for ties."""
    s, y = _split_scores(scores, labels)
    ranks = rankdata(s, method="average")
    pos = y == RiskLabel.HIGH
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Empirical (fpr, tpr) from (0,0) to (1,1), one point per distinct score."""
    s, y = _split_scores(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, pos = s[order], (y[order] == RiskLabel.HIGH)
    last_of_run = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(pos)[last_of_run]
    fps = np.cumsum(~pos)[last_of_run]
    tpr = np.r_[0.0, tps / pos.sum()]
    fpr = np.r_[0.0, fps / (~pos).sum()]
    return fpr, tpr


def trapezoid_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    fpr, tpr = roc_curve(scores, labels)
    return float(trapezoid(tpr, fpr))


def evaluate(labels: Sequence[int], scores: Sequence[float]) -> EvalReport:
    """Full report from p_high scores thresholded at 0.5 (a tie counts as HIGH).

    roc_auc is None when only one class is present.
    """
    y = np.asarray(labels, dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64)
    predictions = (s >= 0.5).astype(np.int64)
    auc = None
    if 0 < int(np.sum(y == RiskLabel.HIGH)) < len(y):
        auc = roc_auc(s, y)
    return metrics(confusion(y, predictions), auc)


# --- Cross-validation ---

class Scorer(Protocol):
    def predict_scores(self, ds: Dataset, rows: Optional[Sequence[int]] = None) -> np.ndarray: ...


PipelineFactory = Callable[[Dataset, List[int]], Scorer]


@dataclass(frozen=True)
class FoldResult:
    fold: int
    report: EvalReport
    n_train: int
    n_test: int


@dataclass(frozen=True)
class CrossValidationResult:
    folds: Tuple[FoldResult, ...]
    mean: Dict[str, Optional[float]]
    std: Dict[str, Optional[float]]


def aggregate(reports: Sequence[EvalReport]) -> Tuple[Dict[str, Optional[float]], Dict[str, Optional[float]]]:
    """Per-field mean and population std over the folds where the field is defined."""
    mean, std = {}, {}
    for name in REPORT_FIELDS:
        values = [r.as_dict()[name] for r in reports]
        values = [float(v) for v in values if v is not None]
        if values:
            mean[name] = float(np.mean(values))
            std[name] = float(np.std(values))
        else:
            mean[name] = std[name] = None
    return mean, std


def cross_validate(
    factory: PipelineFactory, ds: Dataset, k: int, seed: int
) -> CrossValidationResult:
    """Stratified k-fold: fit on k-1 folds, evaluate on the held-out fold.

    Every fitted statistic comes from the factory call on the training
    folds, so held-out rows cannot leak into it.
    """
    split = ingest.stratified_kfold(ds, k, seed)

    def run_fold(f: int) -> FoldResult:
        train, held = split.fold(f)
        logger.info("fold %d/%d: %d train rows, %d held-out rows", f + 1, k, len(train), len(held))
        model = factory(ds, train)
        report = evaluate(ds.labels_array(held), model.predict_scores(ds, held))
        return FoldResult(f, report, len(train), len(held))

    folds = parallel_map(run_fold, list(range(k)))
    mean, std = aggregate([f.report for f in folds])
    return CrossValidationResult(tuple(folds), mean, std)


def pipeline_factory(config: RunConfig) -> PipelineFactory:
    def factory(ds: Dataset, rows: List[int]) -> Pipeline:
        return fit_pipeline(ds, rows, config)
    return factory


# --- Baselines and robustness ---

@dataclass(frozen=True)
class ComparisonRow:
    model: str
    accuracy: Optional[float]
    macro_f1: Optional[float]
    roc_auc: Optional[float]


def _row(name: str, labels: np.ndarray, scores: np.ndarray) -> ComparisonRow:
    report = evaluate(labels, scores)
    return ComparisonRow(name, report.accuracy, report.macro_f1, report.roc_auc)


def compare_baselines(
    ds: Dataset, split: ingest.SplitSpec, config: RunConfig
) -> Tuple[List[ComparisonRow], Pipeline]:
    """Five models on the same split, in the fixed row order.

    The numeric baselines share the fused pipeline's imputation and
    standardization; the forest and text rows are the pipeline's own
    streams.

    Returns:
        (rows, fitted fused pipeline).
    """
    train, test = list(split.train_indices), list(split.test_indices)
    y_train, y_test = ds.labels_array(train), ds.labels_array(test)
    pipeline = fit_pipeline(ds, train, config)
    Z_train = pipeline.standardize(ds, train)
    samples = pipeline.samples(ds, test)

    logistic = tabular_models.fit_logistic(Z_train, y_train, config.logistic)
    tree = tabular_models.fit_decision_tree(Z_train, y_train, config.rf, config.seed)
    high = RiskLabel.HIGH
    rows = [
        _row(COMPARISON_ROWS[0], y_test, logistic.predict_proba(samples.standardized)[:, high]),
        _row(COMPARISON_ROWS[1], y_test, tree.predict_proba(samples.standardized)[:, high]),
        _row(COMPARISON_ROWS[2], y_test, pipeline.rf_probs(samples.standardized, samples)[:, high]),
        _row(COMPARISON_ROWS[3], y_test, softmax(samples.text_logits, axis=1)[:, high]),
        _row(COMPARISON_ROWS[4], y_test, pipeline.score(samples.standardized, samples)),
    ]
    for r in rows:
        logger.info("%-20s accuracy=%s macro_f1=%s", r.model, r.accuracy, r.macro_f1)
    return rows, pipeline


@dataclass(frozen=True)
class RobustnessRow:
    condition: str
    accuracy: Optional[float]
    macro_f1: Optional[float]


def modality_robustness(
    pipeline: Pipeline, ds: Dataset, rows: Optional[Sequence[int]] = None
) -> List[RobustnessRow]:
    """Fused accuracy with all narratives blanked, then with all numerics missing."""
    rows = ds.all_rows() if rows is None else list(rows)
    subset = ds.subset(rows)
    y = subset.labels_array()
    no_text = Dataset(tuple(replace(o, narrative="") for o in subset.observations))
    no_numeric = Dataset(tuple(
        o.with_features([None] * len(FEATURE_NAMES)) for o in subset.observations
    ))
    out = []
    for condition, data in (("full", subset), ("text_missing", no_text), ("numeric_missing", no_numeric)):
        report = evaluate(y, pipeline.predict_scores(data))
        out.append(RobustnessRow(condition, report.accuracy, report.macro_f1))
    return out


# --- Emission ---

def _csv_value(value) -> str:
    if value is None:
        return UNDEFINED
    if isinstance(value, float):
        return repr(value)
    return str(value)


def report_to_json(report: EvalReport) -> str:
    doc = report.as_dict()
    doc["support_low"] = report.support_low
    doc["support_high"] = report.support_high
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def report_to_csv(report: EvalReport, destination: Destination):
    """One header row of the fixed field names, one value row."""
    reports_to_csv([("test", report.as_dict())], destination)


def reports_to_csv(rows: Sequence[Tuple[str, Dict]], destination: Destination):
    """Labelled value rows (fold ids, mean, std) under the fixed field names."""
    frame = pd.DataFrame(
        [[label] + [_csv_value(values[name]) for name in REPORT_FIELDS] for label, values in rows],
        columns=["split", *REPORT_FIELDS],
    )
    frame.to_csv(destination, index=False, lineterminator="\n")


def cv_to_csv(result: CrossValidationResult, destination: Destination):
    rows = [(f"fold{f.fold}", f.report.as_dict()) for f in result.folds]
    rows += [("mean", result.mean), ("std", result.std)]
    reports_to_csv(rows, destination)


def cv_to_json(result: CrossValidationResult) -> str:
    doc = {
        "folds": [
            {"fold": f.fold, "n_train": f.n_train, "n_test": f.n_test, **f.report.as_dict()}
            for f in result.folds
        ],
        "mean": result.mean,
        "std": result.std,
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def emit_comparison(table: Sequence[ComparisonRow], destination: Destination):
    frame = pd.DataFrame(
        [[r.model, _csv_value(r.accuracy), _csv_value(r.macro_f1), _csv_value(r.roc_auc)] for r in table],
        columns=["model", "accuracy", "macro_f1", "roc_auc"],
    )
    frame.to_csv(destination, index=False, lineterminator="\n")


def emit_robustness(table: Sequence[RobustnessRow], destination: Destination):
    frame = pd.DataFrame(
        [[r.condition, _csv_value(r.accuracy), _csv_value(r.macro_f1)] for r in table],
        columns=["condition", "accuracy", "macro_f1"],
    )
    frame.to_csv(destination, index=False, lineterminator="\n")


def curve_frame(records: Sequence[EpochRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        [[_csv_value(v) if v is not None else "" for v in asdict(r).values()] for r in records],
        columns=list(CURVE_FIELDS),
    )


def emit_curves(
    records: Sequence[EpochRecord], directory: Union[str, os.PathLike], stem: str
) -> List[str]:
    """Writes <stem>_curve.csv plus accuracy and loss images.

    Raises:
        DataError: On an empty record list.
        OSError: On write failures; the message carries the path.
    """
    if not records:
        raise DataError(f"no epoch records to emit for {stem}")
    csv_path = os.path.join(directory, f"{stem}_curve.csv")
    paths = [csv_path]
    try:
        curve_frame(records).to_csv(csv_path, index=False, lineterminator="\n")
        for metric in plots.METRICS:
            path = os.path.join(directory, f"{stem}_{metric}.png")
            paths.append(plots.render_curve(records, metric, path, title=f"{stem} {metric}"))
    except OSError as e:
        raise OSError(e.errno, f"cannot write curve artifact: {e.strerror}", e.filename or csv_path) from e
    return paths

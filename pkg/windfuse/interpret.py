"""Sensitivity and ablation analyses of the fused risk score.

The forest makes the end-to-end score piecewise constant in the numeric
inputs, so numeric sensitivity is a central finite difference of p_high.
Exact gradients exist only for the meta-classifier segment.
"""

import io
import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from windfuse.core import FEATURE_NAMES, Dataset, RiskLabel
from windfuse.errors import DataError
from windfuse.fusion import MetaClassifier, Pipeline, SampleSet
from windfuse.utils import parallel_map

logger = logging.getLogger(__name__)

FD_METHOD = "finite-difference-pipeline"
EXACT_METHOD = "exact-meta"
FUSED_NAMES = ("rf_low", "rf_high", "text_low", "text_high")

# Impact at or above this is reported as critical.
CRITICAL_IMPACT = 0.1


class RiskScorer(Protocol):
    """Anything that maps standardized numerics of a sample set to p_high."""

    def score(self, standardized: np.ndarray, samples: SampleSet) -> np.ndarray: ...


@dataclass(frozen=True)
class SensitivityReport:
    names: Tuple[str, ...]
    values: Tuple[float, ...]
    method: str
    n_samples: int
    h: Optional[float] = None


@dataclass(frozen=True)
class AblationReport:
    names: Tuple[str, ...]
    impact: Tuple[float, ...]
    baseline_conf: float
    ablated_conf: Tuple[float, ...]
    n_samples: int


@dataclass(frozen=True)
class ContrastRow:
    feature: str
    sensitivity: float
    sensitivity_rank: int
    impact: float
    ablation_rank: int


@dataclass(frozen=True)
class ContrastReport:
    rows: Tuple[ContrastRow, ...]
    flagged: Tuple[Tuple[str, str], ...]


def select_correct_high(
    pipeline: Pipeline,
    ds: Dataset,
    rows: Optional[Sequence[int]] = None,
    all_samples: bool = False,
) -> SampleSet:
    """Correctly classified high-risk rows, or every row with all_samples."""
    samples = pipeline.samples(ds, rows)
    if all_samples:
        return samples
    y = ds.labels_array(samples.rows)
    p_high = pipeline.score(samples.standardized, samples)
    keep = np.flatnonzero((y == RiskLabel.HIGH) & (p_high >= 0.5))
    logger.info("%d of %d rows are correctly classified high-risk", len(keep), len(samples))
    return samples.subset(keep)


def _require_samples(samples: SampleSet):
    if len(samples) == 0:
        raise DataError("empty sample set")


def sensitivity_fd(
    scorer: RiskScorer, samples: SampleSet, h: float = 1e-3
) -> SensitivityReport:
    """Mean central difference of p_high per standardized numeric feature.

    Narratives (and so text logits) stay fixed. Only the six numeric
    columns are perturbed, even when the forest also sees TF-IDF columns.

    Raises:
        DataError: On an empty sample set or non-positive h.
    """
    _require_samples(samples)
    if h <= 0:
        raise DataError(f"h must be > 0, got {h}")
    Z = samples.standardized

    def column(f: int) -> float:
        plus, minus = Z.copy(), Z.copy()
        plus[:, f] += h
        minus[:, f] -= h
        diff = scorer.score(plus, samples) - scorer.score(minus, samples)
        return float(np.mean(diff / (2.0 * h)))

    values = parallel_map(column, list(range(len(FEATURE_NAMES))))
    return SensitivityReport(FEATURE_NAMES, tuple(values), FD_METHOD, len(samples), h)


def sensitivity_exact_meta(g: MetaClassifier, fused: np.ndarray) -> np.ndarray:
    """Mean autograd gradient of p_high with respect to the 4 fused inputs.

    Raises:
        DataError: If no fused vectors are given.
    """
    fused = np.atleast_2d(np.asarray(fused, dtype=np.float64))
    if len(fused) == 0:
        raise DataError("empty sample set")
    z = torch.tensor(fused, dtype=torch.float64, requires_grad=True)
    p_high = torch.softmax(g(z), dim=1)[:, RiskLabel.HIGH]
    (grad,) = torch.autograd.grad(p_high.sum(), z)
    return grad.mean(dim=0).numpy()


def exact_meta_report(pipeline: Pipeline, samples: SampleSet) -> SensitivityReport:
    _require_samples(samples)
    fused = pipeline.fused(samples.standardized, samples)
    values = sensitivity_exact_meta(pipeline.meta, fused)
    return SensitivityReport(
        FUSED_NAMES, tuple(float(v) for v in values), EXACT_METHOD, len(samples)
    )


def ablate(scorer: RiskScorer, samples: SampleSet) -> AblationReport:
    """Drop in mean p_high when each standardized feature is set to 0.

    Zero in standardized units is the training mean in raw units.

    Raises:
        DataError: On an empty sample set.
    """
    _require_samples(samples)
    Z = samples.standardized
    baseline = float(np.mean(scorer.score(Z, samples)))

    def ablated(f: int) -> float:
        zeroed = Z.copy()
        zeroed[:, f] = 0.0
        return float(np.mean(scorer.score(zeroed, samples)))

    confs = parallel_map(ablated, list(range(len(FEATURE_NAMES))))
    impact = tuple(max(0.0, baseline - c) for c in confs)
    return AblationReport(FEATURE_NAMES, impact, baseline, tuple(confs), len(samples))


def _ranks(values: Sequence[float]) -> List[int]:
    # 1 = largest magnitude; ties keep feature order
    order = sorted(range(len(values)), key=lambda i: (-abs(values[i]), i))
    ranks = [0] * len(values)
    for r, i in enumerate(order, start=1):
        ranks[i] = r
    return ranks


def contrast_report(s: SensitivityReport, a: AblationReport) -> ContrastReport:
    """Ranks features under both methods and flags a differing top feature.

    Raises:
        DataError: If the reports cover different features or sample counts.
    """
    if tuple(s.names) != tuple(a.names):
        raise DataError("sensitivity and ablation reports cover different features")
    if s.n_samples != a.n_samples:
        raise DataError(
            f"reports use different sample sets ({s.n_samples} vs {a.n_samples} samples)"
        )
    s_rank, a_rank = _ranks(s.values), _ranks(a.impact)
    rows = tuple(
        ContrastRow(name, s.values[i], s_rank[i], a.impact[i], a_rank[i])
        for i, name in enumerate(s.names)
    )
    s_top = s.names[s_rank.index(1)]
    a_top = a.names[a_rank.index(1)]
    flagged = ((s_top, a_top),) if s_top != a_top else ()
    return ContrastReport(rows, flagged)


def interpretation(feature: str, value: float, method: str) -> str:
    """Human-readable reading of one report value."""
    if method == "ablation":
        if value >= CRITICAL_IMPACT:
            return "critical: large drop in confidence when removed"
        if value > 0:
            return "minor drop in confidence when removed"
        return "no dominating effect"
    if value > 0:
        return "raises high-risk confidence"
    if value < 0:
        return "lowers high-risk confidence"
    return "no local effect"


# --- Output ---

def sensitivity_frame(report: SensitivityReport) -> pd.DataFrame:
    return pd.DataFrame({
        "feature": list(report.names),
        "sensitivity": list(report.values),
        "interpretation": [
            interpretation(n, v, report.method) for n, v in zip(report.names, report.values)
        ],
    })


def ablation_frame(report: AblationReport) -> pd.DataFrame:
    return pd.DataFrame({
        "feature": list(report.names),
        "impact": list(report.impact),
        "interpretation": [
            interpretation(n, v, "ablation") for n, v in zip(report.names, report.impact)
        ],
    })


def contrast_frame(report: ContrastReport) -> pd.DataFrame:
    flagged = {name for pair in report.flagged for name in pair}
    return pd.DataFrame({
        "feature": [r.feature for r in report.rows],
        "sensitivity_rank": [r.sensitivity_rank for r in report.rows],
        "ablation_rank": [r.ablation_rank for r in report.rows],
        "flagged": [r.feature in flagged for r in report.rows],
    })


Destination = Union[str, os.PathLike, io.TextIOBase]


def write_frame(frame: pd.DataFrame, destination: Destination):
    frame.to_csv(destination, index=False, lineterminator="\n", float_format="%.6g")


def text_table(frame: pd.DataFrame, title: str) -> str:
    """Fixed-width table for terminals and report files."""
    body = frame.to_string(index=False, float_format=lambda v: f"{v:.4g}")
    return f"{title}\n{'-' * len(title)}\n{body}\n"

"""Domain types shared by every windfuse module.

Missing numeric readings are carried as ``None`` on an Observation and as
NaN once turned into arrays. Imputation is the ingest module's job.
"""

import enum
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from windfuse.errors import DataError

# Fixed order used by every vector layout in the package.
FEATURE_NAMES: Tuple[str, ...] = ("tmpf", "dwpf", "relh", "drct", "sknt", "gust")

# Inclusive (low, high) bounds; None means unbounded on that side.
FEATURE_RANGES: Dict[str, Tuple[Optional[float], Optional[float]]] = {
    "tmpf": (None, None),
    "dwpf": (None, None),
    "relh": (0.0, 100.0),
    "drct": (0.0, 360.0),
    "sknt": (0.0, None),
    "gust": (0.0, None),
}


class RiskLabel(enum.IntEnum):
    """Binary hazard risk; HIGH is the positive class everywhere."""

    LOW = 0
    HIGH = 1

    @classmethod
    def parse(cls, token: str) -> "RiskLabel":
        """Maps 'low'/'high' (any case) to a label.

        Raises:
            ValueError: For any other token.
        """
        key = token.strip().lower()
        if key == "low":
            return cls.LOW
        if key == "high":
            return cls.HIGH
        raise ValueError(f"bad label token: {token!r}")

    @property
    def token(self) -> str:
        return "high" if self is RiskLabel.HIGH else "low"


@dataclass(frozen=True)
class Observation:
    """One station record."""

    station: str
    timestamp: Optional[datetime]
    tmpf: Optional[float] = None
    dwpf: Optional[float] = None
    relh: Optional[float] = None
    drct: Optional[float] = None
    sknt: Optional[float] = None
    gust: Optional[float] = None
    narrative: str = ""
    label: Optional[RiskLabel] = None

    def features(self) -> Tuple[Optional[float], ...]:
        """The six numeric attributes in FEATURE_NAMES order."""
        return tuple(getattr(self, name) for name in FEATURE_NAMES)

    def with_features(self, values: Sequence[Optional[float]]) -> "Observation":
        return replace(self, **dict(zip(FEATURE_NAMES, values)))


@dataclass(frozen=True)
class Dataset:
    """Ordered, immutable collection of observations."""

    observations: Tuple[Observation, ...]
    feature_names: Tuple[str, ...] = field(default=FEATURE_NAMES)

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        if tuple(self.feature_names) != FEATURE_NAMES:
            raise DataError(
                f"feature_names must be {FEATURE_NAMES}, got {self.feature_names}"
            )

    def __len__(self) -> int:
        return len(self.observations)

    def __getitem__(self, index: int) -> Observation:
        return self.observations[index]

    def all_rows(self) -> List[int]:
        return list(range(len(self.observations)))

    def subset(self, rows: Sequence[int]) -> "Dataset":
        return Dataset(tuple(self.observations[i] for i in rows))

    def numeric_matrix(self, rows: Optional[Sequence[int]] = None) -> np.ndarray:
        """Raw real[rows x 6] matrix with NaN for missing readings."""
        rows = self.all_rows() if rows is None else rows
        out = np.full((len(rows), len(FEATURE_NAMES)), np.nan, dtype=np.float64)
        for r, i in enumerate(rows):
            for c, v in enumerate(self.observations[i].features()):
                if v is not None:
                    out[r, c] = v
        return out

    def labels_array(self, rows: Optional[Sequence[int]] = None) -> np.ndarray:
        """0/1 label vector (HIGH=1).

        Raises:
            DataError: If any selected observation is unlabeled.
        """
        rows = self.all_rows() if rows is None else rows
        out = np.empty(len(rows), dtype=np.int64)
        for r, i in enumerate(rows):
            label = self.observations[i].label
            if label is None:
                raise DataError(f"observation {i} is unlabeled")
            out[r] = int(label)
        return out

    def narratives(self, rows: Optional[Sequence[int]] = None) -> List[str]:
        rows = self.all_rows() if rows is None else rows
        return [self.observations[i].narrative for i in rows]


@dataclass(frozen=True)
class StreamOutput:
    """Per-sample outputs of the two streams: forest probabilities and text logits."""

    rf_probs: Tuple[float, float]
    text_logits: Tuple[float, float]

    def __post_init__(self):
        if len(self.rf_probs) != 2 or len(self.text_logits) != 2:
            raise DataError("stream outputs must have length 2")
        if any(p < 0.0 or p > 1.0 for p in self.rf_probs):
            raise DataError(f"rf_probs outside [0,1]: {self.rf_probs}")
        if abs(sum(self.rf_probs) - 1.0) > 1e-9:
            raise DataError(f"rf_probs do not sum to 1: {self.rf_probs}")


def validate_observation(obs: Observation) -> List[str]:
    """Checks range and missingness invariants.

    Args:
        obs: The observation to check.

    Returns:
        A list of violation descriptions, empty when the observation is valid.
    """
    violations = []
    for name in FEATURE_NAMES:
        value = getattr(obs, name)
        if value is None:
            continue
        if isinstance(value, float) and math.isnan(value):
            violations.append(f"{name} uses NaN instead of the missing marker")
            continue
        low, high = FEATURE_RANGES[name]
        if low is not None and high is not None:
            if not low <= value <= high:
                violations.append(
                    f"{name} out of range [{low:g},{high:g}]"
                )
        elif low is not None and value < low:
            violations.append(f"{name} must be >= {low:g}")
    if obs.label is not None and not isinstance(obs.label, RiskLabel):
        violations.append("label is not a RiskLabel")
    return violations


def label_counts(ds: Dataset) -> Dict[RiskLabel, int]:
    """Counts observations per label.

    Raises:
        DataError: If an observation is unlabeled; the message names its index.
    """
    counts = {RiskLabel.LOW: 0, RiskLabel.HIGH: 0}
    for i, obs in enumerate(ds.observations):
        if obs.label is None:
            raise DataError(f"observation {i} is unlabeled")
        counts[obs.label] += 1
    return counts


@dataclass(frozen=True)
class EpochRecord:
    """One row of a training curve; validation fields are None without a validation set."""

    epoch: int
    train_loss: float
    val_loss: Optional[float]
    train_acc: float
    val_acc: Optional[float]

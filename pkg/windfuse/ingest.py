"""Station CSV ingestion, imputation, standardization and splitting.

The CSV layout follows ASOS exports: a header row, ``M`` (or an empty
field) for a missing reading, and RFC-4180 quoting for the narrative.
"""

import io
import json
import logging
import math
import os
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import BinaryIO, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from windfuse.core import FEATURE_NAMES, Dataset, Observation, RiskLabel
from windfuse.errors import DataError, UsageError
from windfuse.utils import sha256_bytes

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = (
    "station", "valid", *FEATURE_NAMES, "narrative", "label",
)
MISSING_MARKERS = ("M", "")
TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"
TIMESTAMP_FORMAT_FRACTIONAL = "%Y-%m-%dT%H:%M:%S.%fZ"

CsvSource = Union[str, os.PathLike, bytes, BinaryIO]


def parse_csv(source: CsvSource) -> Dataset:
    """Parses a station CSV into a Dataset.

    Row numbers in error messages are 1-based data rows (the header is
    not counted).

    Args:
        source: A path, raw bytes, or a binary stream of UTF-8 CSV text.

    Returns:
        One Observation per data row, in file order.

    Raises:
        DataError: On input that is not UTF-8 or not well-formed CSV, absent
            columns, unparseable numerics or timestamps, or unknown label
            tokens.
    """
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    try:
        df = pd.read_csv(
            source,
            dtype=str,
            keep_default_na=False,
            na_filter=False,
            encoding="utf-8",
        )
    except pd.errors.EmptyDataError as e:
        raise DataError("empty CSV input") from e
    except pd.errors.ParserError as e:
        # pandas counts file lines, header included
        raise DataError(f"malformed CSV: {str(e).strip()}") from e
    except UnicodeDecodeError as e:
        raise DataError(
            f"CSV is not valid UTF-8: byte 0x{e.object[e.start]:02x} at offset {e.start}"
        ) from e

    df.columns = [c.strip() for c in df.columns]
    absent = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if absent:
        raise DataError("; ".join(f"missing column: {c}" for c in absent))

    numeric = {}
    errors = []
    for name in FEATURE_NAMES:
        raw = df[name].str.strip()
        missing = raw.isin(MISSING_MARKERS)
        values = pd.to_numeric(raw.where(~missing), errors="coerce")
        bad = values.isna() & ~missing
        for i in np.flatnonzero(bad.to_numpy()):
            errors.append(f"row {i + 1}: unparseable {name} value {raw.iloc[i]!r}")
        # float() on the text keeps write_csv's repr() output bit-exact
        numeric[name] = [
            None if m or b else float(s)
            for m, b, s in zip(missing.to_numpy(), bad.to_numpy(), raw)
        ]

    stamps_raw = df["valid"].str.strip()
    stamps = pd.to_datetime(
        stamps_raw.where(stamps_raw != ""), utc=True, errors="coerce",
        format="ISO8601",
    )
    for i in np.flatnonzero((stamps.isna() & (stamps_raw != "")).to_numpy()):
        errors.append(f"row {i + 1}: unparseable timestamp {stamps_raw.iloc[i]!r}")

    labels: List[Optional[RiskLabel]] = []
    for i, token in enumerate(df["label"]):
        if token.strip() == "":
            labels.append(None)
            continue
        try:
            labels.append(RiskLabel.parse(token))
        except ValueError:
            errors.append(f"row {i + 1}: bad label token {token!r}")
            labels.append(None)

    if errors:
        raise DataError("; ".join(errors))

    observations = []
    for i in range(len(df)):
        ts = stamps.iloc[i]
        observations.append(
            Observation(
                station=df["station"].iloc[i].strip(),
                timestamp=None if pd.isna(ts) else ts.to_pydatetime(),
                narrative=df["narrative"].iloc[i],
                label=labels[i],
                **{name: numeric[name][i] for name in FEATURE_NAMES},
            )
        )
    logger.debug("parsed %d observations", len(observations))
    return Dataset(tuple(observations))


def _format_timestamp(ts: datetime) -> str:
    """UTC text; fractional seconds only when present."""
    ts = ts.astimezone(timezone.utc) if ts.tzinfo is not None else ts
    return ts.strftime(TIMESTAMP_FORMAT_FRACTIONAL if ts.microsecond else TIMESTAMP_FORMAT)


def _format_number(value: Optional[float]) -> str:
    if value is None:
        return "M"
    return repr(float(value))


def write_csv(ds: Dataset, destination: Union[str, os.PathLike, io.TextIOBase]):
    """Writes a Dataset in the schema parse_csv reads.

    Missing readings are written as ``M`` and unlabeled rows get an empty
    label field, so parse_csv(write_csv(ds)) reproduces ds.
    """
    records = []
    for obs in ds.observations:
        row = {
            "station": obs.station,
            "valid": (
                _format_timestamp(obs.timestamp) if obs.timestamp is not None else ""
            ),
        }
        for name in FEATURE_NAMES:
            row[name] = _format_number(getattr(obs, name))
        row["narrative"] = obs.narrative
        row["label"] = obs.label.token if obs.label is not None else ""
        records.append(row)
    frame = pd.DataFrame.from_records(records, columns=list(REQUIRED_COLUMNS))
    frame.to_csv(destination, index=False, lineterminator="\n")


# --- Imputation ---

@dataclass(frozen=True)
class ImputationMeans:
    """Per-feature fill values computed from training rows."""

    means: Tuple[float, ...]
    fitted_on: int

    def fill(self, X: np.ndarray) -> np.ndarray:
        """Returns a copy of X with NaN entries replaced by the means."""
        out = np.array(X, dtype=np.float64, copy=True)
        mask = np.isnan(out)
        if mask.any():
            out[mask] = np.take(np.asarray(self.means), np.nonzero(mask)[1])
        return out


def fit_imputer(ds: Dataset, stats_source_rows: Sequence[int]) -> ImputationMeans:
    """Computes per-feature means over the non-missing readings of the rows.

    Raises:
        DataError: If a feature is missing in every source row.
    """
    X = ds.numeric_matrix(stats_source_rows)
    means = []
    for c, name in enumerate(FEATURE_NAMES):
        present = X[~np.isnan(X[:, c]), c]
        if present.size == 0:
            raise DataError(f"feature {name} is entirely missing in the source rows")
        means.append(float(present.mean()))
    return ImputationMeans(tuple(means), len(stats_source_rows))


def impute(
    ds: Dataset, rows: Sequence[int], stats_source_rows: Sequence[int]
) -> Dataset:
    """Fills missing numerics of the selected rows with source-row means.

    The returned Dataset has the same length and order as ``ds``; rows
    outside ``rows`` are copied unchanged. Narratives are never imputed.

    Raises:
        DataError: If a feature is entirely missing in stats_source_rows.
    """
    means = fit_imputer(ds, stats_source_rows).means
    selected = set(rows)
    observations = []
    for i, obs in enumerate(ds.observations):
        if i in selected and any(v is None for v in obs.features()):
            filled = [m if v is None else v for v, m in zip(obs.features(), means)]
            obs = obs.with_features(filled)
        observations.append(obs)
    return Dataset(tuple(observations))


# --- Standardization ---

@dataclass(frozen=True)
class StandardizationStats:
    """Per-feature mean and population standard deviation."""

    mean: Tuple[float, ...]
    std: Tuple[float, ...]
    zero_variance: Tuple[bool, ...]
    fitted_on: int

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - np.asarray(self.mean)) / np.asarray(self.std)

    def digest(self) -> str:
        payload = json.dumps(
            {
                "mean": list(self.mean),
                "std": list(self.std),
                "zero_variance": list(self.zero_variance),
                "fitted_on": self.fitted_on,
            },
            sort_keys=True,
        )
        return sha256_bytes(payload.encode("utf-8"))


def fit_standardizer(ds: Dataset, rows: Sequence[int]) -> StandardizationStats:
    """Fits mean / population std (divide by N) over exactly ``rows``.

    Zero-variance features get std 1 and are flagged, so they
    standardize to 0.

    Raises:
        DataError: On an empty row list or remaining missing values.
    """
    if len(rows) == 0:
        raise DataError("cannot fit standardizer on an empty row list")
    X = ds.numeric_matrix(rows)
    if np.isnan(X).any():
        col = FEATURE_NAMES[int(np.nonzero(np.isnan(X).any(axis=0))[0][0])]
        raise DataError(f"feature {col} has missing values; impute before standardizing")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    zero = std < 1e-12
    std = np.where(zero, 1.0, std)
    for name, flag in zip(FEATURE_NAMES, zero):
        if flag:
            logger.info("feature %s has zero variance; standardizes to 0", name)
    return StandardizationStats(
        mean=tuple(float(v) for v in mean),
        std=tuple(float(v) for v in std),
        zero_variance=tuple(bool(v) for v in zero),
        fitted_on=len(rows),
    )


def apply_standardizer(
    stats: StandardizationStats, ds: Dataset, rows: Sequence[int]
) -> np.ndarray:
    """Returns the standardized real[rows x 6] matrix."""
    return stats.transform(ds.numeric_matrix(rows))


# --- Splits ---

@dataclass(frozen=True)
class SplitSpec:
    """Train/test partition plus optional per-row fold ids (-1 = not in any fold)."""

    train_indices: Tuple[int, ...]
    test_indices: Tuple[int, ...]
    fold_assignments: Optional[Tuple[int, ...]] = None

    def fold(self, k: int) -> Tuple[List[int], List[int]]:
        """(training rows, held-out rows) for fold k."""
        if self.fold_assignments is None:
            raise UsageError("split has no fold assignments")
        held = [i for i, f in enumerate(self.fold_assignments) if f == k]
        train = [i for i, f in enumerate(self.fold_assignments) if f >= 0 and f != k]
        return train, held


def train_test_split(ds: Dataset, train_fraction: float, seed: int) -> SplitSpec:
    """Seeded uniform random split with round(N * fraction) training rows.

    Halves round up.
    """
    if not 0.0 < train_fraction < 1.0:
        raise UsageError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(n * train_fraction + 0.5))
    return SplitSpec(
        train_indices=tuple(sorted(int(i) for i in perm[:n_train])),
        test_indices=tuple(sorted(int(i) for i in perm[n_train:])),
    )


def stratified_kfold(ds: Dataset, k: int, seed: int) -> SplitSpec:
    """Assigns labeled rows to k folds, stratified by class.

    Each class is shuffled and dealt round-robin; the dealing position
    carries over between classes so total fold sizes also differ by at
    most 1. Unlabeled rows get fold -1 and land in test_indices.

    Raises:
        UsageError: If k < 2.
        DataError: If a class has fewer than k members.
    """
    if k < 2:
        raise UsageError("folds must be ≥ 2")
    rng = np.random.default_rng(seed)
    by_class: Dict[RiskLabel, List[int]] = {RiskLabel.LOW: [], RiskLabel.HIGH: []}
    unlabeled = []
    for i, obs in enumerate(ds.observations):
        if obs.label is None:
            unlabeled.append(i)
        else:
            by_class[obs.label].append(i)

    for label, members in by_class.items():
        if len(members) < k:
            raise DataError(
                f"class {label.name} has {len(members)} members, fewer than k={k}"
            )

    folds = [-1] * len(ds)
    offset = 0
    for label in (RiskLabel.LOW, RiskLabel.HIGH):
        members = np.asarray(by_class[label])
        for pos, i in enumerate(rng.permutation(members)):
            folds[int(i)] = (offset + pos) % k
        offset = (offset + len(members)) % k

    labeled = sorted(by_class[RiskLabel.LOW] + by_class[RiskLabel.HIGH])
    return SplitSpec(
        train_indices=tuple(labeled),
        test_indices=tuple(unlabeled),
        fold_assignments=tuple(folds),
    )

"""Seeded synthetic station data with a known Bayes-optimal accuracy.

Numeric signal: each informative feature has a unit-variance latent
value with mean +delta_num/2 (HIGH) or -delta_num/2 (LOW); other
features are pure noise. Text signal: one damage phrase is emitted with
probability 0.5 + delta_text/2 (HIGH) or 0.5 - delta_text/2 (LOW),
otherwise a calm phrase. In complementary mode every sample carries its
signal in exactly one channel, chosen by a fair coin.
"""

import logging
import math
from datetime import datetime, timedelta, timezone
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.integrate import quad
from scipy.stats import norm

from windfuse.core import FEATURE_NAMES, FEATURE_RANGES, Dataset, Observation, RiskLabel
from windfuse.errors import DataError

logger = logging.getLogger(__name__)

STATION = "KSUX"
START = datetime(2023, 5, 1, tzinfo=timezone.utc)

# Physical (center, scale) of each feature's unit-variance latent value.
PHYSICAL = {
    "tmpf": (70.0, 10.0),
    "dwpf": (50.0, 8.0),
    "relh": (50.0, 12.0),
    "drct": (180.0, 40.0),
    "sknt": (15.0, 4.0),
    "gust": (25.0, 5.0),
}

NEUTRAL_TEMPLATES = (
    "Hourly surface observation at the airport station.",
    "Routine report filed by the observer.",
    "Station log entry for the afternoon period.",
    "Automated observation recorded.",
)
DAMAGE_PHRASES = (
    "Extreme gusts caused significant property damage.",
    "Trees downed and power lines damaged.",
    "Roof damage reported across several blocks.",
)
CALM_PHRASES = (
    "No impacts reported.",
    "Conditions remained calm.",
    "Light breeze with clear skies.",
)


class SynthSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n: int = Field(1000, ge=2)
    delta_num: float = Field(2.0, ge=0.0)
    delta_text: float = Field(0.0, ge=0.0, le=1.0)
    pi_high: float = Field(0.5, gt=0.0, lt=1.0)
    seed: int = Field(0, ge=0)
    complementary: bool = False
    informative: Tuple[str, ...] = ("sknt",)
    # Features held at their physical center (no noise, no signal)
    constant_features: Tuple[str, ...] = ()

    @field_validator("informative", "constant_features")
    @classmethod
    def _known_features(cls, v: Tuple[str, ...]) -> Tuple[str, ...]:
        unknown = [name for name in v if name not in FEATURE_NAMES]
        if unknown:
            raise ValueError(f"unknown features: {unknown}")
        return v


def _to_physical(name: str, latent: np.ndarray) -> np.ndarray:
    center, scale = PHYSICAL[name]
    low, high = FEATURE_RANGES[name]
    return np.clip(
        center + scale * latent,
        -np.inf if low is None else low,
        np.inf if high is None else high,
    )


def generate(spec: SynthSpec) -> Dataset:
    """Draws spec.n labeled observations; a pure function of spec."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    high = rng.random(n) < spec.pi_high
    sign = np.where(high, 1.0, -1.0)
    latent = rng.standard_normal((n, len(FEATURE_NAMES)))
    if spec.complementary:
        numeric_on = rng.random(n) < 0.5
    else:
        numeric_on = np.ones(n, dtype=bool)
    text_on = ~numeric_on if spec.complementary else np.ones(n, dtype=bool)

    for name in spec.informative:
        c = FEATURE_NAMES.index(name)
        latent[:, c] += np.where(numeric_on, sign * spec.delta_num / 2.0, 0.0)
    for name in spec.constant_features:
        latent[:, FEATURE_NAMES.index(name)] = 0.0

    p_keyword = 0.5 + np.where(text_on, sign * spec.delta_text / 2.0, 0.0)
    keyword = rng.random(n) < p_keyword
    template = rng.integers(0, len(NEUTRAL_TEMPLATES), size=n)
    phrase = rng.integers(0, len(DAMAGE_PHRASES), size=n)

    columns = {
        name: _to_physical(name, latent[:, c]) for c, name in enumerate(FEATURE_NAMES)
    }
    observations = []
    for i in range(n):
        phrases = DAMAGE_PHRASES if keyword[i] else CALM_PHRASES
        observations.append(
            Observation(
                station=STATION,
                timestamp=START + timedelta(hours=i),
                narrative=f"{NEUTRAL_TEMPLATES[template[i]]} {phrases[phrase[i]]}",
                label=RiskLabel.HIGH if high[i] else RiskLabel.LOW,
                **{name: float(columns[name][i]) for name in FEATURE_NAMES},
            )
        )
    logger.info(
        "generated %d observations (%d high, complementary=%s)",
        n, int(high.sum()), spec.complementary,
    )
    return Dataset(tuple(observations))


def _keyword_probs(spec: SynthSpec) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    """P(keyword outcome | class) for outcomes (absent, present), per class (H, L)."""
    p_h = 0.5 + spec.delta_text / 2.0
    p_l = 0.5 - spec.delta_text / 2.0
    return (1.0 - p_h, p_h), (1.0 - p_l, p_l)


def _independent_accuracy(spec: SynthSpec, separation: float) -> float:
    # For each keyword outcome K, HIGH wins iff s > -c_K / separation with
    # c_K = ln(pi P(K|H) / ((1 - pi) P(K|L))) and s ~ N(+-separation/2, 1).
    total = 0.0
    for ph, pl in zip(*_keyword_probs(spec)):
        a = spec.pi_high * ph
        b = (1.0 - spec.pi_high) * pl
        if a == 0.0 or b == 0.0 or separation == 0.0:
            total += max(a, b)
            continue
        c = math.log(a / b)
        total += a * norm.cdf(separation / 2.0 + c / separation)
        total += b * norm.cdf(separation / 2.0 - c / separation)
    return float(total)


def _complementary_accuracy(spec: SynthSpec, separation: float) -> float:
    # The class densities are mixtures over the hidden channel; integrate
    # the Bayes rule along the one informative direction.
    half = separation / 2.0
    total = 0.0
    for ph, pl in zip(*_keyword_probs(spec)):
        def best(s, ph=ph, pl=pl):
            f_h = 0.5 * norm.pdf(s - half) * 0.5 + 0.5 * norm.pdf(s) * ph
            f_l = 0.5 * norm.pdf(s + half) * 0.5 + 0.5 * norm.pdf(s) * pl
            return max(spec.pi_high * f_h, (1.0 - spec.pi_high) * f_l)

        value, _ = quad(best, -half - 12.0, half + 12.0, limit=200, points=sorted({-half, 0.0, half}))
        total += value
    return float(total)


def bayes_accuracy(spec: SynthSpec) -> float:
    """Accuracy of the Bayes-optimal rule for the spec's generator.

    The informative features project onto a single direction with
    separation delta_num * sqrt(m); the keyword channel is enumerated.

    Raises:
        DataError: If an informative feature is also held constant.
    """
    overlap = set(spec.informative) & set(spec.constant_features)
    if overlap:
        raise DataError(f"unsupported spec: features both informative and constant: {sorted(overlap)}")
    separation = spec.delta_num * math.sqrt(len(spec.informative))
    if spec.complementary:
        return _complementary_accuracy(spec, separation)
    return _independent_accuracy(spec, separation)

"""Run configuration.

Defaults are the full-scale training recipe: 100 Gini trees of depth 12
with sqrt-of-features subsampling, a 1,000-term uni/bigram TF-IDF with a
document-frequency cutoff of 5, 128-token sequences, 150 AdamW epochs at
lr 3e-5 / weight decay 0.01 and stratified 5-fold cross-validation.
"""

import json
import math
from typing import Any, Dict, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from windfuse.errors import UsageError


class _Group(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ForestParams(_Group):
    """Random Forest (numeric stream) parameters."""

    n_trees: int = Field(100, ge=1)
    max_depth: int = Field(12, ge=0)
    # None means ceil(sqrt(number of input columns)), i.e. 3 for six features
    max_features: Optional[int] = Field(None, ge=1)
    min_samples_split: int = Field(2, ge=2)
    bootstrap: bool = True
    class_weighted: bool = True
    # Append TF-IDF columns to the forest input (alternate reading of the recipe)
    use_tfidf: bool = False

    def features_per_split(self, n_features: int) -> int:
        return min(self.max_features or math.ceil(math.sqrt(n_features)), n_features)


class LogisticParams(_Group):
    """Logistic regression baseline parameters."""

    l2: float = Field(1e-4, ge=0.0)
    lr: float = Field(0.5, gt=0.0)
    max_iter: int = Field(10_000, ge=1)
    tol: float = Field(1e-6, gt=0.0)


class TextParams(_Group):
    """Tokenizer, TF-IDF and text encoder parameters."""

    max_terms: int = Field(1000, ge=1)
    min_df: int = Field(5, ge=1)
    max_tokens: int = Field(128, ge=2)
    vocab_min_count: int = Field(1, ge=1)
    d_model: int = Field(64, ge=2)
    n_heads: int = Field(4, ge=1)
    n_layers: int = Field(2, ge=0)
    ff_mult: int = Field(4, ge=1)
    epochs: int = Field(150, ge=0)
    lr: float = Field(3e-5, gt=0.0)
    weight_decay: float = Field(0.01, ge=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = Field(32, ge=1)
    val_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    log_every: int = Field(10, ge=1)

    @field_validator("n_heads")
    @classmethod
    def _heads_divide(cls, v: int, info) -> int:
        d = info.data.get("d_model")
        if d is not None and d % v != 0:
            raise ValueError(f"d_model={d} is not divisible by n_heads={v}")
        return v


class FusionParams(_Group):
    """Meta-classifier parameters."""

    hidden: int = Field(16, ge=1)
    epochs: int = Field(150, ge=0)
    lr: float = Field(1e-2, gt=0.0)
    weight_decay: float = Field(0.01, ge=0.0)
    # Forest half of the training fused vectors: out-of-bag or in-sample probabilities
    rf_inputs: Literal["oob", "in-sample"] = "oob"
    log_every: int = Field(10, ge=1)


class EvalParams(_Group):
    """Evaluation and interpretability parameters."""

    folds: int = Field(5, ge=2)
    train_fraction: float = Field(0.8, gt=0.0, lt=1.0)
    sensitivity_h: float = Field(1e-3, gt=0.0)
    sensitivity_method: Literal["fd", "exact-meta"] = "fd"
    all_samples: bool = False


class RunConfig(_Group):
    """Top-level configuration for one pipeline run."""

    seed: int = Field(0, ge=0)
    rf: ForestParams = ForestParams()
    logistic: LogisticParams = LogisticParams()
    text: TextParams = TextParams()
    fusion: FusionParams = FusionParams()
    eval: EvalParams = EvalParams()

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        """Returns a copy with dotted-key overrides applied and validated.

        Args:
            overrides: Mapping such as {"text.epochs": 20, "seed": 3}.

        Raises:
            UsageError: On unknown keys or values failing validation.
        """
        data = self.model_dump()
        for key, value in overrides.items():
            parts = key.split(".")
            node = data
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise UsageError(f"unknown config key: {key}")
                node = node[part]
            if parts[-1] not in node:
                raise UsageError(f"unknown config key: {key}")
            node[parts[-1]] = value
        try:
            return RunConfig.model_validate(data)
        except ValidationError as e:
            raise UsageError(f"invalid configuration: {e}") from e

    def to_json(self) -> str:
        """Canonical JSON (sorted keys) used in manifests and bundles."""
        return json.dumps(self.model_dump(mode="json"), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.model_validate(json.loads(text))

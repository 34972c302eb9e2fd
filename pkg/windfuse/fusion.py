"""Late fusion of the two streams and the end-to-end prediction pipeline.

The forest's class probabilities and the encoder's class logits are
concatenated into a 4-vector and passed through a small feedforward
meta-classifier. Both streams are frozen while the meta-classifier trains.
"""

import io
import json
import logging
import math
import os
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn

from windfuse import ingest, tabular_models, text_models
from windfuse.config import FusionParams, RunConfig
from windfuse.core import (
    Dataset, EpochRecord, Observation, RiskLabel, StreamOutput,
)
from windfuse.errors import DataError, ModelError
from windfuse.utils import seeded_torch, sha256_bytes
from windfuse.version import BUNDLE_FORMAT_VERSION

logger = logging.getLogger(__name__)

P_CLAMP = 1e-12
BUNDLE_MEMBER = "bundle.json"
# Fixed zip timestamp so identical bundles are byte-identical.
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class FusedVector:
    """[z_RF(2); z_text(2)]: probabilities first, raw logits second."""

    values: Tuple[float, float, float, float]


def fuse(z_rf: Sequence[float], z_text: Sequence[float]) -> FusedVector:
    """Concatenates forest probabilities and text logits, in that order.

    Raises:
        DataError: If z_rf is not a probability vector (sum off by > 1e-6).
    """
    if len(z_rf) != 2 or len(z_text) != 2:
        raise DataError("fuse expects two length-2 vectors")
    if any(p < 0.0 or p > 1.0 for p in z_rf) or abs(sum(z_rf) - 1.0) > 1e-6:
        raise DataError(f"z_rf is not a probability vector: {list(z_rf)}")
    return FusedVector(tuple(float(v) for v in (*z_rf, *z_text)))


def fuse_matrix(rf_probs: np.ndarray, text_logits: np.ndarray) -> np.ndarray:
    """Row-wise fuse for batches: real[n x 4]."""
    sums = rf_probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        bad = int(np.flatnonzero(np.abs(sums - 1.0) > 1e-6)[0])
        raise DataError(f"z_rf of row {bad} is not a probability vector")
    return np.hstack([rf_probs, text_logits]).astype(np.float64)


class MetaClassifier(nn.Module):
    """4 -> hidden (ReLU) -> 2."""

    def __init__(self, hidden: int = 16):
        super().__init__()
        self.hidden = nn.Linear(4, hidden)
        self.out = nn.Linear(hidden, 2)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.out(torch.relu(self.hidden(z)))


def build_meta(params: FusionParams, seed: int) -> MetaClassifier:
    with seeded_torch(seed):
        g = MetaClassifier(params.hidden)
    return g.double()


@dataclass(frozen=True)
class MetaOutput:
    logits: Tuple[float, float]
    p_high: float


def meta_forward(g: MetaClassifier, z: Union[FusedVector, Sequence[float]]) -> MetaOutput:
    """logits = W2 relu(W1 z + b1) + b2; p_high = softmax(logits)[HIGH]."""
    values = z.values if isinstance(z, FusedVector) else z
    with torch.no_grad():
        logits = g(torch.as_tensor(values, dtype=torch.float64).reshape(1, 4))[0]
        p_high = torch.softmax(logits, dim=0)[RiskLabel.HIGH]
    return MetaOutput((float(logits[0]), float(logits[1])), float(p_high))


def meta_p_high(g: MetaClassifier, fused: np.ndarray) -> np.ndarray:
    """Batched p_high for real[n x 4] fused inputs."""
    with torch.no_grad():
        logits = g(torch.as_tensor(fused, dtype=torch.float64))
        return torch.softmax(logits, dim=1)[:, RiskLabel.HIGH].numpy()


def cross_entropy(p_high: float, y: int) -> float:
    """Binary cross-entropy with p clamped to [1e-12, 1 - 1e-12]; HIGH = 1."""
    p = min(max(float(p_high), P_CLAMP), 1.0 - P_CLAMP)
    return -(y * math.log(p) + (1 - y) * math.log(1.0 - p))


# --- Streams ---

def forest_digest(forest: tabular_models.ForestModel) -> str:
    return sha256_bytes(tabular_models.dumps_forest(forest).encode("utf-8"))


def encoder_digest(encoder: text_models.TextEncoderModel) -> str:
    payload = json.dumps(text_models.encoder_to_dict(encoder), sort_keys=True)
    return sha256_bytes(payload.encode("utf-8"))


@dataclass
class Streams:
    """The two frozen stream models plus the optional TF-IDF forest input."""

    forest: Optional[tabular_models.ForestModel]
    encoder: Optional[text_models.TextEncoderModel]
    tfidf: Optional[text_models.TfidfVectorizer] = None

    def require(self):
        for name, component in (("forest", self.forest), ("text encoder", self.encoder)):
            if component is None:
                raise ModelError(f"{name} is not fitted")

    def digests(self) -> Dict[str, str]:
        self.require()
        return {"forest": forest_digest(self.forest), "encoder": encoder_digest(self.encoder)}

    def forest_input(self, Z: np.ndarray, tokens: Sequence[Sequence[str]]) -> np.ndarray:
        """Standardized numerics, with dense TF-IDF columns appended if enabled."""
        if self.tfidf is None:
            return Z
        return np.hstack([Z, text_models.tfidf_matrix(self.tfidf, tokens).toarray()])


def train_fusion(
    g: MetaClassifier,
    streams: Streams,
    X_forest: np.ndarray,
    tokens: Sequence[Sequence[str]],
    labels: Sequence[int],
    params: FusionParams,
) -> Tuple[MetaClassifier, List[EpochRecord]]:
    """Trains g with AdamW on fused vectors of the training rows.

    Fused vectors are computed once up front; with ``rf_inputs="oob"``
    the forest half comes from out-of-bag probabilities. Training is
    full batch.

    Raises:
        ModelError: If a stream is unfitted or its parameters change.
    """
    streams.require()
    before = streams.digests()

    if params.rf_inputs == "oob" and streams.forest.in_bag is not None:
        rf = tabular_models.oob_predict_proba(streams.forest, X_forest)
    else:
        rf = streams.forest.predict_proba(X_forest)
    logits = text_models.encode_batch(streams.encoder, tokens)
    fused = torch.from_numpy(fuse_matrix(rf, logits))
    target = torch.from_numpy(np.asarray(labels, dtype=np.int64))

    optimizer = torch.optim.AdamW(
        g.parameters(), lr=params.lr, weight_decay=params.weight_decay
    )
    curve: List[EpochRecord] = []
    for epoch in range(1, params.epochs + 1):
        g.train()
        loss = F.cross_entropy(g(fused), target)
        if not torch.isfinite(loss):
            raise ModelError(f"fusion training diverged at epoch {epoch}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        with torch.no_grad():
            out = g(fused)
            train_loss = float(F.cross_entropy(out, target))
            train_acc = float((out.argmax(dim=1) == target).double().mean())
        curve.append(EpochRecord(epoch, train_loss, None, train_acc, None))
        if epoch % params.log_every == 0 or epoch == params.epochs:
            logger.info(
                "fusion epoch %d/%d loss=%.4f acc=%.4f",
                epoch, params.epochs, train_loss, train_acc,
            )
    g.eval()

    if streams.digests() != before:
        raise ModelError("stream parameters changed during fusion training")
    return g, curve


# --- Pipeline ---

@dataclass(frozen=True)
class Prediction:
    label: RiskLabel
    p_high: float
    fused_input: FusedVector


def _label_for(p_high: float) -> RiskLabel:
    # A tie goes to HIGH.
    return RiskLabel.HIGH if p_high >= 0.5 else RiskLabel.LOW


@dataclass(frozen=True)
class SampleSet:
    """Rows prepared for scoring with the narrative held fixed."""

    rows: Tuple[int, ...]
    standardized: np.ndarray
    tokens: Tuple[Tuple[str, ...], ...]
    text_logits: np.ndarray

    def __len__(self) -> int:
        return len(self.rows)

    def subset(self, positions: Sequence[int]) -> "SampleSet":
        positions = list(positions)
        return SampleSet(
            rows=tuple(self.rows[i] for i in positions),
            standardized=self.standardized[positions],
            tokens=tuple(self.tokens[i] for i in positions),
            text_logits=self.text_logits[positions],
        )


@dataclass
class Pipeline:
    """Everything needed to turn an Observation into a Prediction."""

    config: RunConfig
    imputer: Optional[ingest.ImputationMeans] = None
    stats: Optional[ingest.StandardizationStats] = None
    streams: Streams = field(default_factory=lambda: Streams(None, None))
    meta: Optional[MetaClassifier] = None
    curves: Dict[str, List[EpochRecord]] = field(default_factory=dict)

    def require(self):
        """Raises ModelError naming the first absent component."""
        for name, component in (
            ("imputer", self.imputer),
            ("standardizer", self.stats),
            ("forest", self.streams.forest),
            ("text encoder", self.streams.encoder),
            ("meta-classifier", self.meta),
        ):
            if component is None:
                raise ModelError(f"pipeline component missing: {name}")

    def standardize(self, ds: Dataset, rows: Sequence[int]) -> np.ndarray:
        return self.stats.transform(self.imputer.fill(ds.numeric_matrix(rows)))

    def samples(self, ds: Dataset, rows: Optional[Sequence[int]] = None) -> SampleSet:
        self.require()
        rows = ds.all_rows() if rows is None else list(rows)
        tokens = tuple(tuple(text_models.tokenize(n)) for n in ds.narratives(rows))
        return SampleSet(
            rows=tuple(rows),
            standardized=self.standardize(ds, rows),
            tokens=tokens,
            text_logits=text_models.encode_batch(self.streams.encoder, tokens),
        )

    def rf_probs(self, standardized: np.ndarray, samples: SampleSet) -> np.ndarray:
        X = self.streams.forest_input(standardized, samples.tokens)
        return self.streams.forest.predict_proba(X)

    def fused(self, standardized: np.ndarray, samples: SampleSet) -> np.ndarray:
        return fuse_matrix(self.rf_probs(standardized, samples), samples.text_logits)

    def score(self, standardized: np.ndarray, samples: SampleSet) -> np.ndarray:
        """p_high for (possibly perturbed) standardized numerics of the samples."""
        return meta_p_high(self.meta, self.fused(standardized, samples))

    def predict_scores(self, ds: Dataset, rows: Optional[Sequence[int]] = None) -> np.ndarray:
        samples = self.samples(ds, rows)
        return self.score(samples.standardized, samples)


def fit_pipeline(ds: Dataset, rows: Sequence[int], config: RunConfig) -> Pipeline:
    """Impute -> standardize -> forest -> encoder -> frozen-stream fusion.

    Every statistic is computed from ``rows`` only.

    Raises:
        DataError: On unlabeled or single-class training rows.
    """
    rows = list(rows)
    y = ds.labels_array(rows)
    if len(np.unique(y)) < 2:
        raise DataError("training rows contain a single class")
    seed = config.seed

    imputer = ingest.fit_imputer(ds, rows)
    stats = ingest.fit_standardizer(ingest.impute(ds, rows, rows), rows)
    Z = stats.transform(imputer.fill(ds.numeric_matrix(rows)))
    tokens = [text_models.tokenize(n) for n in ds.narratives(rows)]

    tfidf = None
    if config.rf.use_tfidf:
        tfidf = text_models.fit_tfidf(tokens, config.text.max_terms, config.text.min_df)
    streams = Streams(forest=None, encoder=None, tfidf=tfidf)
    X_forest = streams.forest_input(Z, tokens)

    logger.info("fitting forest on %d rows x %d columns", *X_forest.shape)
    streams.forest = tabular_models.fit_forest(X_forest, y, config.rf, seed)

    vocab = text_models.Vocabulary.build(tokens, config.text.vocab_min_count)
    logger.info("training text encoder (vocabulary %d)", len(vocab))
    encoder = text_models.build_encoder(vocab, config.text, seed)
    streams.encoder, text_curve = text_models.train_encoder(
        encoder, tokens, y, config.text, seed
    )

    logger.info("training meta-classifier on frozen streams")
    meta, fusion_curve = train_fusion(
        build_meta(config.fusion, seed), streams, X_forest, tokens, y, config.fusion
    )
    return Pipeline(
        config=config,
        imputer=imputer,
        stats=stats,
        streams=streams,
        meta=meta,
        curves={"text": text_curve, "fusion": fusion_curve},
    )


def stream_outputs(pipeline: Pipeline, ds: Dataset, rows: Optional[Sequence[int]] = None) -> List[StreamOutput]:
    samples = pipeline.samples(ds, rows)
    rf = pipeline.rf_probs(samples.standardized, samples)
    return [
        StreamOutput(tuple(float(v) for v in p), tuple(float(v) for v in z))
        for p, z in zip(rf, samples.text_logits)
    ]


def predict_batch(pipeline: Pipeline, ds: Dataset, rows: Optional[Sequence[int]] = None) -> List[Prediction]:
    """Predictions for the selected rows, in input order."""
    samples = pipeline.samples(ds, rows)
    fused = pipeline.fused(samples.standardized, samples)
    p_high = meta_p_high(pipeline.meta, fused)
    return [
        Prediction(_label_for(float(p)), float(p), FusedVector(tuple(float(v) for v in z)))
        for p, z in zip(p_high, fused)
    ]


def predict(pipeline: Pipeline, obs: Observation) -> Prediction:
    """Standardize -> forest, tokenize -> encode, fuse, meta_forward, threshold 0.5.

    Raises:
        ModelError: Naming the absent component if the pipeline is incomplete.
    """
    return predict_batch(pipeline, Dataset((obs,)))[0]


def predictions_to_csv(
    predictions: Sequence[Prediction],
    destination: Union[str, os.PathLike, io.TextIOBase],
    row_ids: Optional[Sequence[int]] = None,
):
    """Writes row_id, p_high, label rows."""
    row_ids = range(len(predictions)) if row_ids is None else row_ids
    frame = pd.DataFrame({
        "row_id": list(row_ids),
        "p_high": [repr(p.p_high) for p in predictions],
        "label": [p.label.token for p in predictions],
    })
    frame.to_csv(destination, index=False, lineterminator="\n")


# --- Bundle ---

def _meta_to_dict(g: MetaClassifier) -> Dict:
    return {
        "hidden": g.hidden.out_features,
        "state": {
            name: {"shape": list(t.shape), "data": t.detach().reshape(-1).tolist()}
            for name, t in g.state_dict().items()
        },
    }


def _meta_from_dict(doc: Dict) -> MetaClassifier:
    with seeded_torch(0):
        g = MetaClassifier(doc["hidden"]).double()
    g.load_state_dict({
        name: torch.tensor(e["data"], dtype=torch.float64).reshape(e["shape"])
        for name, e in doc["state"].items()
    })
    g.eval()
    return g


def _curve_to_list(curve: Sequence[EpochRecord]) -> List[Dict]:
    return [asdict(r) for r in curve]


def pipeline_to_dict(pipeline: Pipeline) -> Dict:
    pipeline.require()
    return {
        "format_version": BUNDLE_FORMAT_VERSION,
        "config": json.loads(pipeline.config.to_json()),
        "imputer": {"means": list(pipeline.imputer.means), "fitted_on": pipeline.imputer.fitted_on},
        "standardizer": {
            "mean": list(pipeline.stats.mean),
            "std": list(pipeline.stats.std),
            "zero_variance": list(pipeline.stats.zero_variance),
            "fitted_on": pipeline.stats.fitted_on,
        },
        "forest": tabular_models.forest_to_dict(pipeline.streams.forest),
        "encoder": text_models.encoder_to_dict(pipeline.streams.encoder),
        "tfidf": pipeline.streams.tfidf.to_dict() if pipeline.streams.tfidf else None,
        "meta": _meta_to_dict(pipeline.meta),
        "curves": {k: _curve_to_list(v) for k, v in sorted(pipeline.curves.items())},
    }


def pipeline_from_dict(doc: Dict) -> Pipeline:
    if doc.get("format_version") != BUNDLE_FORMAT_VERSION:
        raise ModelError(f"unsupported bundle format version {doc.get('format_version')}")
    tfidf_doc = doc.get("tfidf")
    return Pipeline(
        config=RunConfig.model_validate(doc["config"]),
        imputer=ingest.ImputationMeans(tuple(doc["imputer"]["means"]), doc["imputer"]["fitted_on"]),
        stats=ingest.StandardizationStats(
            mean=tuple(doc["standardizer"]["mean"]),
            std=tuple(doc["standardizer"]["std"]),
            zero_variance=tuple(doc["standardizer"]["zero_variance"]),
            fitted_on=doc["standardizer"]["fitted_on"],
        ),
        streams=Streams(
            forest=tabular_models.forest_from_dict(doc["forest"]),
            encoder=text_models.encoder_from_dict(doc["encoder"]),
            tfidf=text_models.TfidfVectorizer.from_dict(tfidf_doc) if tfidf_doc else None,
        ),
        meta=_meta_from_dict(doc["meta"]),
        curves={
            k: [EpochRecord(**r) for r in v] for k, v in doc.get("curves", {}).items()
        },
    )


def dumps_pipeline(pipeline: Pipeline) -> bytes:
    """Single zip archive holding bundle.json; byte-stable for equal pipelines."""
    payload = json.dumps(pipeline_to_dict(pipeline), sort_keys=True).encode("utf-8")
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo(BUNDLE_MEMBER, date_time=_ZIP_DATE)
        info.compress_type = zipfile.ZIP_DEFLATED
        info.external_attr = 0o644 << 16
        zf.writestr(info, payload)
    return buffer.getvalue()


def loads_pipeline(data: bytes) -> Pipeline:
    try:
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            doc = json.loads(zf.read(BUNDLE_MEMBER).decode("utf-8"))
    except (zipfile.BadZipFile, KeyError) as e:
        raise ModelError(f"not a pipeline bundle: {e}") from e
    return pipeline_from_dict(doc)


def save_pipeline(pipeline: Pipeline, path: Union[str, os.PathLike]) -> str:
    with open(path, "wb") as f:
        f.write(dumps_pipeline(pipeline))
    return os.fspath(path)


def load_pipeline(path: Union[str, os.PathLike]) -> Pipeline:
    if not os.path.exists(path):
        raise ModelError(f"pipeline bundle not found: {os.fspath(path)}")
    with open(path, "rb") as f:
        return loads_pipeline(f.read())

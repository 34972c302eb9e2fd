"""Text stream: tokenizer, vocabulary, TF-IDF and the transformer classifier.

The encoder is a small post-LN transformer trained from scratch with the
same contract as a pretrained sequence classifier: a CLS token is
prepended, sequences are truncated to ``max_tokens`` positions, padded
positions are masked out of attention, and the head reads the CLS
position to produce two class logits.
"""

import logging
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn.functional as F
from torch import nn

from windfuse.config import TextParams
from windfuse.core import EpochRecord
from windfuse.errors import DataError, ModelError
from windfuse.utils import seeded_torch

logger = logging.getLogger(__name__)

PAD, UNK, CLS = 0, 1, 2
# Bracketed names can never come out of tokenize(), which strips brackets.
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]")

VOCAB_FORMAT = "windfuse.vocab"
TFIDF_FORMAT = "windfuse.tfidf"
ENCODER_FORMAT = "windfuse.encoder"
FORMAT_VERSION = 1


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(text: str) -> List[str]:
    """Lowercases, splits on whitespace and strips edge punctuation per token.

    Internal punctuation survives: "60-MPH wind!" -> ["60-mph", "wind"].
    """
    tokens = []
    for raw in text.lower().split():
        start, end = 0, len(raw)
        while start < end and _is_punct(raw[start]):
            start += 1
        while end > start and _is_punct(raw[end - 1]):
            end -= 1
        if start < end:
            tokens.append(raw[start:end])
    return tokens


@dataclass(frozen=True)
class Vocabulary:
    """Dense token ids; PAD=0, UNK=1, CLS=2, corpus tokens from 3."""

    id_to_token: Tuple[str, ...]
    token_to_id: Dict[str, int] = field(compare=False, repr=False, default=None)

    def __post_init__(self):
        if tuple(self.id_to_token[:3]) != SPECIAL_TOKENS:
            raise DataError("vocabulary must start with [PAD], [UNK], [CLS]")
        object.__setattr__(
            self, "token_to_id", {t: i for i, t in enumerate(self.id_to_token)}
        )

    def __len__(self) -> int:
        return len(self.id_to_token)

    @classmethod
    def build(cls, corpus: Sequence[Sequence[str]], min_count: int = 1) -> "Vocabulary":
        """Builds from token lists; ids ordered by descending count, then token."""
        counts = Counter(t for doc in corpus for t in doc)
        kept = sorted(
            (t for t, c in counts.items() if c >= min_count and t not in SPECIAL_TOKENS),
            key=lambda t: (-counts[t], t),
        )
        return cls(SPECIAL_TOKENS + tuple(kept))

    def ids(self, tokens: Sequence[str], max_tokens: int) -> List[int]:
        """CLS + token ids (UNK for unknown), truncated to max_tokens positions."""
        out = [CLS] + [self.token_to_id.get(t, UNK) for t in tokens]
        return out[:max_tokens]

    def to_dict(self) -> Dict:
        return {"format": VOCAB_FORMAT, "version": FORMAT_VERSION,
                "tokens": list(self.id_to_token)}

    @classmethod
    def from_dict(cls, doc: Dict) -> "Vocabulary":
        if doc.get("format") != VOCAB_FORMAT:
            raise ModelError(f"not a vocabulary document: format={doc.get('format')!r}")
        return cls(tuple(doc["tokens"]))


# --- TF-IDF ---

def _terms(doc: Sequence[str]) -> List[str]:
    return list(doc) + [f"{a} {b}" for a, b in zip(doc, doc[1:])]


@dataclass(frozen=True)
class TfidfVectorizer:
    """Unigram + bigram TF-IDF with smooth idf = ln((1+N)/(1+df)) + 1."""

    terms: Tuple[str, ...]
    document_frequency: Tuple[int, ...]
    n_documents: int
    max_terms: int = 1000
    min_df: int = 5

    @property
    def index(self) -> Dict[str, int]:
        return {t: i for i, t in enumerate(self.terms)}

    @property
    def idf(self) -> np.ndarray:
        df = np.asarray(self.document_frequency, dtype=np.float64)
        return np.log((1.0 + self.n_documents) / (1.0 + df)) + 1.0

    def to_dict(self) -> Dict:
        return {
            "format": TFIDF_FORMAT,
            "version": FORMAT_VERSION,
            "terms": list(self.terms),
            "document_frequency": list(self.document_frequency),
            "n_documents": self.n_documents,
            "max_terms": self.max_terms,
            "min_df": self.min_df,
        }

    @classmethod
    def from_dict(cls, doc: Dict) -> "TfidfVectorizer":
        if doc.get("format") != TFIDF_FORMAT:
            raise ModelError(f"not a TF-IDF document: format={doc.get('format')!r}")
        return cls(
            terms=tuple(doc["terms"]),
            document_frequency=tuple(doc["document_frequency"]),
            n_documents=doc["n_documents"],
            max_terms=doc["max_terms"],
            min_df=doc["min_df"],
        )


def fit_tfidf(
    corpus: Sequence[Sequence[str]], max_terms: int = 1000, min_df: int = 5
) -> TfidfVectorizer:
    """Keeps the max_terms highest-df terms among those with df >= min_df.

    Ties in document frequency are broken lexicographically; the kept
    terms are indexed in lexicographic order.

    Raises:
        DataError: On an empty corpus or when no term survives.
    """
    if len(corpus) == 0:
        raise DataError("cannot fit TF-IDF on an empty corpus")
    df = Counter()
    for doc in corpus:
        df.update(set(_terms(doc)))
    survivors = [t for t, c in df.items() if c >= min_df]
    if not survivors:
        raise DataError(f"no term reaches the document-frequency cutoff of {min_df}")
    top = sorted(survivors, key=lambda t: (-df[t], t))[:max_terms]
    terms = tuple(sorted(top))
    logger.debug("TF-IDF vocabulary: %d of %d candidate terms", len(terms), len(df))
    return TfidfVectorizer(
        terms=terms,
        document_frequency=tuple(df[t] for t in terms),
        n_documents=len(corpus),
        max_terms=max_terms,
        min_df=min_df,
    )


def tfidf_matrix(vec: TfidfVectorizer, docs: Sequence[Sequence[str]]) -> sp.csr_matrix:
    """L2-normalized count x idf rows; documents with no known term stay zero."""
    index = vec.index
    idf = vec.idf
    data, indices, indptr = [], [], [0]
    for doc in docs:
        counts = Counter(index[t] for t in _terms(doc) if t in index)
        cols = sorted(counts)
        values = np.asarray([counts[c] * idf[c] for c in cols], dtype=np.float64)
        norm = float(np.sqrt(values @ values)) if len(values) else 0.0
        if norm > 0.0:
            values = values / norm
        data.extend(values.tolist())
        indices.extend(cols)
        indptr.append(len(indices))
    return sp.csr_matrix(
        (np.asarray(data, dtype=np.float64), np.asarray(indices, dtype=np.int64), indptr),
        shape=(len(docs), len(vec.terms)),
    )


def tfidf_transform(vec: TfidfVectorizer, doc: Sequence[str]) -> sp.csr_matrix:
    """Sparse 1 x |terms| TF-IDF vector for one token list."""
    return tfidf_matrix(vec, [doc])


# --- Encoder ---

class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product self-attention with a key padding mask."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=-1)
        q = q.view(b, t, self.n_heads, self.d_head).transpose(1, 2)
        k = k.view(b, t, self.n_heads, self.d_head).transpose(1, 2)
        v = v.view(b, t, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        # key_mask: (b, t) True for real tokens
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.out(ctx)


class EncoderLayer(nn.Module):
    """Post-LN block: x = LN(x + attn(x)); x = LN(x + ff(x))."""

    def __init__(self, d_model: int, n_heads: int, ff_mult: int):
        super().__init__()
        self.attn = MultiHeadSelfAttention(d_model, n_heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, ff_mult * d_model),
            nn.GELU(),
            nn.Linear(ff_mult * d_model, d_model),
        )
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.attn(x, key_mask))
        return self.norm2(x + self.ff(x))


class TextEncoderModel(nn.Module):
    """Token + learned positional embeddings, encoder layers and a CLS head."""

    def __init__(
        self,
        vocab: Vocabulary,
        d_model: int = 64,
        n_heads: int = 4,
        n_layers: int = 2,
        ff_mult: int = 4,
        max_tokens: int = 128,
    ):
        super().__init__()
        if d_model % n_heads != 0:
            raise ModelError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.vocab = vocab
        self.max_tokens = max_tokens
        self.hparams = {
            "d_model": d_model, "n_heads": n_heads, "n_layers": n_layers,
            "ff_mult": ff_mult, "max_tokens": max_tokens,
        }
        self.token_embedding = nn.Embedding(len(vocab), d_model)
        self.position_embedding = nn.Parameter(torch.zeros(max_tokens, d_model))
        self.layers = nn.ModuleList(
            [EncoderLayer(d_model, n_heads, ff_mult) for _ in range(n_layers)]
        )
        self.head = nn.Linear(d_model, 2)
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        nn.init.normal_(self.position_embedding, std=0.02)

    def forward(self, ids: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        """(batch, seq) ids and mask -> (batch, 2) logits."""
        t = ids.shape[1]
        x = self.token_embedding(ids) + self.position_embedding[:t]
        for layer in self.layers:
            x = layer(x, key_mask)
        return self.head(x[:, 0])


def build_encoder(vocab: Vocabulary, params: TextParams, seed: int) -> TextEncoderModel:
    """Creates a float64 encoder with seed-determined initial weights."""
    with seeded_torch(seed):
        model = TextEncoderModel(
            vocab,
            d_model=params.d_model,
            n_heads=params.n_heads,
            n_layers=params.n_layers,
            ff_mult=params.ff_mult,
            max_tokens=params.max_tokens,
        )
    return model.double()


def collate(
    vocab: Vocabulary, token_lists: Sequence[Sequence[str]], max_tokens: int
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Pads id sequences to the batch length; returns (ids, key_mask)."""
    seqs = [vocab.ids(tokens, max_tokens) for tokens in token_lists]
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    mask = torch.zeros((len(seqs), width), dtype=torch.bool)
    for i, s in enumerate(seqs):
        mask[i, : len(s)] = True
    return ids, mask


def encode(model: TextEncoderModel, tokens: Sequence[str]) -> np.ndarray:
    """z_text: the two class logits for one token list."""
    return encode_batch(model, [tokens])[0]


def encode_batch(
    model: TextEncoderModel, token_lists: Sequence[Sequence[str]], batch_size: int = 256
) -> np.ndarray:
    """real[n x 2] logits, in input order."""
    model.eval()
    out = np.zeros((len(token_lists), 2), dtype=np.float64)
    with torch.no_grad():
        for start in range(0, len(token_lists), batch_size):
            chunk = token_lists[start : start + batch_size]
            ids, mask = collate(model.vocab, chunk, model.max_tokens)
            out[start : start + len(chunk)] = model(ids, mask).numpy()
    return out


def _stratified_holdout(y: np.ndarray, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 1])
    train, val = [], []
    for c in (0, 1):
        members = rng.permutation(np.flatnonzero(y == c))
        n_val = int(math.floor(len(members) * fraction))
        val.extend(members[:n_val].tolist())
        train.extend(members[n_val:].tolist())
    return np.asarray(sorted(train), dtype=np.int64), np.asarray(sorted(val), dtype=np.int64)


def _loss_and_accuracy(
    model: TextEncoderModel, token_lists: Sequence[Sequence[str]], y: np.ndarray
) -> Tuple[float, float]:
    logits = torch.from_numpy(encode_batch(model, token_lists))
    target = torch.from_numpy(np.asarray(y, dtype=np.int64))
    loss = float(F.cross_entropy(logits, target))
    acc = float((logits.argmax(dim=1) == target).double().mean())
    return loss, acc


def train_encoder(
    model: TextEncoderModel,
    token_lists: Sequence[Sequence[str]],
    labels: Sequence[int],
    params: TextParams,
    seed: int = 0,
) -> Tuple[TextEncoderModel, List[EpochRecord]]:
    """Mini-batch AdamW on mean cross-entropy.

    A stratified ``params.val_fraction`` of the corpus is held out for the
    validation columns of the curve. Loss and accuracy are measured after
    every epoch.

    Raises:
        DataError: If only one class is present.
        ModelError: If the loss becomes non-finite (names the epoch).
    """
    y = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise DataError("text encoder training needs both classes")
    if params.val_fraction > 0.0:
        train_idx, val_idx = _stratified_holdout(y, params.val_fraction, seed)
    else:
        train_idx, val_idx = np.arange(len(y)), np.arange(0)
    train_tokens = [token_lists[i] for i in train_idx]
    val_tokens = [token_lists[i] for i in val_idx]
    y_train, y_val = y[train_idx], y[val_idx]

    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=params.lr,
        betas=tuple(params.betas),
        eps=params.eps,
        weight_decay=params.weight_decay,
    )
    rng = np.random.default_rng([seed, 2])
    curve: List[EpochRecord] = []
    for epoch in range(1, params.epochs + 1):
        model.train()
        order = rng.permutation(len(train_idx))
        for start in range(0, len(order), params.batch_size):
            batch = order[start : start + params.batch_size]
            ids, mask = collate(model.vocab, [train_tokens[i] for i in batch], model.max_tokens)
            target = torch.from_numpy(y_train[batch])
            loss = F.cross_entropy(model(ids, mask), target)
            if not torch.isfinite(loss):
                raise ModelError(f"text encoder training diverged at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

        train_loss, train_acc = _loss_and_accuracy(model, train_tokens, y_train)
        if not math.isfinite(train_loss):
            raise ModelError(f"text encoder training diverged at epoch {epoch}")
        val_loss = val_acc = None
        if len(val_idx):
            val_loss, val_acc = _loss_and_accuracy(model, val_tokens, y_val)
        curve.append(EpochRecord(epoch, train_loss, val_loss, train_acc, val_acc))
        if epoch % params.log_every == 0 or epoch == params.epochs:
            logger.info(
                "encoder epoch %d/%d train_loss=%.4f train_acc=%.4f val_loss=%s val_acc=%s",
                epoch, params.epochs, train_loss, train_acc,
                "-" if val_loss is None else f"{val_loss:.4f}",
                "-" if val_acc is None else f"{val_acc:.4f}",
            )
    model.eval()
    return model, curve


# --- Serialization ---

def encoder_to_dict(model: TextEncoderModel) -> Dict:
    """JSON-ready document: hyperparameters, vocabulary and float64 weights."""
    state = {
        name: {"shape": list(t.shape), "data": t.detach().reshape(-1).tolist()}
        for name, t in model.state_dict().items()
    }
    return {
        "format": ENCODER_FORMAT,
        "version": FORMAT_VERSION,
        "hparams": dict(model.hparams),
        "vocab": model.vocab.to_dict(),
        "state": state,
    }


def encoder_from_dict(doc: Dict) -> TextEncoderModel:
    if doc.get("format") != ENCODER_FORMAT:
        raise ModelError(f"not an encoder document: format={doc.get('format')!r}")
    vocab = Vocabulary.from_dict(doc["vocab"])
    with seeded_torch(0):
        model = TextEncoderModel(vocab, **doc["hparams"]).double()
    state = {
        name: torch.tensor(entry["data"], dtype=torch.float64).reshape(entry["shape"])
        for name, entry in doc["state"].items()
    }
    model.load_state_dict(state)
    model.eval()
    return model

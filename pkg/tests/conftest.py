import numpy as np
import pytest

from windfuse import fusion, ingest, synth
from windfuse.config import RunConfig
from windfuse.fusion import SampleSet

TINY_OVERRIDES = {
    "rf.n_trees": 10,
    "rf.max_depth": 4,
    "text.d_model": 8,
    "text.n_heads": 2,
    "text.n_layers": 1,
    "text.epochs": 3,
    "text.lr": 1e-3,
    "text.max_tokens": 32,
    "text.max_terms": 50,
    "text.min_df": 1,
    "fusion.epochs": 20,
}


def tiny(seed: int = 0, **extra) -> RunConfig:
    """A config small enough to fit a pipeline in about a second."""
    return RunConfig().with_overrides({**TINY_OVERRIDES, "seed": seed, **extra})


def bare_samples(standardized: np.ndarray) -> SampleSet:
    """SampleSet for scorers that only look at the numeric matrix."""
    n = len(standardized)
    return SampleSet(
        rows=tuple(range(n)),
        standardized=np.asarray(standardized, dtype=np.float64),
        tokens=((),) * n,
        text_logits=np.zeros((n, 2)),
    )


@pytest.fixture(scope="session")
def tiny_config() -> RunConfig:
    return tiny()


@pytest.fixture(scope="session")
def small_ds():
    return synth.generate(synth.SynthSpec(n=80, delta_num=3.0, delta_text=0.8, seed=1))


@pytest.fixture(scope="session")
def small_split(small_ds):
    return ingest.train_test_split(small_ds, 0.8, 0)


@pytest.fixture(scope="session")
def fitted(small_ds, small_split, tiny_config) -> fusion.Pipeline:
    return fusion.fit_pipeline(small_ds, small_split.train_indices, tiny_config)

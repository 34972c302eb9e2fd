import math

import numpy as np
import pytest
from scipy.stats import norm

from windfuse import synth
from windfuse.core import FEATURE_NAMES, RiskLabel
from windfuse.errors import DataError


def _labels(ds):
    return np.array([o.label is RiskLabel.HIGH for o in ds.observations])


def test_same_spec_same_data():
    spec = synth.SynthSpec(n=50, delta_num=2.0, delta_text=0.5, seed=9)
    assert synth.generate(spec) == synth.generate(spec)
    assert synth.generate(spec) != synth.generate(spec.model_copy(update={"seed": 10}))


def test_readings_respect_physical_ranges():
    ds = synth.generate(synth.SynthSpec(n=2000, delta_num=6.0, seed=0))
    X = ds.numeric_matrix()
    relh = X[:, FEATURE_NAMES.index("relh")]
    assert relh.min() >= 0.0 and relh.max() <= 100.0
    assert X[:, FEATURE_NAMES.index("sknt")].min() >= 0.0
    assert not np.isnan(X).any()


def test_constant_feature():
    ds = synth.generate(synth.SynthSpec(n=30, constant_features=("drct",)))
    assert {o.drct for o in ds.observations} == {synth.PHYSICAL["drct"][0]}


def test_class_frequency():
    ds = synth.generate(synth.SynthSpec(n=10000, pi_high=0.3, seed=1))
    assert abs(_labels(ds).mean() - 0.3) < 0.02


class TestBayesAccuracy:
    def test_numeric_only(self):
        assert synth.bayes_accuracy(synth.SynthSpec(delta_num=2.0)) == pytest.approx(norm.cdf(1.0))

    def test_text_only(self):
        spec = synth.SynthSpec(delta_num=0.0, delta_text=0.8)
        assert synth.bayes_accuracy(spec) == pytest.approx(0.9)

    def test_no_signal_is_majority_rate(self):
        spec = synth.SynthSpec(delta_num=0.0, delta_text=0.0, pi_high=0.3)
        assert synth.bayes_accuracy(spec) == pytest.approx(0.7)

    def test_two_informative_features(self):
        spec = synth.SynthSpec(delta_num=2.0, informative=("sknt", "gust"))
        assert synth.bayes_accuracy(spec) == pytest.approx(norm.cdf(math.sqrt(2.0)))

    def test_both_channels_beat_either(self):
        both = synth.bayes_accuracy(synth.SynthSpec(delta_num=2.0, delta_text=0.5))
        assert both > synth.bayes_accuracy(synth.SynthSpec(delta_num=2.0))
        assert both > synth.bayes_accuracy(synth.SynthSpec(delta_num=0.0, delta_text=0.5))

    def test_complementary_without_signal(self):
        spec = synth.SynthSpec(delta_num=0.0, delta_text=0.0, complementary=True)
        assert synth.bayes_accuracy(spec) == pytest.approx(0.5, abs=1e-6)

    def test_complementary_with_strong_signal(self):
        spec = synth.SynthSpec(delta_num=12.0, delta_text=1.0, complementary=True)
        assert synth.bayes_accuracy(spec) == pytest.approx(1.0, abs=0.01)

    def test_complementary_single_channel_caps_at_half_plus(self):
        # numeric-only signal reaches half the samples; the rest are coin flips
        spec = synth.SynthSpec(delta_num=12.0, delta_text=0.0, complementary=True)
        assert synth.bayes_accuracy(spec) == pytest.approx(0.75, abs=0.01)

    def test_unsupported(self):
        spec = synth.SynthSpec(informative=("sknt",), constant_features=("sknt",))
        with pytest.raises(DataError, match="unsupported spec"):
            synth.bayes_accuracy(spec)


class TestEmpiricalRule:
    def test_wind_speed_threshold(self):
        spec = synth.SynthSpec(n=20000, delta_num=2.0, seed=2)
        ds = synth.generate(spec)
        sknt = ds.numeric_matrix()[:, FEATURE_NAMES.index("sknt")]
        accuracy = np.mean((sknt > synth.PHYSICAL["sknt"][0]) == _labels(ds))
        assert accuracy == pytest.approx(synth.bayes_accuracy(spec), abs=0.015)

    def test_damage_phrase(self):
        spec = synth.SynthSpec(n=20000, delta_num=0.0, delta_text=0.8, seed=3)
        ds = synth.generate(spec)
        damage = np.array([
            any(p in o.narrative for p in synth.DAMAGE_PHRASES) for o in ds.observations
        ])
        assert np.mean(damage == _labels(ds)) == pytest.approx(0.9, abs=0.015)


def test_unknown_feature():
    with pytest.raises(ValueError, match="unknown features"):
        synth.SynthSpec(informative=("pressure",))

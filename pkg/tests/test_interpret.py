import io
from dataclasses import dataclass, replace

import numpy as np
import pytest
import torch
from scipy.special import expit

from windfuse import fusion, ingest, interpret, synth
from windfuse.config import FusionParams
from windfuse.core import FEATURE_NAMES, RiskLabel
from windfuse.errors import DataError
from windfuse.gradcheck import relative_error

from tests.conftest import bare_samples, tiny
from tests.test_fusion import monotone_meta, zero_meta

SKNT = FEATURE_NAMES.index("sknt")
DRCT = FEATURE_NAMES.index("drct")


@dataclass
class LinearLogitScorer:
    """Smooth scorer: p_high = sigmoid(Z @ w)."""

    weights: np.ndarray

    def score(self, standardized, samples):
        return expit(standardized @ self.weights)


@dataclass
class ForestHighScorer:
    """The forest stream's high-risk probability on its own."""

    pipeline: fusion.Pipeline

    def score(self, standardized, samples):
        return self.pipeline.rf_probs(standardized, samples)[:, 1]


@dataclass
class LocalVersusNecessaryScorer:
    """sknt matters locally around 0; drct matters only as a saturated level."""

    def score(self, standardized, samples):
        local = 0.3 * expit(8.0 * standardized[:, SKNT])
        level = 0.4 * expit(10.0 * (standardized[:, DRCT] - 1.0))
        return 0.2 + local + level


@pytest.fixture(scope="module")
def ignored_drct():
    """Pipeline trained where drct never varies, so no tree can split on it."""
    spec = synth.SynthSpec(n=120, delta_num=3.0, delta_text=0.8, seed=2, constant_features=("drct",))
    ds = synth.generate(spec)
    split = ingest.train_test_split(ds, 0.75, 0)
    return fusion.fit_pipeline(ds, split.train_indices, tiny()), ds, split


class TestSelection:
    def test_correct_high_only(self, fitted, small_ds, small_split):
        samples = interpret.select_correct_high(fitted, small_ds, small_split.test_indices)
        labels = small_ds.labels_array(samples.rows)
        assert (labels == RiskLabel.HIGH).all()
        assert (fitted.score(samples.standardized, samples) >= 0.5).all()

    def test_all_samples(self, fitted, small_ds, small_split):
        samples = interpret.select_correct_high(
            fitted, small_ds, small_split.test_indices, all_samples=True
        )
        assert samples.rows == small_split.test_indices


class TestSensitivity:
    def test_ignored_feature_is_exactly_zero(self, ignored_drct):
        pipeline, ds, split = ignored_drct
        samples = pipeline.samples(ds, split.test_indices)
        report = interpret.sensitivity_fd(pipeline, samples, h=1e-3)
        assert report.values[DRCT] == 0.0
        assert report.method == interpret.FD_METHOD
        assert report.n_samples == len(split.test_indices)

    def test_planted_feature_is_positive(self, fitted, small_ds, small_split):
        samples = fitted.samples(small_ds, small_split.test_indices)
        report = interpret.sensitivity_fd(ForestHighScorer(fitted), samples, h=0.5)
        assert report.values[SKNT] > 0.0
        assert interpret.sensitivity_fd(fitted, samples, h=0.5).n_samples == len(samples)

    def test_step_halving_agrees_to_second_order(self):
        rng = np.random.default_rng(0)
        samples = bare_samples(rng.normal(size=(50, 6)))
        scorer = LinearLogitScorer(np.array([0.8, -0.5, 0.0, 0.3, 1.0, -0.2]))
        h = 0.1
        coarse = np.array(interpret.sensitivity_fd(scorer, samples, h).values)
        fine = np.array(interpret.sensitivity_fd(scorer, samples, h / 2).values)
        p = expit(samples.standardized @ scorer.weights)
        exact = np.mean(p * (1 - p)) * scorer.weights
        assert np.abs(coarse - fine).max() <= h ** 2
        assert np.abs(fine - exact).max() <= np.abs(coarse - exact).max() + 1e-15

    def test_empty_and_bad_step(self, fitted, small_ds):
        empty = fitted.samples(small_ds, [])
        with pytest.raises(DataError, match="empty"):
            interpret.sensitivity_fd(fitted, empty)
        with pytest.raises(DataError):
            interpret.sensitivity_fd(fitted, fitted.samples(small_ds, [0]), h=0.0)


class TestExactMeta:
    def _fused(self, n=10, seed=0):
        rng = np.random.default_rng(seed)
        p = rng.uniform(size=(n, 1))
        return np.hstack([1 - p, p, rng.normal(size=(n, 2))])

    def test_zero_weights(self):
        grad = interpret.sensitivity_exact_meta(zero_meta(), self._fused())
        assert np.all(grad == 0.0)

    def test_matches_finite_differences(self):
        g = fusion.build_meta(FusionParams(), seed=3)
        fused = self._fused(seed=1)
        analytic = interpret.sensitivity_exact_meta(g, fused)
        eps = 1e-5
        numeric = np.zeros(4)
        for j in range(4):
            plus, minus = fused.copy(), fused.copy()
            plus[:, j] += eps
            minus[:, j] -= eps
            diff = fusion.meta_p_high(g, plus) - fusion.meta_p_high(g, minus)
            numeric[j] = np.mean(diff / (2 * eps))
        assert relative_error(torch.from_numpy(analytic), torch.from_numpy(numeric)) < 1e-5

    def test_monotone_head(self):
        grad = interpret.sensitivity_exact_meta(monotone_meta(), self._fused())
        assert grad[1] > 0.0
        assert grad[0] == grad[2] == grad[3] == 0.0

    def test_empty(self):
        with pytest.raises(DataError):
            interpret.sensitivity_exact_meta(zero_meta(), np.zeros((0, 4)))

    def test_report(self, fitted, small_ds, small_split):
        samples = fitted.samples(small_ds, small_split.test_indices)
        report = interpret.exact_meta_report(fitted, samples)
        assert report.names == interpret.FUSED_NAMES
        assert report.method == interpret.EXACT_METHOD
        assert len(report.values) == 4


class TestAblation:
    def test_ignored_feature_has_no_impact(self, ignored_drct):
        pipeline, ds, split = ignored_drct
        report = interpret.ablate(pipeline, pipeline.samples(ds, split.test_indices))
        assert report.impact[DRCT] == 0.0
        assert all(v >= 0.0 for v in report.impact)

    def test_planted_feature_has_largest_impact(self, fitted, small_ds, small_split):
        samples = interpret.select_correct_high(fitted, small_ds, small_split.test_indices)
        report = interpret.ablate(ForestHighScorer(fitted), samples)
        top = int(np.argmax(report.impact))
        assert FEATURE_NAMES[top] == "sknt"

    def test_sample_order_does_not_matter(self, fitted, small_ds, small_split):
        samples = fitted.samples(small_ds, small_split.test_indices)
        reversed_samples = samples.subset(list(range(len(samples)))[::-1])
        a = interpret.ablate(fitted, samples)
        b = interpret.ablate(fitted, reversed_samples)
        assert b.impact == pytest.approx(a.impact, abs=1e-12)
        assert b.baseline_conf == pytest.approx(a.baseline_conf, abs=1e-12)

    def test_empty(self, fitted, small_ds):
        with pytest.raises(DataError):
            interpret.ablate(fitted, fitted.samples(small_ds, []))


def _reports(sensitivity, impact, n=5):
    return (
        interpret.SensitivityReport(FEATURE_NAMES, tuple(sensitivity), interpret.FD_METHOD, n, 1e-3),
        interpret.AblationReport(FEATURE_NAMES, tuple(impact), 0.9, tuple(0.9 - v for v in impact), n),
    )


class TestContrast:
    def test_identical_rankings(self):
        values = [0.1, 0.0, 0.2, 0.05, 0.4, 0.3]
        report = interpret.contrast_report(*_reports(values, values))
        assert report.flagged == ()
        assert all(r.sensitivity_rank == r.ablation_rank for r in report.rows)

    def test_differing_top_feature(self):
        s, a = _reports([0, 0, 0, 0.1, 0.9, 0], [0, 0, 0, 0.5, 0.2, 0])
        report = interpret.contrast_report(s, a)
        assert report.flagged == (("sknt", "drct"),)

    def test_ranks_use_magnitude(self):
        s, a = _reports([0, 0, 0, 0, -0.9, 0.1], [0, 0, 0, 0, 0.3, 0.1])
        assert interpret.contrast_report(s, a).flagged == ()

    def test_local_signal_versus_necessity(self):
        rng = np.random.default_rng(0)
        Z = rng.normal(size=(40, 6))
        Z[:, SKNT] = rng.uniform(-0.05, 0.05, size=40)
        Z[:, DRCT] = 3.0
        samples = bare_samples(Z)
        scorer = LocalVersusNecessaryScorer()
        s = interpret.sensitivity_fd(scorer, samples, h=1e-3)
        a = interpret.ablate(scorer, samples)
        assert interpret.contrast_report(s, a).flagged == (("sknt", "drct"),)

    def test_mismatched_sample_sets(self):
        s, _ = _reports([0.1] * 6, [0.1] * 6, n=5)
        _, a = _reports([0.1] * 6, [0.1] * 6, n=6)
        with pytest.raises(DataError, match="5 vs 6"):
            interpret.contrast_report(s, a)

    def test_mismatched_features(self):
        s, a = _reports([0.1] * 6, [0.1] * 6)
        s = replace(s, names=interpret.FUSED_NAMES + ("x", "y"))
        with pytest.raises(DataError):
            interpret.contrast_report(s, a)


class TestOutput:
    def test_interpretations(self):
        assert interpret.interpretation("sknt", 0.3, "ablation").startswith("critical")
        assert interpret.interpretation("relh", 0.01, "ablation") == "minor drop in confidence when removed"
        assert interpret.interpretation("drct", 0.0, "ablation") == "no dominating effect"
        assert interpret.interpretation("sknt", 0.2, interpret.FD_METHOD) == "raises high-risk confidence"
        assert interpret.interpretation("tmpf", -0.2, interpret.FD_METHOD) == "lowers high-risk confidence"

    def test_frames_and_tables(self):
        s, a = _reports([0, 0, 0, 0.1, 0.9, 0], [0, 0, 0, 0.5, 0.2, 0])
        frame = interpret.sensitivity_frame(s)
        assert list(frame.columns) == ["feature", "sensitivity", "interpretation"]
        assert list(interpret.ablation_frame(a)["feature"]) == list(FEATURE_NAMES)
        contrast = interpret.contrast_frame(interpret.contrast_report(s, a))
        assert contrast["flagged"].sum() == 2

        buffer = io.StringIO()
        interpret.write_frame(interpret.ablation_frame(a), buffer)
        assert buffer.getvalue().splitlines()[0] == "feature,impact,interpretation"
        table = interpret.text_table(frame, "Sensitivity")
        assert table.startswith("Sensitivity\n-----------\n")
        assert "sknt" in table


@pytest.mark.slow
def test_ablation_finds_planted_feature_across_seeds():
    hits = 0
    for seed in range(20):
        ds = synth.generate(synth.SynthSpec(n=200, delta_num=3.0, delta_text=0.0, seed=seed))
        split = ingest.train_test_split(ds, 0.75, seed)
        pipeline = fusion.fit_pipeline(ds, split.train_indices, tiny(
            seed=seed, **{"rf.n_trees": 20, "fusion.epochs": 150}
        ))
        samples = interpret.select_correct_high(pipeline, ds, split.test_indices)
        impact = np.array(interpret.ablate(pipeline, samples).impact)
        others = np.delete(impact, SKNT)
        if impact[SKNT] > others.max():
            hits += 1
    assert hits >= 19

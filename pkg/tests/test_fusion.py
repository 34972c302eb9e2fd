import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from windfuse import fusion
from windfuse.config import FusionParams
from windfuse.core import RiskLabel
from windfuse.errors import DataError, ModelError
from windfuse.gradcheck import check_gradients

from tests.conftest import tiny


def zero_meta(hidden: int = 16) -> fusion.MetaClassifier:
    g = fusion.MetaClassifier(hidden).double()
    with torch.no_grad():
        for p in g.parameters():
            p.zero_()
    return g


def monotone_meta(coordinate: int = 1, scale: float = 1.0) -> fusion.MetaClassifier:
    """One hidden unit reading a single fused coordinate; logits (-h, +h)."""
    g = zero_meta(hidden=1)
    with torch.no_grad():
        g.hidden.weight[0, coordinate] = 1.0
        g.out.weight[:, 0] = torch.tensor([-scale, scale], dtype=torch.float64)
    return g


class TestFuse:
    def test_concatenates(self):
        assert fusion.fuse([0.7, 0.3], [1.2, -0.5]).values == (0.7, 0.3, 1.2, -0.5)
        assert fusion.fuse([1, 0], [0, 0]).values == (1.0, 0.0, 0.0, 0.0)

    def test_rejects_non_probabilities(self):
        with pytest.raises(DataError):
            fusion.fuse([0.6, 0.6], [0.0, 0.0])
        with pytest.raises(DataError):
            fusion.fuse([1.2, -0.2], [0.0, 0.0])

    def test_matrix_form(self):
        fused = fusion.fuse_matrix(np.array([[0.25, 0.75]]), np.array([[2.0, -1.0]]))
        assert fused.tolist() == [[0.25, 0.75, 2.0, -1.0]]
        with pytest.raises(DataError, match="row 1"):
            fusion.fuse_matrix(np.array([[0.5, 0.5], [0.9, 0.9]]), np.zeros((2, 2)))


class TestMetaClassifier:
    def test_zero_weights(self):
        out = fusion.meta_forward(zero_meta(), fusion.fuse([0.2, 0.8], [3.0, -3.0]))
        assert out.logits == (0.0, 0.0)
        assert out.p_high == 0.5

    def test_monotone_in_forest_high(self):
        g = monotone_meta()
        grid = [fusion.meta_forward(g, [1 - t, t, 0.0, 0.0]).p_high for t in np.linspace(0, 1, 11)]
        assert all(b > a for a, b in zip(grid, grid[1:]))

    def test_default_shape(self):
        g = fusion.build_meta(FusionParams(), seed=0)
        assert (g.hidden.in_features, g.hidden.out_features, g.out.out_features) == (4, 16, 2)
        assert all(p.dtype == torch.float64 for p in g.parameters())

    def test_seeded_construction(self):
        a = fusion.build_meta(FusionParams(), seed=5)
        b = fusion.build_meta(FusionParams(), seed=5)
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))

    def test_seeded_construction_is_thread_safe(self):
        seeds = list(range(16)) * 4

        def flat(s):
            return torch.cat([p.reshape(-1) for p in fusion.build_meta(FusionParams(), s).parameters()])

        sequential = [flat(s) for s in seeds]
        with ThreadPoolExecutor(max_workers=8) as pool:
            parallel = list(pool.map(flat, seeds))
        assert all(torch.equal(a, b) for a, b in zip(sequential, parallel))

    def test_gradients_match_finite_differences(self):
        g = fusion.build_meta(FusionParams(), seed=1)
        rng = np.random.default_rng(0)
        p = rng.uniform(size=(8, 1))
        fused = torch.from_numpy(np.hstack([1 - p, p, rng.normal(size=(8, 2))]))
        target = torch.from_numpy(rng.integers(0, 2, size=8))
        errors = check_gradients(lambda: F.cross_entropy(g(fused), target), g.named_parameters())
        assert max(errors.values()) < 1e-6


class TestCrossEntropy:
    def test_values(self):
        assert fusion.cross_entropy(0.5, 1) == pytest.approx(math.log(2))
        assert fusion.cross_entropy(0.9, 0) == pytest.approx(2.3026, abs=1e-4)
        assert fusion.cross_entropy(1.0, 1) == pytest.approx(0.0, abs=1e-9)

    def test_clamped(self):
        assert fusion.cross_entropy(0.0, 1) == pytest.approx(-math.log(1e-12))
        assert math.isfinite(fusion.cross_entropy(1.0, 0))


def _training_inputs(pipeline, ds, rows):
    samples = pipeline.samples(ds, rows)
    X_forest = pipeline.streams.forest_input(samples.standardized, samples.tokens)
    return X_forest, samples.tokens, ds.labels_array(rows)


class TestTrainFusion:
    def test_streams_stay_frozen(self, fitted, small_ds, small_split):
        before = fitted.streams.digests()
        g, curve = fusion.train_fusion(
            fusion.build_meta(FusionParams(), 0), fitted.streams,
            *_training_inputs(fitted, small_ds, small_split.train_indices),
            FusionParams(epochs=5),
        )
        assert fitted.streams.digests() == before
        assert [r.epoch for r in curve] == [1, 2, 3, 4, 5]
        assert all(r.val_loss is None for r in curve)

    def test_zero_epochs(self, fitted, small_ds, small_split):
        g = fusion.build_meta(FusionParams(), 2)
        before = [p.clone() for p in g.parameters()]
        g, curve = fusion.train_fusion(
            g, fitted.streams,
            *_training_inputs(fitted, small_ds, small_split.train_indices),
            FusionParams(epochs=0),
        )
        assert curve == []
        assert all(torch.equal(a, b) for a, b in zip(before, g.parameters()))

    def test_in_sample_inputs(self, fitted, small_ds, small_split):
        _, curve = fusion.train_fusion(
            fusion.build_meta(FusionParams(), 0), fitted.streams,
            *_training_inputs(fitted, small_ds, small_split.train_indices),
            FusionParams(epochs=3, rf_inputs="in-sample"),
        )
        assert len(curve) == 3

    def test_unfitted_stream(self):
        with pytest.raises(ModelError, match="forest"):
            fusion.train_fusion(
                fusion.build_meta(FusionParams(), 0), fusion.Streams(None, None),
                np.zeros((2, 6)), [[], []], [0, 1], FusionParams(),
            )


class TestPredict:
    def test_tie_goes_to_high(self, fitted, small_ds):
        prediction = fusion.predict(replace(fitted, meta=zero_meta()), small_ds[0])
        assert prediction.p_high == 0.5
        assert prediction.label is RiskLabel.HIGH

    def test_saturated_evidence(self, fitted, small_ds):
        pipeline = replace(fitted, meta=monotone_meta(scale=50.0))
        scores = fusion.stream_outputs(pipeline, small_ds)
        best = max(range(len(scores)), key=lambda i: scores[i].rf_probs[1])
        prediction = fusion.predict(pipeline, small_ds[best])
        assert prediction.label is RiskLabel.HIGH
        assert prediction.fused_input.values[:2] == pytest.approx(scores[best].rf_probs)

    def test_empty_narrative_and_missing_numerics(self, fitted, small_ds):
        obs = replace(small_ds[3], narrative="").with_features([None] * 6)
        prediction = fusion.predict(fitted, obs)
        assert 0.0 <= prediction.p_high <= 1.0
        assert sum(prediction.fused_input.values[:2]) == pytest.approx(1.0)

    def test_batch_keeps_input_order(self, fitted, small_ds):
        rows = [7, 2, 11, 2]
        batch = fusion.predict_batch(fitted, small_ds, rows)
        assert len(batch) == 4
        singles = [fusion.predict(fitted, small_ds[i]).p_high for i in rows]
        assert [p.p_high for p in batch] == pytest.approx(singles, abs=1e-12)

    def test_missing_component_is_named(self, fitted, small_ds, tiny_config):
        with pytest.raises(ModelError, match="imputer"):
            fusion.predict(fusion.Pipeline(tiny_config), small_ds[0])
        with pytest.raises(ModelError, match="meta-classifier"):
            fusion.predict(replace(fitted, meta=None), small_ds[0])

    def test_stream_outputs(self, fitted, small_ds):
        outputs = fusion.stream_outputs(fitted, small_ds, [0, 1, 2])
        assert len(outputs) == 3
        assert all(sum(o.rf_probs) == pytest.approx(1.0) for o in outputs)

    def test_predictions_csv(self, fitted, small_ds):
        buffer = io.StringIO()
        fusion.predictions_to_csv(fusion.predict_batch(fitted, small_ds, [4, 9]), buffer, row_ids=[4, 9])
        lines = buffer.getvalue().splitlines()
        assert lines[0] == "row_id,p_high,label"
        assert lines[1].startswith("4,")
        assert lines[2].split(",")[2] in ("low", "high")


class TestBundle:
    def test_round_trip_predictions(self, fitted, small_ds, tmp_path):
        path = tmp_path / "pipeline.zip"
        fusion.save_pipeline(fitted, path)
        loaded = fusion.load_pipeline(path)
        assert np.array_equal(loaded.predict_scores(small_ds), fitted.predict_scores(small_ds))
        assert loaded.config == fitted.config
        assert [r.epoch for r in loaded.curves["fusion"]] == [r.epoch for r in fitted.curves["fusion"]]

    def test_bytes_are_stable(self, fitted):
        data = fusion.dumps_pipeline(fitted)
        assert fusion.dumps_pipeline(fusion.loads_pipeline(data)) == data

    def test_incomplete_pipeline_cannot_be_saved(self, tiny_config):
        with pytest.raises(ModelError):
            fusion.dumps_pipeline(fusion.Pipeline(tiny_config))

    def test_bad_inputs(self, fitted, tmp_path):
        with pytest.raises(ModelError, match="not found"):
            fusion.load_pipeline(tmp_path / "absent.zip")
        with pytest.raises(ModelError):
            fusion.loads_pipeline(b"not a zip")
        doc = fusion.pipeline_to_dict(fitted)
        doc["format_version"] = 99
        with pytest.raises(ModelError, match="99"):
            fusion.pipeline_from_dict(doc)


def test_fit_is_deterministic(small_ds, small_split):
    rows = small_split.train_indices
    a = fusion.fit_pipeline(small_ds, rows, tiny(seed=3))
    b = fusion.fit_pipeline(small_ds, rows, tiny(seed=3))
    assert fusion.dumps_pipeline(a) == fusion.dumps_pipeline(b)


def test_tfidf_forest_columns(small_ds, small_split):
    pipeline = fusion.fit_pipeline(
        small_ds, small_split.train_indices, tiny(**{"rf.use_tfidf": True})
    )
    assert pipeline.streams.tfidf is not None
    assert pipeline.streams.forest.n_features == 6 + len(pipeline.streams.tfidf.terms)
    assert len(pipeline.predict_scores(small_ds, small_split.test_indices)) == len(small_split.test_indices)


def test_single_class_training_rows(small_ds, tiny_config):
    highs = [i for i, o in enumerate(small_ds.observations) if o.label is RiskLabel.HIGH]
    with pytest.raises(DataError):
        fusion.fit_pipeline(small_ds, highs, tiny_config)


@pytest.mark.slow
def test_fused_beats_single_streams_on_complementary_data():
    from windfuse import evaluation, ingest, synth

    config = tiny(**{
        "rf.n_trees": 50, "rf.max_depth": 8, "text.d_model": 16, "text.epochs": 10,
        "fusion.epochs": 150,
    })
    wins = margins = 0
    for seed in range(5):
        ds = synth.generate(synth.SynthSpec(
            n=10000, delta_num=3.0, delta_text=0.8, complementary=True, seed=seed
        ))
        split = ingest.train_test_split(ds, 0.8, seed)
        rows, _ = evaluation.compare_baselines(ds, split, config.with_overrides({"seed": seed}))
        accuracy = {r.model: r.accuracy for r in rows}
        if accuracy["fused"] >= max(accuracy["random_forest"], accuracy["text_encoder"]):
            wins += 1
        if accuracy["fused"] >= accuracy["text_encoder"] + 0.02:
            margins += 1
    assert wins >= 4
    assert margins >= 4

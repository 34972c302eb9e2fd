import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from windfuse import text_models as txt
from windfuse.config import TextParams
from windfuse.errors import DataError, ModelError
from windfuse.gradcheck import check_gradients

SMALL = TextParams(d_model=8, n_heads=2, n_layers=1, max_tokens=16, epochs=3, lr=1e-3)


def _toy_corpus():
    """32 narratives; the keyword decides the label."""
    fillers = ["station", "report", "afternoon", "observer"]
    docs, labels = [], []
    for i in range(32):
        high = i % 2 == 1
        keyword = "damage" if high else "calm"
        docs.append([fillers[i % 4], keyword, fillers[(i // 4) % 4]])
        labels.append(int(high))
    return docs, labels


def _state(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def _same_state(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


class TestTokenize:
    def test_narrative(self):
        assert txt.tokenize("Extreme gusts caused significant property damage.") == [
            "extreme", "gusts", "caused", "significant", "property", "damage",
        ]

    def test_empty(self):
        assert txt.tokenize("") == []

    def test_internal_punctuation_survives(self):
        assert txt.tokenize("60-MPH wind!") == ["60-mph", "wind"]

    def test_bare_punctuation_dropped(self):
        assert txt.tokenize("calm -- then (gusty)") == ["calm", "then", "gusty"]


class TestVocabulary:
    def test_ids_are_dense_with_specials_first(self):
        vocab = txt.Vocabulary.build([["b", "a", "b"]])
        assert vocab.id_to_token == ("[PAD]", "[UNK]", "[CLS]", "b", "a")
        assert vocab.ids(["a", "zzz"], 10) == [txt.CLS, 4, txt.UNK]

    def test_truncation_keeps_cls(self):
        vocab = txt.Vocabulary.build([["a"]])
        assert vocab.ids(["a"] * 10, 3) == [txt.CLS, 3, 3]

    def test_min_count(self):
        vocab = txt.Vocabulary.build([["a", "b", "a"]], min_count=2)
        assert "b" not in vocab.token_to_id

    def test_rejects_missing_specials(self):
        with pytest.raises(DataError):
            txt.Vocabulary(("a", "b", "c"))

    def test_document_round_trip(self):
        vocab = txt.Vocabulary.build([["x", "y"]])
        assert txt.Vocabulary.from_dict(vocab.to_dict()) == vocab


class TestTfidf:
    CORPUS = [
        ["gust", "damage"],
        ["gust", "calm"],
        ["gust", "calm"],
        ["gust", "calm"],
        ["gust", "calm"],
        ["gust", "damage"],
    ]

    def _idf(self, vec, term):
        return float(vec.idf[vec.index[term]])

    def test_term_in_every_document(self):
        vec = txt.fit_tfidf(self.CORPUS, min_df=1)
        assert self._idf(vec, "gust") == pytest.approx(1.0)

    def test_smoothed_idf(self):
        vec = txt.fit_tfidf(self.CORPUS, min_df=1)
        assert self._idf(vec, "damage") == pytest.approx(math.log(7 / 3) + 1, abs=1e-4)
        assert self._idf(vec, "damage") == pytest.approx(1.8473, abs=1e-4)

    def test_document_frequency_cutoff(self):
        vec = txt.fit_tfidf(self.CORPUS, min_df=5)
        assert "calm" not in vec.index  # df = 4
        assert "gust" in vec.index

    def test_max_terms_prefers_high_df(self):
        vec = txt.fit_tfidf(self.CORPUS, max_terms=2, min_df=1)
        assert vec.terms == ("calm", "gust")

    def test_nothing_survives(self):
        with pytest.raises(DataError):
            txt.fit_tfidf([["a"], ["b"]], min_df=5)
        with pytest.raises(DataError):
            txt.fit_tfidf([])

    def test_unknown_terms_give_zero_vector(self):
        vec = txt.fit_tfidf(self.CORPUS, min_df=1)
        assert txt.tfidf_transform(vec, ["tornado"]).nnz == 0

    def test_single_term_is_unit_vector(self):
        vec = txt.fit_tfidf(self.CORPUS, min_df=1)
        row = txt.tfidf_transform(vec, ["damage", "damage", "damage"]).toarray()[0]
        expected = np.zeros(len(vec.terms))
        expected[vec.index["damage"]] = 1.0
        assert row == pytest.approx(expected)

    def test_two_terms_weighted_by_idf(self):
        vec = txt.fit_tfidf(self.CORPUS, min_df=1)
        row = txt.tfidf_transform(vec, ["damage", "tornado", "calm"]).toarray()[0]
        a, b = self._idf(vec, "damage"), self._idf(vec, "calm")
        norm = math.hypot(a, b)
        assert row[vec.index["damage"]] == pytest.approx(a / norm)
        assert row[vec.index["calm"]] == pytest.approx(b / norm)
        assert np.count_nonzero(row) == 2

    def test_matches_reference_vectorizer(self):
        sklearn_text = pytest.importorskip("sklearn.feature_extraction.text")
        vec = txt.fit_tfidf(self.CORPUS, min_df=1)
        ours = txt.tfidf_matrix(vec, self.CORPUS).toarray()
        reference = sklearn_text.TfidfVectorizer(
            analyzer=lambda doc: list(doc) + [f"{a} {b}" for a, b in zip(doc, doc[1:])],
            smooth_idf=True,
            norm="l2",
        )
        theirs = reference.fit_transform(self.CORPUS).toarray()
        assert list(reference.get_feature_names_out()) == list(vec.terms)
        assert ours == pytest.approx(theirs)

    def test_document_round_trip(self):
        vec = txt.fit_tfidf(self.CORPUS, min_df=1)
        assert txt.TfidfVectorizer.from_dict(vec.to_dict()) == vec


class TestEncoder:
    def _model(self, tokens=("a", "b", "c", "d"), params=SMALL, seed=0):
        vocab = txt.Vocabulary.build([list(tokens)])
        return txt.build_encoder(vocab, params, seed)

    def test_seeded_construction_is_thread_safe(self):
        vocab = txt.Vocabulary.build([["a", "b", "c", "d"]])
        params = TextParams(d_model=32, n_heads=4, n_layers=2)
        seeds = list(range(16)) * 4
        sequential = [_state(txt.build_encoder(vocab, params, s)) for s in seeds]
        with ThreadPoolExecutor(max_workers=8) as pool:
            parallel = list(pool.map(lambda s: _state(txt.build_encoder(vocab, params, s)), seeds))
        mismatched = [s for s, a, b in zip(seeds, sequential, parallel) if not _same_state(a, b)]
        assert mismatched == []

    def test_output_shape(self):
        model = self._model()
        assert txt.encode(model, ["a", "b"]).shape == (2,)
        assert txt.encode(model, []).shape == (2,)

    def test_positions_past_the_limit_are_ignored(self):
        model = self._model(params=SMALL.model_copy(update={"max_tokens": 128}))
        tokens = ["a"] * 200
        perturbed = list(tokens)
        perturbed[150] = "b"
        assert np.array_equal(txt.encode(model, tokens), txt.encode(model, perturbed))

    def test_padding_does_not_change_output(self):
        model = self._model()
        alone = txt.encode(model, ["a", "b"])
        batched = txt.encode_batch(model, [["a", "b"], ["c", "d", "a", "b", "c"]])[0]
        assert batched == pytest.approx(alone, abs=1e-12)

    def test_permutation_invariant_without_positions(self):
        model = self._model()
        with torch.no_grad():
            model.position_embedding.zero_()
        a = txt.encode(model, ["a", "b", "c"])
        b = txt.encode(model, ["c", "a", "b"])
        assert a == pytest.approx(b, abs=1e-9)

    def test_layer_norm_outputs_are_normalized(self):
        model = self._model()
        captured = []
        handle = model.layers[0].norm2.register_forward_hook(
            lambda module, inputs, output: captured.append(output.detach())
        )
        txt.encode(model, ["a", "b", "c"])
        handle.remove()
        out = captured[0][0]
        assert out.mean(dim=-1).abs().max() < 1e-9
        assert (out.var(dim=-1, unbiased=False) - 1.0).abs().max() < 1e-3

    def test_heads_must_divide_width(self):
        with pytest.raises(ModelError):
            txt.TextEncoderModel(txt.Vocabulary.build([["a"]]), d_model=6, n_heads=4)

    def test_gradients_match_finite_differences(self):
        model = self._model(params=TextParams(d_model=8, n_heads=2, n_layers=1, max_tokens=8))
        ids, mask = txt.collate(model.vocab, [["a", "b", "c", "d"], ["d", "a"]], model.max_tokens)
        target = torch.tensor([1, 0])

        def loss_fn():
            return F.cross_entropy(model(ids, mask), target)

        errors = check_gradients(loss_fn, model.named_parameters())
        assert len(errors) == len(list(model.parameters()))
        worst = max(errors, key=errors.get)
        assert errors[worst] < 1e-4, worst


class TestTraining:
    def test_overfits_keyword_corpus(self):
        docs, labels = _toy_corpus()
        params = TextParams(
            d_model=32, n_heads=4, n_layers=1, max_tokens=16, epochs=200, lr=1e-3,
            batch_size=32, val_fraction=0.0, log_every=50,
        )
        model = txt.build_encoder(txt.Vocabulary.build(docs), params, seed=0)
        _, curve = txt.train_encoder(model, docs, labels, params, seed=0)
        assert any(r.train_acc == 1.0 for r in curve)
        assert curve[-1].val_loss is None

    def test_full_batch_loss_does_not_rise_over_ten_epochs(self):
        docs, labels = _toy_corpus()
        params = TextParams(
            d_model=16, n_heads=2, n_layers=1, max_tokens=16, epochs=60, lr=1e-4,
            batch_size=len(docs), val_fraction=0.0,
        )
        model = txt.build_encoder(txt.Vocabulary.build(docs), params, seed=0)
        _, curve = txt.train_encoder(model, docs, labels, params, seed=0)
        losses = [r.train_loss for r in curve]
        assert len(losses) == 60
        for e in range(len(losses) - 10):
            assert losses[e + 10] <= losses[e] + 1e-3, e

    def test_zero_epochs_leave_model_unchanged(self):
        docs, labels = _toy_corpus()
        params = SMALL.model_copy(update={"epochs": 0})
        model = txt.build_encoder(txt.Vocabulary.build(docs), params, seed=0)
        before = _state(model)
        _, curve = txt.train_encoder(model, docs, labels, params, seed=0)
        assert curve == []
        assert _same_state(before, _state(model))

    def test_same_seed_same_parameters(self):
        docs, labels = _toy_corpus()
        runs = []
        for _ in range(2):
            model = txt.build_encoder(txt.Vocabulary.build(docs), SMALL, seed=4)
            txt.train_encoder(model, docs, labels, SMALL, seed=4)
            runs.append(_state(model))
        assert _same_state(*runs)

    def test_curve_has_validation_columns(self):
        docs, labels = _toy_corpus()
        params = SMALL.model_copy(update={"val_fraction": 0.25})
        model = txt.build_encoder(txt.Vocabulary.build(docs), params, seed=0)
        _, curve = txt.train_encoder(model, docs, labels, params, seed=0)
        assert [r.epoch for r in curve] == [1, 2, 3]
        assert all(r.val_loss is not None and r.val_acc is not None for r in curve)

    def test_single_class(self):
        docs, _ = _toy_corpus()
        model = txt.build_encoder(txt.Vocabulary.build(docs), SMALL, seed=0)
        with pytest.raises(DataError):
            txt.train_encoder(model, docs, [0] * len(docs), SMALL)

    def test_document_round_trip(self):
        docs, labels = _toy_corpus()
        model = txt.build_encoder(txt.Vocabulary.build(docs), SMALL, seed=1)
        txt.train_encoder(model, docs, labels, SMALL, seed=1)
        loaded = txt.encoder_from_dict(txt.encoder_to_dict(model))
        assert np.array_equal(txt.encode_batch(loaded, docs), txt.encode_batch(model, docs))

    def test_foreign_document_is_rejected(self):
        doc = txt.encoder_to_dict(txt.build_encoder(txt.Vocabulary.build([["a"]]), SMALL, seed=0))
        assert doc["format"] == txt.ENCODER_FORMAT
        doc["format"] = txt.TFIDF_FORMAT
        with pytest.raises(ModelError, match="not an encoder document"):
            txt.encoder_from_dict(doc)

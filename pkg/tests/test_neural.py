import numpy as np
import pytest

import oracles
from clinex.corpus import document_tags, load_document
from clinex.errors import FormatError, ModelVersionError, NumericalError
from clinex.neural import (
    PARAM_NAMES,
    NeuralModel,
    TrainConfig,
    build_vocabularies,
    char_encode,
    encode_sentence,
    load_word_embeddings,
    neural_nll_and_gradient,
    predict_neural,
    train_neural,
)
from clinex.synthetic import generate_synthetic_corpus

TINY = dict(d_c=3, h_c=4, d_w=5, h_w=6, dropout_rate=0.0)


def tiny_model(seed=0, extra_words=(), **overrides):
    cfg = TrainConfig(**{**TINY, **overrides})
    sents = [["Pt", "has", "CP"], ["ekg", "ok"], ["cholesterol", "cholorolesteral"], list(extra_words) or ["x"]]
    cv, wv = build_vocabularies(sents)
    return NeuralModel.initialize(cfg, cv, wv, rng=np.random.default_rng(seed))


class TestEmbeddings:
    def test_copy(self, tmp_path):
        path = tmp_path / "vec.txt"
        path.write_text("the 0.1 0.2\n")
        table, report = load_word_embeddings(path, ["the"])
        np.testing.assert_array_equal(table, [[0.1, 0.2]])
        assert report.hit_rate == 1.0

    def test_oov(self, tmp_path):
        path = tmp_path / "vec.txt"
        path.write_text("the 0.1 0.2\n")
        table, report = load_word_embeddings(path, ["xyzzy"], np.random.default_rng(1))
        assert np.all(np.abs(table) <= 0.25)
        assert report.hit_rate == 0.0
        again, _ = load_word_embeddings(path, ["xyzzy"], np.random.default_rng(1))
        np.testing.assert_array_equal(table, again)

    def test_lowercase_lookup(self, tmp_path):
        path = tmp_path / "vec.txt"
        path.write_text("Aspirin 1 2 3\n")
        table, report = load_word_embeddings(path, ["<unk>", "aspirin"])
        np.testing.assert_array_equal(table[1], [1, 2, 3])
        assert report.hits == 1 and report.dim == 3

    def test_ragged(self, tmp_path):
        path = tmp_path / "vec.txt"
        path.write_text("a 1 2\nb 1 2 3\n")
        with pytest.raises(FormatError) as info:
            load_word_embeddings(path, ["a"])
        assert info.value.lineno == 2


class TestCharEncoder:
    def test_single_char(self):
        m = tiny_model()
        v = char_encode("a", m)
        assert v.shape == (8,)

    def test_order_matters(self):
        m = tiny_model(seed=3)
        assert not np.allclose(char_encode("ab", m), char_encode("ba", m))

    def test_misspelling_distinct(self):
        m = tiny_model()
        assert not np.array_equal(char_encode("cholorolesteral", m), char_encode("cholesterol", m))

    def test_unknown_characters(self):
        m = tiny_model()
        np.testing.assert_array_equal(char_encode("§", m), char_encode("¤", m))

    def test_position_independent(self):
        m = tiny_model()
        direct = char_encode("ekg", m)
        reps = _char_reps(m, ["ekg", "ok", "Pt", "has", "ekg"])
        np.testing.assert_allclose(reps[0], direct, atol=1e-15)
        np.testing.assert_allclose(reps[4], direct, atol=1e-15)


def _char_reps(model, words):
    from clinex.neural import bilstm_forward

    p = model.params
    lengths = np.array([len(w) for w in words])
    ids = np.zeros((len(words), lengths.max()), dtype=int)
    for i, w in enumerate(words):
        ids[i, : len(w)] = model.char_ids(w)
    H_f, H_b, _ = bilstm_forward(
        p["char_emb"][ids], lengths, (p["char_fw_W"], p["char_fw_b"]), (p["char_bw_W"], p["char_bw_b"])
    )
    return np.concatenate([H_f[:, -1], H_b[:, -1]], axis=1)


class TestEncodeSentence:
    @pytest.mark.parametrize("T", [1, 2, 7])
    def test_shape(self, T):
        assert encode_sentence(["ok"] * T, tiny_model()).shape == (T, 7)

    @pytest.mark.parametrize("dims", [dict(d_c=2, h_c=3, d_w=4, h_w=5), dict(d_c=7, h_c=1, d_w=1, h_w=2)])
    def test_shape_laws(self, dims):
        m = tiny_model(**dims)
        p = m.params
        assert char_encode("abc", m).shape == (2 * dims["h_c"],)
        assert p["word_fw_W"].shape[0] == dims["d_w"] + 2 * dims["h_c"] + dims["h_w"]
        assert p["proj_W"].shape == (2 * dims["h_w"], 7)
        assert encode_sentence(["Pt", "has", "CP"], m).shape == (3, 7)

    def test_deterministic_without_dropout(self):
        m = tiny_model(dropout_rate=0.5)
        a = encode_sentence(["Pt", "has", "CP"], m)
        b = encode_sentence(["Pt", "has", "CP"], m)
        np.testing.assert_array_equal(a, b)

    def test_dropout_changes_output_in_train_mode(self):
        m = tiny_model(dropout_rate=0.5)
        a = encode_sentence(["Pt", "has", "CP"], m, train_mode=True, rng=np.random.default_rng(0))
        b = encode_sentence(["Pt", "has", "CP"], m)
        assert not np.allclose(a, b)

    def test_reversal_mixes_states(self):
        m = tiny_model(seed=4)
        words = ["Pt", "has", "CP"]
        fwd = encode_sentence(words, m)
        bwd = encode_sentence(words[::-1], m)
        assert not np.allclose(fwd[::-1], bwd)

    def test_batching_matches_single(self):
        from clinex.neural import _forward

        m = tiny_model()
        batch = [["Pt", "has", "CP"], ["ekg"], ["ok", "ok"]]
        E, _ = _forward(m, batch, train=False)
        for b, words in enumerate(batch):
            np.testing.assert_allclose(E[b, : len(words)], encode_sentence(words, m), atol=1e-14)


def gradient_errors(model, batch, eps=1e-4):
    _, grads = neural_nll_and_gradient(model, batch)
    loss = lambda: neural_nll_and_gradient(model, batch)[0]
    return {
        name: oracles.relative_error(grads[name], oracles.central_differences(loss, model.params[name], eps))
        for name in PARAM_NAMES
    }


class TestGradients:
    def test_loss_nonnegative(self):
        m = tiny_model()
        loss, _ = neural_nll_and_gradient(m, [(["Pt", "has", "CP"], ["O", "O", "B-problem"])])
        assert loss >= 0

    def test_finite_differences_two_sentences(self):
        m = tiny_model(seed=2)
        batch = [(["Pt", "has", "CP"], ["O", "O", "B-problem"]), (["ekg", "ok"], ["B-test", "O"])]
        errors = gradient_errors(m, batch)
        assert max(errors.values()) < 1e-4, errors

    def test_shared_char_weights_sum_contributions(self):
        m = tiny_model(seed=5)
        batch = [(["Pt", "has", "CP"], ["O", "B-test", "I-test"])]
        _, full = neural_nll_and_gradient(m, batch)
        # contribution of each word position, isolated by freezing the others' char inputs
        from clinex.neural import _backward, _forward
        from clinex.crf import _padded_terms

        E, cache = _forward(m, [batch[0][0]], train=False)
        gold = np.array([[0, 3, 4]])
        _, dE, _ = _padded_terms(E, cache["lengths"], gold, m.params["transitions"])
        per_position = np.zeros_like(full["char_fw_W"])
        for k in range(3):
            masked = _backward_with_char_mask(m, dE, cache, k)
            per_position += masked["char_fw_W"]
        np.testing.assert_allclose(per_position, full["char_fw_W"], atol=1e-14)

    def test_unused_char_row_has_zero_gradient(self):
        m = tiny_model()
        _, grads = neural_nll_and_gradient(m, [(["ok"], ["O"])])
        used = set(m.char_ids("ok"))
        for row in range(len(m.char_vocab)):
            if row not in used:
                assert np.all(grads["char_emb"][row] == 0.0)
        assert np.any(grads["char_emb"][m.char_index["o"]] != 0.0)

    def test_nan_gradient_named(self):
        m = tiny_model()
        m.params["word_fw_W"][0, 0] = np.nan
        with pytest.raises(NumericalError, match="word_fw_W|non-finite"):
            neural_nll_and_gradient(m, [(["ok"], ["O"])])


def _backward_with_char_mask(model, dE, cache, keep_word):
    """Backward pass where only word ``keep_word`` passes gradient into the char BiLSTM."""
    from clinex import neural

    original = neural.lstm_backward
    calls = []

    def patched(dH, steps, W):
        calls.append(1)
        if len(calls) > 2:  # third and fourth calls are the char LSTMs
            dH = dH.copy()
            mask = np.zeros(dH.shape[0], dtype=bool)
            mask[keep_word] = True
            dH[~mask] = 0.0
        return original(dH, steps, W)

    neural.lstm_backward = patched
    try:
        return neural._backward(model, dE, cache)
    finally:
        neural.lstm_backward = original


def synth_corpus(n_docs, seed=21):
    docs, gold = generate_synthetic_corpus(seed, n_docs)
    corpus = []
    for d, g in zip(docs, gold):
        corpus += list(zip(d.sentences, document_tags(d, g)))
    return docs, gold, corpus


class TestTraining:
    def test_loss_drops(self):
        _, _, corpus = synth_corpus(8)
        corpus = corpus[:50]
        assert len(corpus) == 50
        cfg = TrainConfig(d_c=4, h_c=4, d_w=6, h_w=6, learning_rate=0.05, epochs=10, seed=1)
        model = train_neural(corpus, cfg)
        log = model.training_log
        assert log[9]["loss"] < log[0]["loss"]

    def test_epoch_one_bitwise_reproducible(self):
        _, _, corpus = synth_corpus(3)
        cfg = TrainConfig(d_c=3, h_c=3, d_w=4, h_w=4, epochs=1, seed=7)
        a = train_neural(corpus, cfg)
        b = train_neural(corpus, cfg)
        assert a.training_log[0]["loss"] == b.training_log[0]["loss"]
        assert a.dumps() == b.dumps()

    def test_dropout_one_rejected(self):
        _, _, corpus = synth_corpus(1)
        with pytest.raises(ValueError, match="dropout"):
            train_neural(corpus, TrainConfig(dropout_rate=1.0))

    def test_divergence_aborts(self):
        _, _, corpus = synth_corpus(2)
        cfg = TrainConfig(d_c=3, h_c=3, d_w=4, h_w=4, epochs=3, learning_rate=1e9, clip_norm=1e12)
        with pytest.raises(NumericalError):
            with np.errstate(all="ignore"):
                train_neural(corpus, cfg)

    def test_dev_checkpoint(self):
        _, _, corpus = synth_corpus(4)
        cfg = TrainConfig(d_c=3, h_c=3, d_w=4, h_w=4, epochs=3, learning_rate=0.1)
        model = train_neural(corpus[:30], cfg, dev=corpus[30:40])
        f1s = [e["dev_f1"] for e in model.training_log]
        assert len(f1s) == 3 and all(0 <= f <= 1 for f in f1s)

    def test_frozen_word_table(self):
        _, _, corpus = synth_corpus(1)
        cfg = TrainConfig(d_c=3, h_c=3, d_w=4, h_w=4, epochs=1, freeze_word_embeddings=True, seed=3)
        ref = NeuralModel.initialize(cfg, *build_vocabularies([s.words for s, _ in corpus]), rng=np.random.default_rng(3))
        model = train_neural(corpus, cfg)
        np.testing.assert_array_equal(model.params["word_emb"], ref.params["word_emb"])

    def test_embedding_width_checked(self, tmp_path):
        _, _, corpus = synth_corpus(1)
        path = tmp_path / "v.txt"
        path.write_text("the 1 2 3\n")
        with pytest.raises(ValueError, match="width"):
            train_neural(corpus, TrainConfig(d_w=4, embedding_path=str(path), epochs=1))


class TestPrediction:
    def test_empty_document(self):
        assert predict_neural(tiny_model(), load_document("", "d")) == []

    def test_deterministic(self):
        docs, _, _ = synth_corpus(2)
        m = tiny_model()
        assert predict_neural(m, docs[0]) == predict_neural(m, docs[0])

    def test_round_trip_file(self, tmp_path):
        m = tiny_model()
        m.save(tmp_path / "m.json")
        loaded = NeuralModel.load(tmp_path / "m.json")
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(loaded.params[name], m.params[name])
        np.testing.assert_array_equal(encode_sentence(["Pt", "zz"], loaded), encode_sentence(["Pt", "zz"], m))

    def test_version_mismatch(self):
        data = tiny_model().to_dict()
        data["version"] = 2
        with pytest.raises(ModelVersionError, match="expected 1, found 2"):
            NeuralModel.from_dict(data)

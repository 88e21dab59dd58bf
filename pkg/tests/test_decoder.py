import numpy as np
import pytest

from oracles import enumerate_decodes, max_rel_err, numeric_grad

import textmage.tensor as T
from textmage.data import END_ID, PAD_ID, START_ID
from textmage.decoder import (DecoderConfig, LSTMCell, beam_decode, beam_search,
                              build_decoder, caption_pair_metrics,
                              decode_train, greedy_decode, lstm_step,
                              train_decoder)
from textmage.errors import ConfigError, DataError
from textmage.optim import AdamConfig
from textmage.tensor import GradTape, Tensor, backward

TINY = DecoderConfig(vocab_size=6, hidden_size=4, embed_dim=3, dropout_p=0.0,
                     max_caption_len=10)


def tiny_model(seed=0, dropout=0.0, vocab=6, hidden=4, embed=3, feature=5):
    cfg = DecoderConfig(vocab_size=vocab, hidden_size=hidden, embed_dim=embed,
                        dropout_p=dropout, max_caption_len=12)
    return build_decoder(cfg, feature, np.random.default_rng(seed))


def zero_cell(embed=3, hidden=4):
    cell = LSTMCell(input_dim=embed, hidden_size=hidden)
    for g in ("i", "f", "o", "g"):
        cell.params[f"W_{g}"] = Tensor(np.zeros((embed, hidden)))
        cell.params[f"U_{g}"] = Tensor(np.zeros((hidden, hidden)))
        cell.params[f"b_{g}"] = Tensor(np.zeros(hidden))
    return cell


class TestLSTMStep:
    def test_zero_weights_hand_values(self):
        cell = zero_cell()
        x = Tensor(np.array([0.3, -0.7, 2.0]))
        c0 = np.array([0.5, -1.0, 0.0, 2.0])
        h_new, c_new = lstm_step(cell, x, Tensor(np.zeros(4)), Tensor(c0))
        # all gates sigmoid(0)=0.5, candidate tanh(0)=0
        np.testing.assert_allclose(c_new.data, 0.5 * c0, atol=1e-15)
        np.testing.assert_allclose(h_new.data, 0.5 * np.tanh(0.5 * c0), atol=1e-15)

    def test_zero_state_fixed_point(self):
        cell = zero_cell()
        h_new, c_new = lstm_step(cell, Tensor(np.ones(3)), Tensor(np.zeros(4)),
                                 Tensor(np.zeros(4)))
        np.testing.assert_array_equal(h_new.data, np.zeros(4))
        np.testing.assert_array_equal(c_new.data, np.zeros(4))

    def test_hidden_bounded(self):
        rng = np.random.default_rng(1)
        model = tiny_model(seed=2)
        h = Tensor(rng.normal(size=4))
        c = Tensor(rng.normal(size=4) * 10)
        for _ in range(5):
            h, c = lstm_step(model.cell, Tensor(rng.normal(size=3)), h, c)
            assert np.all(h.data > -1.0) and np.all(h.data < 1.0)

    def test_shape_mismatch(self):
        cell = zero_cell()
        from textmage.errors import ShapeError
        with pytest.raises(ShapeError):
            lstm_step(cell, Tensor(np.zeros(2)), Tensor(np.zeros(4)), Tensor(np.zeros(4)))

    def test_gradient_check(self):
        rng = np.random.default_rng(3)
        model = tiny_model(seed=4)
        cell = model.cell
        x = Tensor(rng.uniform(-1, 1, size=3), requires_grad=True)
        h = Tensor(rng.uniform(-1, 1, size=4), requires_grad=True)
        c = Tensor(rng.uniform(-1, 1, size=4), requires_grad=True)
        params = [x, h, c] + list(cell.params.values())

        def loss():
            h2, c2 = lstm_step(cell, x, h, c)
            return T.sum_(T.add(T.mul(h2, h2), T.mul(c2, c2)))

        with GradTape() as tape:
            backward(loss(), tape)
        analytic = [tape.grad(p).data if tape.grad(p) is not None else np.zeros_like(p.data)
                    for p in params]
        numeric = numeric_grad(lambda: loss().item(), [p.data for p in params])
        for g_a, g_n in zip(analytic, numeric):
            assert max_rel_err(g_a, g_n) < 1e-4


class TestDecodeTrain:
    def test_logits_shape_is_caption_length(self):
        model = tiny_model()
        feature = Tensor(np.random.default_rng(5).uniform(size=5))
        caption = [START_ID, 4, 5, END_ID]
        logits, loss = decode_train(model, feature, caption, train=False)
        assert logits.shape == (4, 6)
        assert loss.item() > 0

    def test_initial_loss_near_log_vocab(self):
        model = tiny_model(seed=6, vocab=10)
        feature = Tensor(np.random.default_rng(7).uniform(size=5))
        caption = [START_ID, 4, 5, 6, END_ID]
        _, loss = decode_train(model, feature, caption, train=False)
        assert abs(loss.item() - np.log(10)) < 0.5

    def test_caption_validation(self):
        model = tiny_model()
        feature = Tensor(np.zeros(5))
        with pytest.raises(DataError):
            decode_train(model, feature, [4, 5, END_ID])  # missing START
        with pytest.raises(DataError):
            decode_train(model, feature, [START_ID, 4, 5])  # missing END
        with pytest.raises(IndexError):
            decode_train(model, feature, [START_ID, 17, END_ID])

    def test_pad_after_end_invariant(self):
        model = tiny_model(seed=8, dropout=0.5)
        feature = Tensor(np.random.default_rng(9).uniform(size=5))
        caption = [START_ID, 4, 5, END_ID]
        padded = caption + [PAD_ID, PAD_ID]
        _, loss_a = decode_train(model, feature, caption, rng=np.random.default_rng(1))
        _, loss_b = decode_train(model, feature, padded, rng=np.random.default_rng(1))
        assert loss_a.item() == loss_b.item()

    def test_token_between_end_and_pad_rejected(self):
        model = tiny_model()
        with pytest.raises(DataError):
            decode_train(model, Tensor(np.zeros(5)), [START_ID, END_ID, 4])

    def test_gradient_check_full_decoder(self):
        model = tiny_model(seed=10)
        rng = np.random.default_rng(11)
        feature = Tensor(rng.uniform(-1, 1, size=5), requires_grad=True)
        caption = [START_ID, 4, 5, 4, END_ID]
        params = [feature] + list(model.params.values())

        def loss():
            return decode_train(model, feature, caption, train=False)[1]

        with GradTape() as tape:
            backward(loss(), tape)
        analytic = [tape.grad(p).data if tape.grad(p) is not None else np.zeros_like(p.data)
                    for p in params]
        numeric = numeric_grad(lambda: loss().item(), [p.data for p in params])
        for g_a, g_n, p in zip(analytic, numeric, params):
            assert max_rel_err(g_a, g_n) < 1e-4


class TestGreedy:
    def rig_end_always(self, model):
        bias = np.zeros(model.config.vocab_size)
        bias[END_ID] = 50.0
        model.params["out.bias"].assign(bias)

    def test_immediate_end_gives_empty(self):
        model = tiny_model(seed=12)
        self.rig_end_always(model)
        assert greedy_decode(model, Tensor(np.zeros(5)), max_len=8) == []

    def test_deterministic(self):
        model = tiny_model(seed=13)
        feature = Tensor(np.random.default_rng(14).uniform(size=5))
        a = greedy_decode(model, feature, 6)
        b = greedy_decode(model, feature, 6)
        assert a == b

    def test_respects_max_len(self):
        model = tiny_model(seed=15)
        bias = np.zeros(6)
        bias[4] = 50.0  # never END
        model.params["out.bias"].assign(bias)
        out = greedy_decode(model, Tensor(np.zeros(5)), max_len=7)
        assert out == [4] * 7

    def test_no_specials_in_output(self):
        for seed in range(10):
            model = tiny_model(seed=seed)
            out = greedy_decode(model, Tensor(np.random.default_rng(seed).uniform(size=5)), 8)
            assert all(t not in (PAD_ID, START_ID, END_ID) for t in out)


class TestBeam:
    def test_width_one_equals_greedy_100_models(self):
        for seed in range(100):
            model = tiny_model(seed=seed, vocab=5, hidden=3, embed=2, feature=3)
            feature = Tensor(np.random.default_rng(1000 + seed).uniform(-1, 1, size=3))
            assert beam_decode(model, feature, 1, 4) == greedy_decode(model, feature, 4)

    def test_invalid_width(self):
        model = tiny_model()
        with pytest.raises(ConfigError):
            beam_decode(model, Tensor(np.zeros(5)), 0, 4)

    def _prefix_scorer(self, model, feature):
        def score(seq):
            h = Tensor(np.zeros(model.config.hidden_size))
            c = Tensor(np.zeros(model.config.hidden_size))
            x = T.affine(feature, model.params["img.weight"], model.params["img.bias"])
            total = 0.0
            for tok in seq:
                h, c = lstm_step(model.cell, x, h, c)
                logits = T.affine(h, model.params["out.weight"], model.params["out.bias"])
                total += float(T.log_softmax_values(logits.data)[tok])
                emb = T.embedding_lookup(model.params["embed.table"], [tok])
                x = T.reshape(emb, (model.config.embed_dim,))
            return total

        return score

    def _greedy_raw_walk(self, model, feature, max_len):
        h = Tensor(np.zeros(model.config.hidden_size))
        c = Tensor(np.zeros(model.config.hidden_size))
        x = T.affine(feature, model.params["img.weight"], model.params["img.bias"])
        raw = []
        for _ in range(max_len):
            h, c = lstm_step(model.cell, x, h, c)
            logits = T.affine(h, model.params["out.weight"], model.params["out.bias"])
            tok = int(np.argmax(logits.data))
            raw.append(tok)
            if tok == END_ID:
                break
            emb = T.embedding_lookup(model.params["embed.table"], [tok])
            x = T.reshape(emb, (model.config.embed_dim,))
        return tuple(raw)

    def test_exhaustive_width_matches_bruteforce(self):
        # V=4, max_len=3: beam with width >= V^max_len == global argmax
        for seed in range(12):
            model = tiny_model(seed=300 + seed, vocab=4, hidden=3, embed=2, feature=3)
            feature = Tensor(np.random.default_rng(400 + seed).uniform(-1, 1, size=3))
            score = self._prefix_scorer(model, feature)
            results = enumerate_decodes(score, 4, 3, END_ID)
            best = min(results, key=lambda item: (-item[0], item[1]))
            got_score, got_raw = beam_search(model, feature, beam_width=4 ** 3, max_len=3)
            assert got_raw == best[1]
            assert got_score == pytest.approx(best[0], abs=1e-12)
            stripped = [t for t in best[1] if t not in (PAD_ID, START_ID, END_ID)]
            assert beam_decode(model, feature, 4 ** 3, 3) == stripped

    def test_wide_beam_score_at_least_greedy(self):
        for seed in range(12):
            model = tiny_model(seed=500 + seed, vocab=4, hidden=3, embed=2, feature=3)
            feature = Tensor(np.random.default_rng(600 + seed).uniform(-1, 1, size=3))
            score = self._prefix_scorer(model, feature)
            greedy_raw = self._greedy_raw_walk(model, feature, 3)
            beam_score, _ = beam_search(model, feature, 64, 3)
            assert beam_score >= score(greedy_raw) / len(greedy_raw) - 1e-12


class TestTrainDecoder:
    def pairs(self, n, model, rng):
        out = []
        for i in range(n):
            feature = Tensor(rng.uniform(-1, 1, size=model.feature_dim))
            body = [4 + (i + j) % (model.config.vocab_size - 4) for j in range(3)]
            out.append((feature, [START_ID] + body + [END_ID]))
        return out

    def test_zero_epochs_noop(self):
        model = tiny_model(seed=20)
        before = {k: p.data.copy() for k, p in model.params.items()}
        result = train_decoder(model, self.pairs(4, model, np.random.default_rng(0)), [],
                               AdamConfig(), epochs=0, batch_size=2,
                               rng=np.random.default_rng(1))
        assert result.curve == []
        for k, p in model.params.items():
            np.testing.assert_array_equal(p.data, before[k])

    def test_empty_dataset_rejected(self):
        model = tiny_model()
        with pytest.raises(DataError):
            train_decoder(model, [], [], AdamConfig(), 1, 2, np.random.default_rng(0))

    def test_toy_overfit_token_accuracy(self):
        model = tiny_model(seed=21, vocab=20, hidden=32, embed=16, feature=8)
        rng = np.random.default_rng(22)
        pairs = []
        for i in range(8):
            feature = Tensor(rng.uniform(-1, 1, size=8))
            body = [4 + (i * 2 + j) % 16 for j in range(4)]
            pairs.append((feature, [START_ID] + body + [END_ID]))
        result = train_decoder(model, pairs, [], AdamConfig(), epochs=300, batch_size=8,
                               rng=np.random.default_rng(23))
        _, acc = caption_pair_metrics(model, pairs)
        assert acc >= 0.99
        assert len(result.curve) <= 300

    def test_bit_reproducible(self):
        def run():
            model = tiny_model(seed=24, dropout=0.3)
            pairs = self.pairs(4, model, np.random.default_rng(25))
            train_decoder(model, pairs, [], AdamConfig(), epochs=3, batch_size=2,
                          rng=np.random.default_rng(26))
            return {k: p.data.copy() for k, p in model.params.items()}

        a, b = run(), run()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_overfit_single_pair_greedy_reproduces(self):
        model = tiny_model(seed=27, vocab=10, hidden=16, embed=8, feature=4)
        feature = Tensor(np.random.default_rng(28).uniform(-1, 1, size=4))
        caption = [START_ID, 4, 7, 5, END_ID]
        train_decoder(model, [(feature, caption)], [], AdamConfig(), epochs=200,
                      batch_size=1, rng=np.random.default_rng(29))
        assert greedy_decode(model, feature, 8) == [4, 7, 5]

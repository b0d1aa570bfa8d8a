import math

import numpy as np
import pytest

from spanmix.corpus import CLS_ID, PAD_ID, SEP_ID, LabeledExample, TokenSequence
from spanmix.model import (
    AdamW,
    NumericError,
    ParamGrads,
    SoftLabel,
    ToyTextClassifier,
    backward,
    cross_entropy,
    forward,
    forward_embedmix,
    forward_hiddenmix,
    load_checkpoint,
    mixup_loss,
    save_checkpoint,
    sgd_step,
)


def seq(*content_ids, cls=True):
    ids = ((CLS_ID,) if cls else ()) + tuple(content_ids) + ((SEP_ID,) if cls else ())
    mask = ((True,) if cls else ()) + (False,) * len(content_ids) + ((True,) if cls else ())
    return TokenSequence(ids=ids, special_mask=mask)


def random_example(rng, vocab_size, length, num_classes, paired=False):
    def one():
        return seq(*(int(rng.integers(4, vocab_size)) for _ in range(length)))

    return LabeledExample(
        first=one(),
        second=one() if paired else None,
        label=int(rng.integers(num_classes)),
    )


def fd_param_grads(model, loss_fn, step=1e-3):
    """Central finite differences over every parameter coordinate."""
    out = {}
    for name, arr in model.params().items():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = arr[ix]
            arr[ix] = orig + step
            up = loss_fn()
            arr[ix] = orig - step
            down = loss_fn()
            arr[ix] = orig
            g[ix] = (up - down) / (2.0 * step)
        out[name] = g
    return out


def assert_grads_close(analytic: ParamGrads, fd: dict, rtol=1e-4, atol=1e-8):
    for name, g in analytic.arrays().items():
        np.testing.assert_allclose(g, fd[name], rtol=rtol, atol=atol, err_msg=name)


class TestForward:
    def test_zero_parameters_give_uniform_softmax(self):
        v, c = 8, 3
        model = ToyTextClassifier(
            np.zeros((v, 2)), np.zeros((2, 4)), np.zeros(4), np.zeros((4, c)), np.zeros(c)
        )
        ex = LabeledExample(seq(4, 5), None, 1)
        trace = forward(model, ex)
        assert np.all(trace.logits == 0.0)
        assert trace.loss == pytest.approx(math.log(c), abs=1e-12)

    def test_scalar_model_matches_hand_arithmetic(self):
        # d = h = 1, one content position, no specials: everything is scalar
        e_val, w1_val, b1_val = 0.3, 1.7, -0.2
        w2_col = np.array([[0.5, -1.1]])
        b2 = np.array([0.05, -0.4])
        emb = np.zeros((6, 1))
        emb[5, 0] = e_val
        model = ToyTextClassifier(emb, [[w1_val]], [b1_val], w2_col, b2)
        ex = LabeledExample(TokenSequence((5,), (False,)), None, 0)
        trace = forward(model, ex)
        h = math.tanh(w1_val * e_val + b1_val)
        logits = [0.5 * h + 0.05, -1.1 * h - 0.4]
        lse = math.log(math.exp(logits[0]) + math.exp(logits[1]))
        assert trace.logits == pytest.approx(logits, abs=1e-15)
        assert trace.loss == pytest.approx(lse - logits[0], abs=1e-12)

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(0)
        model = ToyTextClassifier.init(10, 3, 4, 2, seed=1)
        ex = random_example(rng, 10, 5, 2)
        t1, t2 = forward(model, ex), forward(model, ex)
        assert np.array_equal(t1.logits, t2.logits)
        assert t1.loss == t2.loss

    def test_pad_positions_excluded_from_pooling(self):
        model = ToyTextClassifier.init(10, 3, 4, 2, seed=1)
        plain = TokenSequence((CLS_ID, 5, SEP_ID), (True, False, True))
        padded = TokenSequence((CLS_ID, 5, SEP_ID, PAD_ID, PAD_ID),
                               (True, False, True, False, False))
        ta = forward(model, LabeledExample(plain, None, 0))
        tb = forward(model, LabeledExample(padded, None, 0))
        np.testing.assert_allclose(ta.logits, tb.logits, rtol=0, atol=0)

    def test_out_of_range_id_rejected(self):
        from spanmix.corpus import DataError

        model = ToyTextClassifier.init(6, 2, 2, 2, seed=0)
        with pytest.raises(DataError):
            forward(model, LabeledExample(seq(7), None, 0))


class TestMixupLoss:
    def test_lambda_zero_is_plain_ce_on_y_a(self):
        logits = np.array([0.3, -0.7, 1.2])
        assert mixup_loss(logits, SoftLabel(2, 0, 0.0)) == cross_entropy(logits, 2)

    def test_lambda_one_is_plain_ce_on_y_b(self):
        logits = np.array([0.3, -0.7, 1.2])
        assert mixup_loss(logits, SoftLabel(2, 0, 1.0)) == cross_entropy(logits, 0)

    def test_hand_value_for_zero_logits(self):
        # (0, 0) logits: every CE term is ln 2, so any convex mix is ln 2
        loss = mixup_loss(np.zeros(2), SoftLabel(0, 1, 0.2))
        assert loss == pytest.approx(0.8 * math.log(2) + 0.2 * math.log(2), abs=1e-15)

    def test_linear_in_lambda(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=5)
        at0 = mixup_loss(logits, SoftLabel(1, 3, 0.0))
        at1 = mixup_loss(logits, SoftLabel(1, 3, 1.0))
        for lam in rng.uniform(0, 1, size=25):
            mixed = mixup_loss(logits, SoftLabel(1, 3, float(lam)))
            assert mixed == pytest.approx((1 - lam) * at0 + lam * at1, abs=1e-12)

    def test_lambda_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            SoftLabel(0, 1, 1.5)
        with pytest.raises(ValueError):
            SoftLabel(0, 1, -0.1)

    def test_algorithm1_weighting_transposes(self):
        logits = np.array([0.9, -0.4])
        soft = SoftLabel(0, 1, 0.3)
        default = mixup_loss(logits, soft, weighting="label")
        flipped = mixup_loss(logits, soft, weighting="algorithm1")
        assert default == pytest.approx(
            0.7 * cross_entropy(logits, 0) + 0.3 * cross_entropy(logits, 1), abs=1e-15
        )
        assert flipped == pytest.approx(
            0.3 * cross_entropy(logits, 0) + 0.7 * cross_entropy(logits, 1), abs=1e-15
        )

    def test_strictly_positive_for_finite_logits(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            logits = rng.normal(scale=5, size=4)
            lam = float(rng.uniform(0.01, 0.99))
            assert mixup_loss(logits, SoftLabel(0, 1, lam)) > 0.0


class TestBackward:
    def test_matches_finite_differences_single(self):
        rng = np.random.default_rng(11)
        for trial in range(5):
            v, d, h, c = 12, 3, 4, 3
            model = ToyTextClassifier.init(v, d, h, c, seed=trial)
            ex = random_example(rng, v, int(rng.integers(1, 6)), c)
            grads, _ = backward(model, forward(model, ex))
            fd = fd_param_grads(model, lambda: forward(model, ex).loss)
            assert_grads_close(grads, fd)

    def test_matches_finite_differences_paired(self):
        rng = np.random.default_rng(12)
        model = ToyTextClassifier.init(10, 3, 3, 2, paired=True, seed=3)
        ex = random_example(rng, 10, 4, 2, paired=True)
        grads, _ = backward(model, forward(model, ex))
        fd = fd_param_grads(model, lambda: forward(model, ex).loss)
        assert_grads_close(grads, fd)

    def test_embedding_gradient_zero_at_pad(self):
        model = ToyTextClassifier.init(10, 3, 4, 2, seed=5)
        padded = TokenSequence((CLS_ID, 5, PAD_ID, SEP_ID), (True, False, False, True))
        _, emb_grads = backward(model, forward(model, LabeledExample(padded, None, 1)))
        np.testing.assert_array_equal(emb_grads[0][2], np.zeros(3))

    def test_soft_lambda_zero_equals_hard_label_grads(self):
        rng = np.random.default_rng(13)
        model = ToyTextClassifier.init(10, 3, 4, 3, seed=6)
        ex = random_example(rng, 10, 4, 3)
        hard, _ = backward(model, forward(model, ex))

        class Mixed:
            mixed = (ex.first,)
            soft_label = SoftLabel(ex.label, (ex.label + 1) % 3, 0.0)

        soft, _ = backward(model, forward(model, Mixed()))
        for name in hard.arrays():
            np.testing.assert_array_equal(hard.arrays()[name], soft.arrays()[name])


class TestEmbedMix:
    def test_lam_one_identical_to_plain_forward(self):
        # second example no longer than the first, so padding is a no-op
        model = ToyTextClassifier.init(12, 3, 4, 2, seed=2)
        ex_a = LabeledExample(seq(4, 5, 6, 7), None, 0)
        ex_b = LabeledExample(seq(8, 9), None, 1)
        ta = forward(model, ex_a)
        tm = forward_embedmix(model, ex_a, ex_b, 1.0)
        np.testing.assert_array_equal(tm.logits, ta.logits)

    def test_identical_inputs_reproduce_plain_logits_for_any_lam(self):
        model = ToyTextClassifier.init(12, 3, 4, 2, seed=2)
        ex = LabeledExample(seq(4, 5, 6), None, 1)
        base = forward(model, ex)
        for lam in (0.0, 0.25, 0.5, 0.9):
            tm = forward_embedmix(model, ex, ex, lam)
            np.testing.assert_allclose(tm.logits, base.logits, rtol=0, atol=1e-15)

    def test_scalar_interpolation_oracle(self):
        # d = h = 1, single content token each: pooled value is the mean of
        # tanh over CLS, interpolated token, SEP embeddings
        emb = np.zeros((8, 1))
        emb[CLS_ID, 0] = 0.1
        emb[SEP_ID, 0] = -0.1
        emb[5, 0] = 0.8
        emb[6, 0] = -0.4
        model = ToyTextClassifier(emb, [[1.0]], [0.0], [[1.0, -1.0]], [0.0, 0.0])
        ex_a = LabeledExample(seq(5), None, 0)
        ex_b = LabeledExample(seq(6), None, 1)
        lam = 0.5
        trace = forward_embedmix(model, ex_a, ex_b, lam)
        e_mid = lam * 0.8 + (1 - lam) * (-0.4)
        pooled = (math.tanh(0.1) + math.tanh(e_mid) + math.tanh(-0.1)) / 3.0
        assert trace.pooled[0] == pytest.approx(pooled, abs=1e-15)

    def test_soft_label_weight_mirrors_interpolation(self):
        model = ToyTextClassifier.init(12, 3, 4, 2, seed=2)
        ex_a = LabeledExample(seq(4, 5), None, 0)
        ex_b = LabeledExample(seq(8, 9), None, 1)
        trace = forward_embedmix(model, ex_a, ex_b, 0.8)
        # weight of the first label must equal the interpolation weight
        assert trace.soft_label.y_a == 0 and trace.soft_label.y_b == 1
        assert trace.soft_label.lam == pytest.approx(0.2)

    def test_grads_match_finite_differences(self):
        rng = np.random.default_rng(14)
        model = ToyTextClassifier.init(12, 3, 3, 2, seed=7)
        ex_a = random_example(rng, 12, 5, 2)
        ex_b = random_example(rng, 12, 3, 2)
        grads, _ = backward(model, forward_embedmix(model, ex_a, ex_b, 0.7))
        fd = fd_param_grads(model, lambda: forward_embedmix(model, ex_a, ex_b, 0.7).loss)
        assert_grads_close(grads, fd)


class TestHiddenMix:
    def test_embed_layer_reproduces_embedmix_bit_exactly(self):
        rng = np.random.default_rng(15)
        model = ToyTextClassifier.init(12, 3, 4, 2, seed=8)
        ex_a = random_example(rng, 12, 5, 2)
        ex_b = random_example(rng, 12, 4, 2)
        te = forward_embedmix(model, ex_a, ex_b, 0.42)
        th = forward_hiddenmix(model, ex_a, ex_b, 0.42, layer="embed")
        assert np.array_equal(te.logits, th.logits)
        assert te.loss == th.loss

    def test_lam_one_equals_plain_forward(self):
        model = ToyTextClassifier.init(12, 3, 4, 2, seed=8)
        ex_a = LabeledExample(seq(4, 5, 6, 7), None, 0)
        ex_b = LabeledExample(seq(8, 9), None, 1)
        th = forward_hiddenmix(model, ex_a, ex_b, 1.0)
        np.testing.assert_array_equal(th.logits, forward(model, ex_a).logits)

    def test_identical_inputs_equal_plain_forward(self):
        model = ToyTextClassifier.init(12, 3, 4, 2, seed=8)
        ex = LabeledExample(seq(4, 5, 6), None, 1)
        base = forward(model, ex)
        for lam in (0.1, 0.5, 0.77):
            th = forward_hiddenmix(model, ex, ex, lam)
            np.testing.assert_allclose(th.logits, base.logits, rtol=0, atol=1e-15)

    def test_grads_match_finite_differences(self):
        rng = np.random.default_rng(16)
        model = ToyTextClassifier.init(12, 3, 3, 2, seed=9)
        ex_a = random_example(rng, 12, 4, 2)
        ex_b = random_example(rng, 12, 6, 2)
        grads, _ = backward(model, forward_hiddenmix(model, ex_a, ex_b, 0.3))
        fd = fd_param_grads(model, lambda: forward_hiddenmix(model, ex_a, ex_b, 0.3).loss)
        assert_grads_close(grads, fd)


class TestOptimizers:
    def test_zero_grads_zero_decay_leave_parameters_unchanged(self):
        model = ToyTextClassifier.init(8, 2, 3, 2, seed=0)
        before = {k: v.copy() for k, v in model.params().items()}
        opt = AdamW(model, weight_decay=0.0)
        opt.step(model, ParamGrads.zeros(model), lr=0.1)
        for name, arr in model.params().items():
            np.testing.assert_array_equal(arr, before[name])

    def test_single_step_matches_hand_trace(self):
        model = ToyTextClassifier.init(8, 2, 3, 2, seed=0)
        theta0 = model.b2[1]
        g_val = 0.37
        grads = ParamGrads.zeros(model)
        grads.b2[1] = g_val
        opt = AdamW(model, weight_decay=0.0)
        opt.step(model, grads, lr=0.05)
        # bias-corrected first step: m_hat = g, v_hat = g^2
        expected = theta0 - 0.05 * (g_val / (math.sqrt(g_val * g_val) + 1e-8))
        assert model.b2[1] == pytest.approx(expected, abs=1e-15)

    def test_two_steps_match_hand_trace(self):
        model = ToyTextClassifier.init(8, 2, 3, 2, seed=0)
        theta = float(model.w2[0, 0])
        gs = [0.5, -0.25]
        opt = AdamW(model, weight_decay=0.0)
        m = v = 0.0
        for t, g in enumerate(gs, start=1):
            grads = ParamGrads.zeros(model)
            grads.w2[0, 0] = g
            opt.step(model, grads, lr=0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            m_hat = m / (1 - 0.9**t)
            v_hat = v / (1 - 0.999**t)
            theta -= 0.01 * (m_hat / (math.sqrt(v_hat) + 1e-8))
        assert model.w2[0, 0] == pytest.approx(theta, abs=1e-15)

    def test_decoupled_weight_decay(self):
        model = ToyTextClassifier.init(8, 2, 3, 2, seed=0)
        theta0 = float(model.w1[0, 0])
        opt = AdamW(model, weight_decay=0.1)
        opt.step(model, ParamGrads.zeros(model), lr=0.5)
        assert model.w1[0, 0] == pytest.approx(theta0 - 0.5 * 0.1 * theta0, abs=1e-15)

    def test_pad_row_stays_zero_over_many_steps(self):
        rng = np.random.default_rng(17)
        model = ToyTextClassifier.init(8, 2, 3, 2, seed=0)
        opt = AdamW(model)
        for _ in range(100):
            grads = ParamGrads.zeros(model)
            grads.emb[:] = rng.normal(size=grads.emb.shape)
            opt.step(model, grads, lr=0.01)
        np.testing.assert_array_equal(model.emb[PAD_ID], np.zeros(2))

    def test_non_finite_gradient_fails_fast(self):
        model = ToyTextClassifier.init(8, 2, 3, 2, seed=0)
        opt = AdamW(model)
        grads = ParamGrads.zeros(model)
        grads.w1[0, 0] = float("nan")
        with pytest.raises(NumericError):
            opt.step(model, grads, lr=0.01)

    def test_plain_sgd_debug_step(self):
        model = ToyTextClassifier.init(8, 2, 3, 2, seed=0)
        theta0 = float(model.b1[0])
        grads = ParamGrads.zeros(model)
        grads.b1[0] = 2.0
        sgd_step(model, grads, lr=0.1)
        assert model.b1[0] == pytest.approx(theta0 - 0.2, abs=1e-15)


class TestCheckpoint:
    def test_roundtrip_is_bit_exact(self, tmp_path):
        model = ToyTextClassifier.init(20, 4, 5, 3, paired=True, seed=42)
        path = tmp_path / "model.bin"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        for name in model.params():
            np.testing.assert_array_equal(loaded.params()[name], model.params()[name])
        assert loaded.paired == model.paired
        assert loaded.nonlinearity == model.nonlinearity

    def test_rewrite_is_byte_identical(self, tmp_path):
        model = ToyTextClassifier.init(10, 3, 4, 2, seed=1)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(model, p1)
        save_checkpoint(model, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_file_rejected(self, tmp_path):
        from spanmix.corpus import DataError

        model = ToyTextClassifier.init(10, 3, 4, 2, seed=1)
        path = tmp_path / "model.bin"
        save_checkpoint(model, path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(DataError):
            load_checkpoint(path)

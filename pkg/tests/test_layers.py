import numpy as np
import pytest

from conftest import fd_gradient, rel_err
from spinegrade.layers import (AttentionConfig, BatchNorm2d, CatConv, Conv2d,
                               DropPathConfig, Linear, attention,
                               attention_weights, cat_conv, conv2d, droppath,
                               global_avg_pool)
from spinegrade.tensor import ShapeError, Tape, Tensor, backward, reduce_sum


def naive_conv(x, w, b, stride, pad):
    """Six-loop direct cross-correlation oracle."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for ni in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = b[co]
                    for ci in range(cin):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (w[co, ci, ki, kj]
                                        * xp[ni, ci, i * stride + ki, j * stride + kj])
                    out[ni, co, i, j] = acc
    return out


class TestConv2d:
    def test_1x1_scaling(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        w = Tensor(np.array([[[[2.0]]]]))
        out = conv2d(x, w)
        assert np.array_equal(out.data, [[[[2.0, 4.0], [6.0, 8.0]]]])

    def test_3x3_center_one_identity(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        w = np.zeros((2, 2, 3, 3))
        for c in range(2):
            w[c, c, 1, 1] = 1.0
        out = conv2d(Tensor(x), Tensor(w), padding=1)
        assert np.allclose(out.data, x, atol=1e-15)

    @pytest.mark.parametrize("stride,pad,kernel", [(1, 0, 3), (1, 1, 3),
                                                   (2, 1, 3), (1, 0, 1)])
    def test_matches_naive_oracle(self, rng, stride, pad, kernel):
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(4, 3, kernel, kernel))
        b = rng.normal(size=4)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
        want = naive_conv(x, w, b, stride, pad)
        assert out.shape == want.shape
        assert np.abs(out.data - want).max() < 1e-12

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError, match="channels"):
            conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
    def test_gradients_vs_fd(self, rng, stride, pad):
        x = rng.normal(size=(2, 2, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        tape = Tape()
        xt = Tensor(x, tape=tape)
        wt, bt = Tensor.param(w.copy()), Tensor.param(b.copy())
        out = conv2d(xt, wt, bt, stride, pad)
        coef = rng.normal(size=out.shape)
        backward(reduce_sum(out * Tensor(coef)))

        def scalar(xx, ww, bb):
            return (naive_conv(xx, ww, bb, stride, pad) * coef).sum()

        assert rel_err(xt.grad, fd_gradient(lambda v: scalar(v, w, b), x.copy())) < 1e-5
        assert rel_err(wt.grad, fd_gradient(lambda v: scalar(x, v, b), w.copy())) < 1e-5
        assert rel_err(bt.grad, fd_gradient(lambda v: scalar(x, w, v), b.copy())) < 1e-5


class TestBatchNorm:
    def test_constant_input_zeroed(self):
        bn = BatchNorm2d(3)
        x = Tensor(np.full((2, 3, 4, 4), 7.0))
        out = bn.forward(x)
        assert np.abs(out.data).max() <= 1e-3

    def test_gamma_zero_gives_beta(self, rng):
        bn = BatchNorm2d(2)
        bn.gamma.data = np.zeros(2)
        bn.beta.data = np.array([1.5, -2.0])
        out = bn.forward(Tensor(rng.normal(size=(3, 2, 2, 2))))
        assert np.allclose(out.data[:, 0], 1.5) and np.allclose(out.data[:, 1], -2.0)

    def test_batch_stats_hand_computed(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]],
                      [[[5.0, 6.0], [7.0, 8.0]]]])  # 2x1x2x2
        bn = BatchNorm2d(1, eps=0.0)
        out = bn.forward(Tensor(x))
        mean, var = 4.5, np.mean((x - 4.5) ** 2)
        assert np.allclose(out.data, (x - mean) / np.sqrt(var))
        assert np.allclose(bn.running_mean.data, 0.9 * 0.0 + 0.1 * mean)
        assert np.allclose(bn.running_var.data, 0.9 * 1.0 + 0.1 * var)

    def test_train_batch_of_one_rejected(self):
        bn = BatchNorm2d(1)
        with pytest.raises(ValueError, match="batch size"):
            bn.forward(Tensor(np.zeros((1, 1, 2, 2))))

    def test_eval_is_pure(self, rng):
        bn = BatchNorm2d(2)
        bn.forward(Tensor(rng.normal(size=(4, 2, 3, 3))))  # accumulate stats
        bn.set_mode("eval")
        x = Tensor(rng.normal(size=(1, 2, 3, 3)))
        first = bn.forward(x).data
        rm = bn.running_mean.data.copy()
        second = bn.forward(x).data
        assert np.array_equal(first, second)
        assert np.array_equal(bn.running_mean.data, rm)

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_gradients_vs_fd(self, rng, mode):
        x = rng.normal(size=(3, 2, 2, 2))
        bn = BatchNorm2d(2)
        bn.running_mean.data = rng.normal(size=2)
        bn.running_var.data = np.abs(rng.normal(size=2)) + 0.5
        rm, rv = bn.running_mean.data.copy(), bn.running_var.data.copy()
        bn.set_mode(mode)
        coef = rng.normal(size=x.shape)
        tape = Tape()
        xt = Tensor(x, tape=tape)
        backward(reduce_sum(bn.forward(xt) * Tensor(coef)))

        def oracle(v):
            if mode == "train":
                m = v.mean(axis=(0, 2, 3), keepdims=True)
                var = v.var(axis=(0, 2, 3), keepdims=True)
            else:
                m = rm[None, :, None, None]
                var = rv[None, :, None, None]
            xhat = (v - m) / np.sqrt(var + bn.eps)
            return ((bn.gamma.data[None, :, None, None] * xhat
                     + bn.beta.data[None, :, None, None]) * coef).sum()

        # running buffers move during the fd probes; restore each call
        def probe(v):
            bn.running_mean.data = rm.copy()
            bn.running_var.data = rv.copy()
            return oracle(v)

        assert rel_err(xt.grad, fd_gradient(probe, x.copy())) < 1e-5
        assert rel_err(bn.gamma.grad,
                       (coef * _xhat(x, rm, rv, bn.eps, mode)).sum(axis=(0, 2, 3))) < 1e-8


def _xhat(x, rm, rv, eps, mode):
    if mode == "train":
        m = x.mean(axis=(0, 2, 3), keepdims=True)
        v = x.var(axis=(0, 2, 3), keepdims=True)
    else:
        m = rm[None, :, None, None]
        v = rv[None, :, None, None]
    return (x - m) / np.sqrt(v + eps)


def naive_attention(q, k, v, d):
    t_q, t_k = q.shape[0], k.shape[0]
    out = np.zeros((t_q, v.shape[1]))
    for i in range(t_q):
        logits = np.array([np.dot(q[i], k[j]) / np.sqrt(d) for j in range(t_k)])
        e = np.exp(logits - logits.max())
        w = e / e.sum()
        for j in range(t_k):
            out[i] += w[j] * v[j]
    return out


class TestAttention:
    def test_single_token_returns_value(self, rng):
        q = Tensor(rng.normal(size=(1, 4)))
        k = Tensor(rng.normal(size=(1, 4)))
        v = Tensor(rng.normal(size=(1, 4)))
        out = attention(q, k, v, AttentionConfig(4))
        assert np.array_equal(out.data, v.data)

    def test_orthogonal_queries_give_value_mean(self):
        k = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        q = np.array([[0.0, 0.0, 5.0]])  # orthogonal to both keys
        v = np.array([[2.0, 4.0, 6.0], [4.0, 8.0, 10.0]])
        out = attention(Tensor(q), Tensor(k), Tensor(v), AttentionConfig(3))
        assert np.allclose(out.data, v.mean(axis=0), atol=1e-12)

    def test_matches_naive_oracle(self, rng):
        q, k, v = (rng.normal(size=(3, 4)) for _ in range(3))
        out = attention(Tensor(q), Tensor(k), Tensor(v), AttentionConfig(4))
        assert np.abs(out.data - naive_attention(q, k, v, 4)).max() < 1e-12

    def test_rows_sum_to_one(self, rng):
        q, k = rng.normal(size=(5, 6)) * 3, rng.normal(size=(7, 6)) * 3
        w = attention_weights(Tensor(q), Tensor(k), AttentionConfig(6))
        assert np.abs(w.data.sum(axis=-1) - 1.0).max() < 1e-12

    def test_dim_mismatch(self, rng):
        with pytest.raises(ShapeError):
            attention(Tensor(rng.normal(size=(3, 4))),
                      Tensor(rng.normal(size=(3, 5))),
                      Tensor(rng.normal(size=(3, 5))), AttentionConfig(4))

    def test_gradient_vs_fd(self, rng):
        q, k, v = (rng.normal(size=(3, 4)) for _ in range(3))
        coef = rng.normal(size=(3, 4))
        tape = Tape()
        qt = Tensor(q, tape=tape)
        backward(reduce_sum(
            attention(qt, Tensor(k), Tensor(v), AttentionConfig(4)) * Tensor(coef)))
        want = fd_gradient(lambda x: (naive_attention(x, k, v, 4) * coef).sum(),
                           q.copy())
        assert rel_err(qt.grad, want) < 1e-5

    def test_projections(self, rng):
        d = 4
        wq, wk, wv = (Tensor.param(rng.normal(size=(d, d))) for _ in range(3))
        cfg = AttentionConfig(d, True, wq, wk, wv)
        q, k, v = (rng.normal(size=(3, d)) for _ in range(3))
        out = attention(Tensor(q), Tensor(k), Tensor(v), cfg)
        want = naive_attention(q @ wq.data, k @ wk.data, v @ wv.data, d)
        assert np.abs(out.data - want).max() < 1e-12

    def test_projection_shape_validation(self):
        with pytest.raises(ShapeError):
            AttentionConfig(4, True, Tensor(np.zeros((3, 3))),
                            Tensor(np.zeros((4, 4))), Tensor(np.zeros((4, 4))))


class TestDropPath:
    def test_p_zero_is_plain_residual(self, rng):
        x, r = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 3, 2, 2))
        out = droppath(Tensor(x), Tensor(r), DropPathConfig(0.0, "train"),
                       np.random.default_rng(0))
        assert np.array_equal(out.data, x + r)

    def test_eval_identity(self, rng):
        x, r = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 3, 2, 2))
        out = droppath(Tensor(x), Tensor(r), DropPathConfig(0.5, "eval"))
        assert np.array_equal(out.data, x + r)

    def test_monte_carlo_mean(self):
        x = np.zeros((1, 1, 1, 1))
        r = np.ones((1, 1, 1, 1))
        rng = np.random.default_rng(123)
        n = 10_000
        total = 0.0
        for _ in range(n):
            total += droppath(Tensor(x), Tensor(r), DropPathConfig(0.5, "train"),
                              rng).data.item()
        # each sample is 0 or 2 with p=1/2: mean 1, sd of the mean = 1/sqrt(n)
        assert abs(total / n - 1.0) <= 3.0 / np.sqrt(n)

    def test_invalid_prob(self):
        with pytest.raises(ValueError):
            DropPathConfig(1.0, "train")

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            droppath(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 2, 2, 3))),
                     DropPathConfig(0.0, "train"), rng)


class TestCatConv:
    def test_output_non_negative(self, rng):
        cc = CatConv(4, rng=np.random.default_rng(0))
        out = cc.forward(Tensor(rng.normal(size=(2, 4, 4, 4))),
                         Tensor(rng.normal(size=(2, 4, 4, 4))))
        assert out.data.min() >= 0.0

    def test_shape_contract(self, rng):
        cc = CatConv(16, rng=np.random.default_rng(0))
        cc.set_mode("eval")
        out = cc.forward(Tensor(rng.normal(size=(16, 8, 8))),
                         Tensor(rng.normal(size=(16, 8, 8))))
        assert out.shape == (16, 8, 8)

    def test_composition_matches_stage_oracle(self, rng):
        from spinegrade.tensor import concat_channels, relu
        cc = CatConv(4, rng=np.random.default_rng(3))
        cc.set_mode("eval")
        a = Tensor(rng.normal(size=(2, 4, 5, 5)))
        b = Tensor(rng.normal(size=(2, 4, 5, 5)))
        got = cc.forward(a, b)
        staged = relu(cc.bn.forward(cc.mix.forward(cc.reduce.forward(
            concat_channels(a, b)))))
        assert np.abs(got.data - staged.data).max() < 1e-15

    def test_shared_params_are_order_sensitive(self, rng):
        cc = CatConv(3, rng=np.random.default_rng(1))
        cc.set_mode("eval")
        a = Tensor(rng.normal(size=(1, 3, 4, 4)))
        b = Tensor(rng.normal(size=(1, 3, 4, 4)))
        ab = cc.forward(a, b).data
        ba = cc.forward(b, a).data
        assert ab.shape == ba.shape
        assert not np.allclose(ab, ba)  # expected asymmetry, not a defect

    def test_free_function_alias(self, rng):
        cc = CatConv(2, rng=np.random.default_rng(2))
        cc.set_mode("eval")
        a = Tensor(rng.normal(size=(1, 2, 3, 3)))
        b = Tensor(rng.normal(size=(1, 2, 3, 3)))
        assert np.array_equal(cat_conv(a, b, cc).data, cc.forward(a, b).data)


class TestLinearPool:
    def test_linear_values(self, rng):
        lin = Linear(3, 2, rng=np.random.default_rng(0))
        x = rng.normal(size=(4, 3))
        out = lin.forward(Tensor(x))
        assert np.allclose(out.data, x @ lin.weight.data.T + lin.bias.data)

    def test_global_avg_pool(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        out = global_avg_pool(Tensor(x))
        assert np.allclose(out.data, x.mean(axis=(2, 3)))
        x3 = rng.normal(size=(3, 4, 5))
        assert np.allclose(global_avg_pool(Tensor(x3)).data, x3.mean(axis=(1, 2)))

    def test_module_state_roundtrip(self, rng):
        cc = CatConv(3, rng=np.random.default_rng(5))
        state = {k: v.data.copy() for k, v in cc.named_state()}
        cc2 = CatConv(3, rng=np.random.default_rng(9))
        cc2.load_state(state)
        for (_, a), (_, b) in zip(cc.named_state(), cc2.named_state()):
            assert np.array_equal(a.data, b.data)
        with pytest.raises(KeyError):
            cc2.load_state({"nope": np.zeros(1)})

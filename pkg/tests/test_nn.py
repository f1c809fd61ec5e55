import math

import numpy as np
import pytest

from conftest import pinned
from dsct import nn
from dsct import tensor as T
from dsct.tensor import ContractError, ShapeError, Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def f64(module):
    return module.to(np.float64)


def set_params(module, values: dict):
    own = dict(module.named_parameters())
    assert set(own) == set(values)
    for k, v in values.items():
        own[k].data = np.array(v, dtype=np.float64)
    return module


class TestLayerNorm:
    def test_examples(self):
        ln = f64(nn.LayerNorm(2, epsilon=1e-12))
        assert np.allclose(ln(t64([[3.0, 3.0]])).data, 0)
        np.testing.assert_allclose(ln(t64([[-1.0, 1.0]])).data, [[-1.0, 1.0]], atol=1e-9)
        ln.alpha.data[:] = 0
        ln.beta.data[:] = [0.5, -2.0]
        assert ln(t64([[7.0, 1.0]])).data.tolist() == [[0.5, -2.0]]

    def test_pre_affine_moments(self, rng):
        ln = f64(nn.LayerNorm(16))
        y = ln(t64(rng.normal(3, 5, size=(10, 16)))).data
        assert np.all(np.abs(y.mean(-1)) <= 1e-9)
        assert np.all(np.abs(y.var(-1) - 1) <= 1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            nn.LayerNorm(4)(t64(np.ones((2, 3))))


class TestAttention:
    def test_single_key_copies_value(self, rng):
        p = f64(nn.MultiHeadAttention(4, 2, rng))
        q = t64(rng.normal(size=(3, 4)))
        v = t64(rng.normal(size=(1, 4)))
        out = p(q, v, v).data
        expect = v.data @ p.w_v.data @ p.w_o.data
        np.testing.assert_allclose(out, np.repeat(expect, 3, axis=0), atol=1e-12)

    def test_identical_keys_average_values(self, rng):
        p = f64(nn.MultiHeadAttention(4, 1, rng))
        k = t64(np.tile(rng.normal(size=(1, 4)), (5, 1)))
        v = t64(rng.normal(size=(5, 4)))
        out = p(t64(rng.normal(size=(2, 4))), k, v).data
        expect = v.data.mean(0) @ p.w_v.data @ p.w_o.data
        np.testing.assert_allclose(out, np.tile(expect, (2, 1)), atol=1e-12)

    def test_pinned_single_head(self, golden):
        p = set_params(f64(nn.MultiHeadAttention(2, 1, T.make_rng(0))), pinned(golden, "mha1.a"))
        kv = t64(golden["mha1.kv"])
        np.testing.assert_allclose(p(t64(golden["mha1.q"]), kv, kv).data, golden["mha1.out"], atol=1e-12)

    def test_pinned_masked(self, golden):
        p = set_params(f64(nn.MultiHeadAttention(4, 2, T.make_rng(0))), pinned(golden, "msa.a"))
        out = nn.masked_self_attention(t64(golden["msa.x"]), p).data
        np.testing.assert_allclose(out, golden["msa.out"], atol=1e-12)

    def test_weights_are_distributions_with_exact_zeros(self, rng):
        p = f64(nn.MultiHeadAttention(8, 2, rng))
        x = t64(rng.normal(size=(2, 6, 8)))
        allow = nn.causal_mask(6)
        _, w = nn.multi_head_attention(x, x, x, p, allow, return_weights=True)
        assert np.all(w >= 0)
        assert np.all(np.abs(w.sum(-1) - 1) <= 1e-10)
        assert np.all(w[..., ~allow] == 0.0)

    def test_all_forbidden_row(self, rng):
        p = nn.MultiHeadAttention(4, 2, rng)
        x = t64(rng.normal(size=(3, 4)))
        allow = np.ones((3, 3), bool)
        allow[1] = False
        with pytest.raises(ContractError):
            p(x, x, x, allow)

    def test_heads_must_divide(self, rng):
        with pytest.raises(ContractError):
            nn.MultiHeadAttention(6, 4, rng)

    @pytest.mark.parametrize("L", range(1, 9))
    def test_causality(self, L):
        r = np.random.default_rng(L)
        p = f64(nn.MultiHeadAttention(8, 2, T.make_rng(L)))
        x = r.normal(size=(L, 8))
        base = nn.masked_self_attention(t64(x), p).data
        for t in range(L):
            y = x.copy()
            y[t] += r.normal(size=8)
            out = nn.masked_self_attention(t64(y), p).data
            assert np.array_equal(out[:t], base[:t])
            if t < L:
                assert not np.array_equal(out[t], base[t])

    def test_batched_matches_single(self, rng):
        p = f64(nn.MultiHeadAttention(8, 4, rng))
        x = rng.normal(size=(3, 5, 8))
        batched = nn.masked_self_attention(t64(x), p).data
        for b in range(3):
            np.testing.assert_allclose(batched[b], nn.masked_self_attention(t64(x[b]), p).data, atol=1e-12)


class TestFeedForward:
    def test_zero_weights(self, rng):
        p = f64(nn.PositionwiseFeedForward(4, 6, rng))
        for w in p.parameters():
            w.data[:] = 0
        assert np.array_equal(p(t64(rng.normal(size=(3, 4)))).data, np.zeros((3, 4)))

    def test_identity_on_positive_input(self, rng):
        p = f64(nn.PositionwiseFeedForward(4, 4, rng))
        p.w1.data, p.w2.data = np.eye(4), np.eye(4)
        p.b1.data[:] = 0
        p.b2.data[:] = 0
        x = np.abs(rng.normal(size=(3, 4))) + 0.1
        np.testing.assert_array_equal(p(t64(x)).data, x)

    def test_pinned(self, golden):
        p = set_params(f64(nn.PositionwiseFeedForward(4, 6, T.make_rng(0))), pinned(golden, "ffn.a"))
        np.testing.assert_allclose(p(t64(golden["ffn.x"])).data, golden["ffn.out"], atol=1e-12)


class TestPositions:
    def test_values(self):
        pe = nn.sinusoidal_pe(10, 6)
        assert pe[0].tolist() == [0, 1, 0, 1, 0, 1]
        assert np.all(np.abs(pe) <= 1)
        assert pe[1, 0] == math.sin(1)

    def test_odd_dim(self):
        with pytest.raises(ContractError):
            nn.sinusoidal_pe(4, 5)


class TestDropout:
    def test_identity_cases(self, rng):
        x = t64(rng.normal(size=(4, 4)))
        assert nn.dropout(x, 1.0, rng, True) is x
        assert nn.dropout(x, 0.5, rng, False) is x

    def test_keep_fraction(self):
        x = Tensor(np.ones(100_000))
        kept = (nn.dropout(x, 0.9, T.make_rng(5, "drop"), True).data != 0).mean()
        assert abs(kept - 0.9) <= 0.01

    @pytest.mark.parametrize("bad", [0.0, -0.1, 1.5])
    def test_range(self, bad, rng):
        with pytest.raises(ContractError):
            nn.dropout(Tensor(np.ones(3)), bad, rng, True)


def _block_losses(rng):
    """(name, module, loss(x)) triples for the gradient suite."""
    d = 8
    ln = f64(nn.LayerNorm(d))
    ln.alpha.data = rng.normal(1, 0.2, size=d)
    mha = f64(nn.MultiHeadAttention(d, 2, rng))
    ffn = f64(nn.PositionwiseFeedForward(d, 12, rng))
    lin = f64(nn.Linear(d, 5, rng))
    mem = t64(rng.normal(size=(3, d)))
    w = t64(rng.normal(size=(4, d)))
    return [
        ("layer_norm", ln, lambda x: T.tsum(ln(x) * w)),
        ("attention", mha, lambda x: T.tsum(mha(x, mem, mem) * w)),
        ("masked_self_attention", mha, lambda x: T.tsum(nn.masked_self_attention(x, mha) * w)),
        ("feed_forward", ffn, lambda x: T.tsum(ffn(x) * w)),
        ("linear", lin, lambda x: T.tsum(lin(x) * lin(x))),
    ]


@pytest.mark.parametrize("which", range(5))
def test_block_gradients(which):
    """Input and parameter gradients of each block on 20 random 4x8 inputs."""
    worst = 0.0
    for trial in range(20):
        r = np.random.default_rng(100 + trial)
        name, module, loss = _block_losses(r)[which]
        x = t64(r.normal(size=(4, 8)))
        worst = max(worst, T.grad_check(loss, x))
        for _, p in module.named_parameters():
            coords = r.choice(p.data.size, min(4, p.data.size), replace=False)
            worst = max(worst, T.grad_check(lambda _p, x=x: loss(x), p, coords=coords))
    assert worst <= 1e-4, name


def test_parameter_walk_dedupes_shared():
    rng = T.make_rng(0)

    class Two(nn.Module):
        def __init__(self):
            self.a = nn.Linear(2, 2, rng)
            self.b = [self.a]

    assert len(Two().parameters()) == 2

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lsn import tensor as T
from lsn.lsu import LsuParams, lsu_forward, lsu_span_dim
from lsn.spanlab import numerical_rank


def dot_oracle(inputs, weight, bias):
    """Per-pixel dot product of the stacked channel vector with each weight row."""
    c = np.concatenate(inputs, axis=1)
    B, C, H, W = c.shape
    n = weight.shape[0]
    out = np.empty((B, n, H, W))
    for b in range(B):
        for i in range(H):
            for j in range(W):
                out[b, :, i, j] = weight.reshape(n, C) @ c[b, :, i, j] + bias.reshape(n)
    return out


def _params(weight, bias, in_sizes, out_sizes=None):
    n = weight.shape[0]
    return LsuParams(np.asarray(weight, np.float64).reshape(n, -1, 1, 1), np.asarray(bias, np.float64).reshape(1, n, 1, 1),
                     in_sizes, out_sizes or (1,) * n)


def test_unit_weights_sum(rng):
    a, b = rng.standard_normal((2, 1, 1, 4, 4))
    (out,) = lsu_forward([a, b], _params(np.ones((1, 2)), [0.0], (1, 1)))
    np.testing.assert_allclose(out, a + b, atol=1e-12)


def test_basis_vector_selects(rng):
    x = rng.standard_normal((1, 3, 5, 5))
    (out,) = lsu_forward([x], _params(np.array([[0.0, 1.0, 0.0]]), [0.0], (3,)))
    assert np.array_equal(out[0, 0], x[0, 1])


def test_random_matches_dot_oracle(rng):
    inputs = [rng.standard_normal((1, 1, 6, 6)) for _ in range(4)]
    w, b = rng.standard_normal((3, 4)), rng.standard_normal(3)
    outs = lsu_forward(inputs, _params(w, b, (1, 1, 1, 1)))
    assert len(outs) == 3
    np.testing.assert_allclose(np.concatenate(outs, 1), dot_oracle(inputs, w, b), atol=1e-6)


def test_identity_reproduces_inputs(rng):
    inputs = [rng.standard_normal((1, 1, 4, 4)).astype(np.float32) for _ in range(3)]
    p = LsuParams.init((1, 1, 1), 3, identity=True)
    outs = lsu_forward(inputs, p)
    for a, b in zip(inputs, outs):
        assert np.array_equal(a, b)


def test_spatial_mismatch_names_input():
    p = LsuParams.init((1, 1), 1)
    with pytest.raises(T.ShapeError, match="input 1"):
        lsu_forward([np.zeros((1, 1, 4, 4), np.float32), np.zeros((1, 1, 2, 2), np.float32)], p)


def test_channel_count_checked():
    with pytest.raises(T.ShapeError):
        LsuParams(np.zeros((1, 3, 1, 1)), np.zeros((1, 1, 1, 1)), (1, 1), (1,))


def test_init_scale_and_bias(rng):
    p = LsuParams.init((4, 4), 2, rng)
    assert np.abs(p.weight).max() <= 1 / 8
    assert np.all(p.bias == 0)
    assert set(p.named("u")) == {"lsu.u.lambda", "lsu.u.bias"}


def test_multichannel_outputs(rng):
    x = rng.standard_normal((1, 3, 2, 2))
    outs = lsu_forward([x], _params(rng.standard_normal((3, 3)), np.zeros(3), (3,), (2, 1)))
    assert [o.shape[1] for o in outs] == [2, 1]


@given(st.integers(0, 10_000))
def test_spatial_equivariance(seed):
    r = np.random.default_rng(seed)
    inputs = [r.standard_normal((1, 2, 4, 4)) for _ in range(2)]
    p = _params(r.standard_normal((2, 4)), r.standard_normal(2), (2, 2))
    perm = r.permutation(16)
    shuffle = lambda x: x.reshape(*x.shape[:2], 16)[..., perm].reshape(x.shape)  # noqa: E731
    a = [shuffle(o) for o in lsu_forward(inputs, p)]
    b = lsu_forward([shuffle(x) for x in inputs], p)
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


@given(st.floats(-4, 4), st.integers(0, 10_000))
def test_linear_in_inputs(a, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((1, 3, 3, 3)).astype(np.float32)
    p = LsuParams.init((3,), 2, r)
    (u1, u2) = lsu_forward([(a * x).astype(np.float32)], p)
    (v1, v2) = lsu_forward([x], p)
    np.testing.assert_allclose(u1, a * v1, atol=1e-5)
    np.testing.assert_allclose(u2, a * v2, atol=1e-5)


def test_gradients_pass_grad_check(rng):
    g = T.Graph({"lsu.u.lambda": rng.standard_normal((2, 3, 1, 1)), "lsu.u.bias": rng.standard_normal((1, 2, 1, 1))},
                precision="verification")
    from lsn.lsu import lsu_nodes

    a, b = lsu_nodes([g.input(rng.standard_normal((1, 1, 4, 4))), g.input(rng.standard_normal((1, 2, 4, 4)))], "u")
    loss = T.total(T.sigmoid(T.add([a, T.scale(b, 2.0)])))
    assert max(T.grad_check(g, loss).values()) <= 1e-4


class TestSpanDim:
    def test_single_output(self, rng):
        assert lsu_span_dim(_params(rng.standard_normal((1, 5)), [0.0], (5,))) == 1

    def test_duplicated_rows(self, rng):
        row = rng.standard_normal(4)
        assert lsu_span_dim(_params(np.stack([row, row, row]), np.zeros(3), (4,))) == 1

    def test_full_rank_agrees_with_rank_oracle(self, rng):
        w = rng.standard_normal((3, 8))
        p = _params(w, np.zeros(3), (8,))
        assert lsu_span_dim(p) == 3 == numerical_rank(w.T)

import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view

from lsn import tensor as T
from lsn.model import (build_variant, check_input_size, count_params, forward, infer, init_params,
                       probability, span_windows, spec_from_config)


# ---------------------------------------------------------------------------
# independent numpy re-implementation of the LSN_3 wiring


def np_conv3(x, w, b):
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))        # C, H, W, 3, 3
    return np.einsum("chwij,ocij->ohw", win, w) + b.reshape(-1, 1, 1)


def np_pool(x):
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))


def np_mix(maps, weight, bias):
    stacked = np.concatenate([m.reshape(-1, *m.shape[-2:]) for m in maps])
    return np.einsum("oc,chw->ohw", weight[:, :, 0, 0], stacked) + bias.reshape(-1, 1, 1)


def np_bilinear(x, f):
    def mat(n):
        m = np.zeros((n * f, n))
        for o in range(n * f):
            s = min(max((o + 0.5) / f - 0.5, 0.0), n - 1)
            lo = int(s)
            hi = min(lo + 1, n - 1)
            m[o, lo] += 1 - (s - lo)
            m[o, hi] += s - lo
        return m

    return np.stack([mat(x.shape[-2]) @ c @ mat(x.shape[-1]).T for c in x])


def np_transposed(x, k, f):
    """Gather form: each output pixel collects the padded inputs whose footprint covers it."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    c, h, w = x.shape
    off = 3 * f // 2
    out = np.zeros((c, h * f, w * f))
    for y in range(h * f):
        for i in range(xp.shape[1]):
            a = y + off - i * f
            if not 0 <= a < 2 * f:
                continue
            for xx in range(w * f):
                for j in range(xp.shape[2]):
                    b = xx + off - j * f
                    if 0 <= b < 2 * f:
                        out[:, y, xx] += xp[:, i, j] * k[:, 0, a, b]
    return out


def lsn3_reference(p, image):
    x = image[0]
    s = {}
    for i in range(1, 6):
        if i > 1:
            x = np_pool(x)
        for j in (1, 2):
            x = np.maximum(np_conv3(x, p[f"backbone.s{i}.conv{j}.weight"], p[f"backbone.s{i}.conv{j}.bias"]), 0)
        s[i] = np_mix([x], p[f"lsu.feature{i}.lambda"], p[f"lsu.feature{i}.bias"])

    def bridge(level, maps):
        up = np_transposed(np.concatenate(maps), p[f"up.align{level}.kernel"], 2)
        out = np_mix([up], p[f"lsu.align{level}.lambda"], p[f"lsu.align{level}.bias"])
        return [out[q : q + 1] for q in range(len(maps))]

    def span(anchor, maps):
        return np_mix(maps, p[f"lsu.subspace{anchor}.lambda"], p[f"lsu.subspace{anchor}.bias"])

    (s5_4,) = bridge(4, [s[5]])
    o5 = span(5, [s[4], s5_4])
    s4_3, s5_3, o5_3 = bridge(3, [s[4], s5_4, o5])
    o4 = span(4, [s[3], s4_3, s5_3, o5_3])
    s4_2, s3_2, o4_2 = bridge(2, [s4_3, s[3], o4])
    o3 = span(3, [s[2], s3_2, s4_2, o4_2])
    s3_1, s2_1, o3_1 = bridge(1, [s3_2, s[2], o3])
    o2 = span(2, [s[1], s2_1, s3_1, o3_1])
    o1 = span(1, [s[1], s2_1, o2])
    heads = {f"feature{i}": s[i] for i in s}
    heads.update({"align4.s5": s5_4, "align3.s4": s4_3, "align3.s5": s5_3, "align3.o5": o5_3,
                  "align2.s4": s4_2, "align2.s3": s3_2, "align2.o4": o4_2,
                  "align1.s3": s3_1, "align1.s2": s2_1, "align1.o3": o3_1,
                  "subspace5": o5, "subspace4": o4, "subspace3": o3, "subspace2": o2, "subspace1": o1})
    level = lambda m: m.shape[-1]  # noqa: E731
    full = image.shape[-1]
    return {k: (v if level(v) == full else np_bilinear(v, full // level(v))) for k, v in heads.items()}


def test_lsn3_matches_straight_line_reference(rng):
    spec = build_variant(3, widths=(3, 4, 4, 5, 5))
    params = {k: (v + 0.2 * rng.standard_normal(v.shape)).astype(np.float64) for k, v in init_params(spec, 3).items()}
    image = rng.uniform(-0.5, 0.5, (1, 1, 64, 64))
    out = forward(spec, params, image, precision="verification")
    ref = lsn3_reference(params, image)
    assert set(ref) == set(spec.supervision)
    for name in spec.supervision:
        np.testing.assert_allclose(out.heads[name][0], ref[name], atol=1e-5, err_msg=name)
    np.testing.assert_allclose(out.final_map[0], ref["subspace1"], atol=1e-5)


# ---------------------------------------------------------------------------
# wiring


def test_windows_by_hand():
    assert span_windows(1) == []
    assert [w for _, w in span_windows(2)] == [(4, 5), (3, 4), (2, 3), (1, 2)]
    assert span_windows(3) == [(5, (4, 5)), (4, (3, 4, 5)), (3, (2, 3, 4)), (2, (1, 2, 3)), (1, (1, 2))]
    assert [w for _, w in span_windows(4)] == [(4, 5), (3, 4, 5), (2, 3, 4, 5), (1, 2, 3, 4), (1, 2, 3)]


def test_lsn1_feature_span_only():
    spec = build_variant(1)
    assert spec.groups == () and spec.bridges == ()
    assert spec.supervision == tuple(f"feature{i}" for i in range(1, 6))


def test_lsn2_adjacent_pairs():
    spec = build_variant(2)
    assert len(spec.groups) == 4
    assert all(len(g.window) == 2 and g.window[1] == g.window[0] + 1 for g in spec.groups)


def test_lsn3_interior_three_boundary_two():
    sizes = [len(g.window) for g in build_variant(3).groups]
    assert sizes == [2, 3, 3, 3, 2]


def test_group_inputs_share_level():
    for k in (2, 3, 4):
        spec = build_variant(k)
        for g in spec.groups:
            assert g.level == min(g.window)
            assert g.inputs[: len(g.window)] == tuple(f"s{j}" for j in g.window)


@pytest.mark.parametrize("k,n", [(1, 5), (2, 16), (3, 20), (4, 22)])
def test_head_counts(k, n):
    assert len(build_variant(k).supervision) == n


def test_param_count_increases():
    counts = [count_params(build_variant(k)) for k in (1, 2, 3, 4)]
    assert counts == sorted(set(counts))
    assert counts[0] == sum(v.size for v in init_params(build_variant(1)).values())


def test_bad_variant():
    with pytest.raises(ValueError):
        build_variant(5)
    with pytest.raises(ValueError):
        build_variant(3, alignment="bogus")


def test_config_round_trip():
    spec = build_variant(3, 0.5)
    assert spec_from_config(spec.to_config()) == spec
    assert spec.to_config()["variant"] == "lsn3"


# ---------------------------------------------------------------------------
# forward


@pytest.fixture(scope="module")
def small():
    spec = build_variant(3, 0.25)
    return spec, init_params(spec, 0)


def test_heads_at_input_resolution(small, rng):
    spec, params = small
    out = forward(spec, params, rng.uniform(-0.5, 0.5, (1, 1, 48, 32)).astype(np.float32))
    assert set(out.heads) == set(spec.supervision) | {"final"}
    assert all(v.shape == (1, 1, 48, 32) for v in out.heads.values())


def test_zero_parameters_give_zero_maps(small, rng):
    spec, params = small
    zero = {k: np.zeros_like(v) for k, v in params.items()}
    out = forward(spec, zero, rng.standard_normal((1, 1, 32, 32)).astype(np.float32))
    assert all(not v.any() for v in out.heads.values())


def test_subspace_span_leaves_feature_heads_alone(rng):
    spec3, spec1 = build_variant(3, 0.25), build_variant(1, 0.25)
    p3 = init_params(spec3, 5)
    p1 = {k: p3[k] for k in init_params(spec1, 0)}
    image = rng.standard_normal((1, 1, 32, 32)).astype(np.float32)
    a, b = forward(spec3, p3, image), forward(spec1, p1, image)
    for i in range(1, 6):
        assert np.array_equal(a.heads[f"feature{i}"], b.heads[f"feature{i}"])


def test_lsn1_final_is_mean_of_sides(rng):
    spec = build_variant(1, 0.25)
    out = forward(spec, init_params(spec, 0), rng.standard_normal((1, 1, 32, 32)).astype(np.float32))
    mean = np.mean([out.heads[f"feature{i}"] for i in range(1, 6)], axis=0)
    np.testing.assert_allclose(out.final_map, mean, atol=1e-6)


def test_indivisible_input_rejected(small):
    spec, params = small
    with pytest.raises(T.ShapeError, match="16"):
        forward(spec, params, np.zeros((1, 1, 40, 32), np.float32))
    check_input_size(spec, (1, 1, 32, 48))


def test_forward_deterministic(small, rng):
    spec, params = small
    image = rng.standard_normal((1, 1, 32, 32)).astype(np.float32)
    assert forward(spec, params, image).final_map.tobytes() == forward(spec, params, image).final_map.tobytes()


def test_infer_thresholds(small, rng):
    spec, params = small
    image = rng.standard_normal((1, 1, 32, 32)).astype(np.float32)
    assert infer(spec, params, image, 0.0).all()
    assert not infer(spec, params, image, 1.0).any()
    zero = {k: np.zeros_like(v) for k, v in params.items()}
    assert np.all(probability(spec, zero, image) == 0.5)
    assert not infer(spec, zero, image, 0.5).any()     # ties go negative
    with pytest.raises(ValueError):
        infer(spec, params, image, 1.5)


def test_init_deterministic_and_alignment_identity():
    spec = build_variant(3, 0.25)
    a, b = init_params(spec, 7), init_params(spec, 7)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    w = a["lsu.align3.lambda"][:, :, 0, 0]
    assert np.array_equal(w, np.eye(3, dtype=np.float32))


@pytest.mark.parametrize("alignment", ["unsupervised", "plain"])
def test_alignment_ablations(alignment, rng):
    spec = build_variant(3, 0.25, alignment=alignment)
    assert not any(h.startswith("align") for h in spec.supervision)
    assert (spec.bridges == ()) == (alignment == "plain")
    out = forward(spec, init_params(spec, 0), rng.standard_normal((1, 1, 32, 32)).astype(np.float32))
    assert out.final_map.shape == (1, 1, 32, 32)


def test_full_network_grad_check(rng):
    spec = build_variant(3, widths=(2, 2, 3, 3, 3))
    params = {k: v.astype(np.float64) + 0.1 * rng.standard_normal(v.shape) for k, v in init_params(spec, 1).items()}
    g = T.Graph(params, precision="verification")
    from lsn.model import build_graph

    heads = build_graph(spec, g, g.input(rng.uniform(-0.5, 0.5, (1, 1, 32, 32))))
    for name in ("feature2", "align1.o3", "subspace1"):
        loss = T.total(T.sigmoid(heads[name]))
        errs = T.grad_check(g, loss, max_entries=4, names=[n for n in params if "s5.conv2" in n or "align1" in n or "subspace" in n])
        assert max(errs.values()) <= 1e-4, name

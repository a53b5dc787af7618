import numpy as np
import pytest

from sedscene.layers import (BatchNorm2D, BiGru, Conv2D, Dense, GruDirection,
                             MaxPool2D)
from sedscene.tensorops import make_rng, sigmoid, softmax


def fd_check(layer, x, loss_weight, probes=8, h=1e-6, seed=0):
    """Central-difference oracle for dL/dparams and dL/dx with
    L = sum(w * forward(x))."""
    def loss():
        return float((layer.forward(x, train=True) * loss_weight).sum())

    layer.forward(x, train=True)
    layer.zero_grads()
    dx = layer.backward(loss_weight.copy())
    rng = make_rng(seed)
    worst = 0.0
    for name, p in layer.params().items():
        flat = p.reshape(-1)
        g = layer.grads()[name].reshape(-1)
        for i in rng.choice(flat.size, size=min(probes, flat.size), replace=False):
            o = flat[i]
            flat[i] = o + h
            lp = loss()
            flat[i] = o - h
            lm = loss()
            flat[i] = o
            num = (lp - lm) / (2 * h)
            worst = max(worst, abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-6))
    xf = x.reshape(-1)
    dxf = dx.reshape(-1)
    for i in rng.choice(xf.size, size=min(probes, xf.size), replace=False):
        o = xf[i]
        xf[i] = o + h
        lp = loss()
        xf[i] = o - h
        lm = loss()
        xf[i] = o
        num = (lp - lm) / (2 * h)
        worst = max(worst, abs(num - dxf[i]) / max(abs(num), abs(dxf[i]), 1e-6))
    return worst


# -- conv ------------------------------------------------------------------

def test_conv_identity_kernel():
    conv = Conv2D("c", 1, 1, seed=0, dtype=np.float64)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    conv.set_param("w", w)
    x = make_rng(0).normal(size=(2, 1, 5, 7))
    np.testing.assert_allclose(conv.forward(x), x, atol=1e-12)


def test_conv_zero_input_gives_bias():
    conv = Conv2D("c", 2, 3, seed=0, dtype=np.float64)
    conv.set_param("b", np.array([1.0, -2.0, 0.5]))
    out = conv.forward(np.zeros((1, 2, 4, 4)))
    for c, b in enumerate([1.0, -2.0, 0.5]):
        np.testing.assert_allclose(out[0, c], b)


def test_conv_all_ones_border_counts():
    conv = Conv2D("c", 1, 1, seed=0, dtype=np.float64)
    conv.set_param("w", np.ones((1, 1, 3, 3)))
    conv.set_param("b", np.zeros(1))
    out = conv.forward(np.ones((1, 1, 3, 3)))[0, 0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == 4.0
    assert out[0, 2] == 4.0
    assert out[2, 0] == 4.0


def test_conv_channel_mismatch():
    conv = Conv2D("c", 3, 1, seed=0)
    with pytest.raises(ValueError):
        conv.forward(np.zeros((1, 2, 4, 4)))


def test_conv_gradients():
    rng = make_rng(1)
    conv = Conv2D("c", 3, 4, seed=1, dtype=np.float64)
    x = rng.normal(size=(2, 3, 5, 6))
    w = rng.normal(size=(2, 4, 5, 6))
    assert fd_check(conv, x, w) < 1e-6


# -- batch norm ------------------------------------------------------------

def test_bn_normalizes_in_train_mode():
    rng = make_rng(2)
    bn = BatchNorm2D("b", 3, dtype=np.float64)
    x = rng.normal(3.0, 2.0, size=(4, 3, 5, 6))
    y = bn.forward(x, train=True)
    assert np.max(np.abs(y.mean(axis=(0, 2, 3)))) < 1e-5
    assert np.max(np.abs(y.var(axis=(0, 2, 3)) - 1.0)) < 1e-4


def test_bn_constant_channel_gives_beta():
    bn = BatchNorm2D("b", 1, dtype=np.float64)
    bn.set_param("beta", np.array([0.7]))
    y = bn.forward(np.full((2, 1, 3, 3), 5.0), train=True)
    np.testing.assert_allclose(y, 0.7, atol=1e-8)


def test_bn_affine_law():
    rng = make_rng(3)
    bn = BatchNorm2D("b", 2, dtype=np.float64)
    bn.set_param("gamma", np.array([2.0, 2.0]))
    bn.set_param("beta", np.array([3.0, 3.0]))
    y = bn.forward(rng.normal(size=(8, 2, 4, 5)), train=True)
    assert np.max(np.abs(y.mean(axis=(0, 2, 3)) - 3.0)) < 1e-4
    assert np.max(np.abs(y.std(axis=(0, 2, 3)) - 2.0)) < 1e-4


def test_bn_eval_uses_running_stats():
    bn = BatchNorm2D("b", 1, dtype=np.float64)
    rng = make_rng(4)
    for _ in range(200):
        bn.forward(rng.normal(2.0, 1.0, size=(4, 1, 3, 3)), train=True)
    y = bn.forward(np.full((1, 1, 2, 2), 2.0), train=False)
    assert np.max(np.abs(y)) < 0.2


def test_bn_gradients():
    rng = make_rng(5)
    bn = BatchNorm2D("b", 3, dtype=np.float64)
    bn.set_param("gamma", rng.uniform(0.5, 1.5, size=3))
    bn.set_param("beta", rng.normal(size=3))
    x = rng.normal(size=(2, 3, 4, 5))
    w = rng.normal(size=(2, 3, 4, 5))
    assert fd_check(bn, x, w) < 1e-5


# -- max pool --------------------------------------------------------------

def test_maxpool_hand_case():
    pool = MaxPool2D("p", (2, 2))
    x = np.array([[[[1.0, 5.0], [3.0, 2.0]]]])
    np.testing.assert_array_equal(pool.forward(x), [[[[5.0]]]])


def test_maxpool_constant_map():
    pool = MaxPool2D("p", (2, 1))
    out = pool.forward(np.full((1, 2, 4, 6), 3.5))
    assert out.shape == (1, 2, 2, 6)
    assert np.all(out == 3.5)


def test_maxpool_full_scale_shape():
    pool = MaxPool2D("p", (8, 1))
    assert pool.forward(np.zeros((1, 1, 64, 500))).shape == (1, 1, 8, 500)


def test_maxpool_non_divisible():
    with pytest.raises(ValueError):
        MaxPool2D("p", (3, 1)).forward(np.zeros((1, 1, 4, 4)))


def test_maxpool_backward_routes_to_single_cell():
    pool = MaxPool2D("p", (2, 2))
    x = make_rng(6).normal(size=(1, 1, 4, 4))
    pool.forward(x)
    dx = pool.backward(np.ones((1, 1, 2, 2)))
    assert np.sum(dx != 0) == 4
    assert dx.sum() == 4.0


def test_maxpool_tie_breaks_to_lowest_flat_index():
    pool = MaxPool2D("p", (2, 2))
    x = np.full((1, 1, 2, 2), 1.0)
    pool.forward(x)
    dx = pool.backward(np.array([[[[1.0]]]]))
    assert dx[0, 0, 0, 0] == 1.0
    assert dx.sum() == 1.0


# -- dense -----------------------------------------------------------------

def test_dense_hand_case():
    fc = Dense("d", 2, 2, seed=0, dtype=np.float64)
    fc.set_param("w", np.array([[1.0, 2.0], [3.0, 4.0]]))
    fc.set_param("b", np.array([0.0, 1.0]))
    np.testing.assert_array_equal(fc.forward(np.array([1.0, 1.0])), [3.0, 8.0])


def test_dense_identity_backward():
    fc = Dense("d", 3, 3, seed=0, dtype=np.float64)
    fc.set_param("w", np.eye(3))
    x = make_rng(7).normal(size=(4, 3))
    fc.forward(x)
    g = make_rng(8).normal(size=(4, 3))
    np.testing.assert_allclose(fc.backward(g), g)


def test_dense_zero_grad_out():
    fc = Dense("d", 3, 2, seed=1, dtype=np.float64)
    fc.forward(make_rng(9).normal(size=(2, 3)))
    fc.zero_grads()
    dx = fc.backward(np.zeros((2, 2)))
    assert np.all(dx == 0)
    assert all(np.all(g == 0) for g in fc.grads().values())


def test_dense_gradients():
    rng = make_rng(10)
    fc = Dense("d", 5, 4, seed=2, dtype=np.float64)
    assert fd_check(fc, rng.normal(size=(3, 5)), rng.normal(size=(3, 4))) < 1e-6


# -- GRU -------------------------------------------------------------------

def _zeroed_gru(in_dim=2, hidden=3):
    gru = GruDirection("g", in_dim, hidden, seed=0, dtype=np.float64)
    for k in gru.params():
        gru.set_param(k.split("/", 1)[1], np.zeros_like(gru.params()[k]))
    return gru


def test_gru_all_zero_params_halves_state():
    gru = _zeroed_gru()
    h_prev = np.array([[0.4, -0.8, 0.2]])
    h, (g, r, c) = gru.step(np.zeros((1, 2)), h_prev)
    np.testing.assert_allclose(g, 0.5)
    np.testing.assert_allclose(r, 0.5)
    np.testing.assert_allclose(c, 0.0)
    np.testing.assert_allclose(h, 0.5 * h_prev)


def test_gru_saturated_update_gate():
    gru = _zeroed_gru()
    gru.set_param("update/b_in", np.full(3, 50.0))
    h, _ = gru.step(np.zeros((1, 2)), np.ones((1, 3)))
    assert np.max(np.abs(h)) < 1e-20


def scalar_gru_reference(seq, p, hidden):
    """Independent scalar-loop evaluation of the recurrence."""
    T, B, D = seq.shape
    hs = np.zeros((T, B, hidden))
    for b in range(B):
        h = np.zeros(hidden)
        for t in range(T):
            x = seq[t, b]
            g = np.empty(hidden)
            r = np.empty(hidden)
            c = np.empty(hidden)
            for j in range(hidden):
                ag = p["update/b_in"][j] + p["update/b_rec"][j]
                ar = p["reset/b_in"][j] + p["reset/b_rec"][j]
                for d in range(D):
                    ag += p["update/w"][j, d] * x[d]
                    ar += p["reset/w"][j, d] * x[d]
                for k in range(hidden):
                    ag += p["update/u"][j, k] * h[k]
                    ar += p["reset/u"][j, k] * h[k]
                g[j] = 1 / (1 + np.exp(-ag))
                r[j] = 1 / (1 + np.exp(-ar))
            for j in range(hidden):
                ac = p["cand/b_in"][j] + p["cand/b_rec"][j]
                for d in range(D):
                    ac += p["cand/w"][j, d] * x[d]
                for k in range(hidden):
                    ac += p["cand/u"][j, k] * (r[k] * h[k])
                c[j] = np.tanh(ac)
            h = (1 - g) * h + g * c
            hs[t, b] = h
    return hs


def test_gru_matches_scalar_reference():
    rng = make_rng(11)
    gru = GruDirection("g", 2, 2, seed=3, dtype=np.float64)
    seq = rng.normal(size=(5, 2, 2))
    got = gru.forward(seq)
    ref = scalar_gru_reference(seq, {k.split("/", 1)[1]: v for k, v in gru.params().items()}, 2)
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_gru_state_bound():
    rng = make_rng(12)
    gru = GruDirection("g", 3, 4, seed=4, dtype=np.float64)
    seq = rng.normal(0, 3, size=(20, 2, 3))
    hs = gru.forward(seq)
    assert np.max(np.abs(hs)) <= 1.0 + 1e-12


def test_gru_gradients():
    rng = make_rng(13)
    gru = GruDirection("g", 3, 4, seed=5, dtype=np.float64)
    seq = rng.normal(size=(6, 2, 3))
    w = rng.normal(size=(6, 2, 4))
    assert fd_check(gru, seq, w, probes=6) < 1e-5


def test_bigru_single_frame_is_concat_of_cells():
    gru = BiGru("bg", 3, 2, seed=6, dtype=np.float64)
    x = make_rng(14).normal(size=(1, 1, 3))
    out = gru.forward(x)
    hf, _ = gru.fwd.step(x[0], np.zeros((1, 2)))
    hb, _ = gru.bwd.step(x[0], np.zeros((1, 2)))
    np.testing.assert_allclose(out[0], np.concatenate([hf, hb], axis=-1))


def test_bigru_reversal_symmetry():
    rng = make_rng(15)
    gru = BiGru("bg", 3, 2, seed=7, dtype=np.float64)
    seq = rng.normal(size=(7, 1, 3))
    out = gru.forward(seq)

    swapped = BiGru("bg2", 3, 2, seed=99, dtype=np.float64)
    for k, v in gru.fwd.params().items():
        swapped.bwd.set_param("/".join(k.split("/")[-2:]), v)
    for k, v in gru.bwd.params().items():
        swapped.fwd.set_param("/".join(k.split("/")[-2:]), v)
    out_rev = swapped.forward(seq[::-1].copy())
    H = 2
    recon = np.concatenate([out_rev[::-1, :, H:], out_rev[::-1, :, :H]], axis=-1)
    np.testing.assert_allclose(out, recon, atol=1e-12)


def test_bigru_output_width():
    gru = BiGru("bg", 10, 32, seed=8)
    out = gru.forward(np.zeros((4, 1, 10), dtype=np.float32))
    assert out.shape == (4, 1, 64)


def test_bigru_empty_sequence():
    gru = BiGru("bg", 2, 2, seed=9)
    with pytest.raises(ValueError):
        gru.forward(np.zeros((0, 1, 2)))


def test_bigru_gradients():
    rng = make_rng(16)
    gru = BiGru("bg", 2, 3, seed=10, dtype=np.float64)
    seq = rng.normal(size=(5, 2, 2))
    w = rng.normal(size=(5, 2, 6))
    assert fd_check(gru, seq, w, probes=5) < 1e-5


# -- heads -----------------------------------------------------------------

def test_softmax_head_values():
    np.testing.assert_allclose(softmax(np.zeros(4)), 0.25)
    got = softmax(np.array([1.0, 2.0, 3.0, 4.0]))
    np.testing.assert_allclose(got, [0.0321, 0.0871, 0.2369, 0.6439], atol=1e-4)


def test_sigmoid_head_range():
    x = make_rng(17).normal(0, 10, size=100)
    y = sigmoid(x)
    assert np.all((y > 0) & (y < 1))

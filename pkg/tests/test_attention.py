import numpy as np
import pytest

from asyncmic import attention as A
from asyncmic.attention import KINDS, ChannelComm, MicTensor, ParamStore
from asyncmic.gradcheck import check_module


def _arr(x):
    return x.data if isinstance(x, MicTensor) else x


@pytest.mark.parametrize("name,kind", [("wca", "WindowedXAttn"), ("TAC", "TAC"), ("full", "FullXAttn"),
                                       ("frame", "FrameAttention")])
def test_module_kind_aliases(name, kind):
    assert A.module_kind(name) == kind


def test_unknown_kind():
    with pytest.raises(ValueError):
        ChannelComm("Mamba")


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("M", [1, 2, 5])
def test_shape_preserved(kind, M):
    rng = np.random.default_rng(0)
    mod = ChannelComm(kind, 2)
    p = mod.init_params(8, rng)
    Z = rng.standard_normal((M, 7, 8))
    out, _ = mod.forward(MicTensor(Z), p)
    assert isinstance(out, MicTensor) and out.shape == (M, 7, 8)
    out, _ = mod.forward(rng.standard_normal((3, M, 7, 8)), p)
    assert out.shape == (3, M, 7, 8)


def test_param_count_independent_of_mics():
    p = ChannelComm("WindowedXAttn").init_params(16, np.random.default_rng(0))
    assert sum(v.size for v in p.values()) == 4 * (16 * 16 + 16) + 32 * 16 + 16


def test_mictensor_validation():
    with pytest.raises(A.ShapeError):
        MicTensor(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        MicTensor(np.full((1, 2, 3), np.nan))


def test_bad_rank():
    mod = ChannelComm("TAC")
    p = mod.init_params(4, np.random.default_rng(0))
    with pytest.raises(A.ShapeError):
        mod.forward(np.zeros((2, 3, 4, 5, 4)), p)


@pytest.mark.parametrize("kind", KINDS)
def test_backward_requires_cache(kind):
    mod = ChannelComm(kind)
    p = mod.init_params(4, np.random.default_rng(0))
    with pytest.raises(A.CacheError):
        mod.backward(np.zeros((1, 2, 3, 4)), {}, p)


def test_tac_is_mean_of_projection():
    rng = np.random.default_rng(1)
    p = A.init_params("TAC", 4, rng)
    Z = rng.standard_normal((3, 5, 4))
    out, _ = A.tac_forward(Z, p)
    F = (Z @ p["P.W"] + p["P.b"]).mean(axis=0)
    PA = F @ p["A.W"] + p["A.b"]
    ref = np.concatenate([Z, np.broadcast_to(PA, Z.shape)], -1) @ p["C.W"] + p["C.b"]
    assert np.allclose(out, ref, atol=1e-12)


def naive_windowed(Z, p, L):
    """Loop oracle: per (m, n) softmax over |i - j| <= L, summed over n."""
    M, T, d = Z.shape
    Q, K, V = (Z @ p[n + ".W"] + p[n + ".b"] for n in "QKV")
    Aout = np.zeros_like(Z)
    for m in range(M):
        for i in range(T):
            for n in range(M):
                js = [j for j in range(T) if abs(i - j) <= L]
                s = np.array([Q[m, i] @ K[n, j] for j in js]) / np.sqrt(d)
                w = np.exp(s - s.max())
                w /= w.sum()
                Aout[m, i] += sum(wk * V[n, j] for wk, j in zip(w, js))
    PA = Aout @ p["A.W"] + p["A.b"]
    return np.concatenate([Z, PA], -1) @ p["C.W"] + p["C.b"]


@pytest.mark.parametrize("L", [0, 1, 3])
def test_windowed_matches_loop_oracle(L):
    rng = np.random.default_rng(2)
    p = A.init_params("WindowedXAttn", 4, rng)
    Z = rng.standard_normal((3, 9, 4))
    out, _ = A.windowed_xattn_forward(Z, p, L)
    assert np.max(np.abs(out - naive_windowed(Z, p, L))) < 1e-12


def test_windowed_l0_sums_values_over_mics():
    rng = np.random.default_rng(3)
    p = A.init_params("WindowedXAttn", 4, rng)
    Z = rng.standard_normal((2, 6, 4))
    _, cache = A.windowed_xattn_forward(Z, p, 0)
    Aout = cache["comb"][0]
    V = Z @ p["V.W"] + p["V.b"]
    assert np.allclose(Aout[0], V.sum(axis=0), atol=1e-12)


def test_windowed_equals_masked_full():
    rng = np.random.default_rng(4)
    for _ in range(20):
        M, T, d = rng.integers(1, 5), rng.integers(1, 33), rng.integers(1, 9)
        L = int(rng.integers(0, T + 1))
        p = A.init_params("WindowedXAttn", d, rng)
        Z = rng.standard_normal((M, T, d))
        w, _ = A.windowed_xattn_forward(Z, p, L)
        f, _ = A.full_xattn_forward(Z, p, A.band_mask(T, L))
        assert np.max(np.abs(w - f)) <= 1e-10


def test_windowed_wide_window_equals_full_with_gradients():
    rng = np.random.default_rng(5)
    T = 10
    p = A.init_params("WindowedXAttn", 6, rng)
    Z = rng.standard_normal((2, 3, T, 6))
    G = rng.standard_normal(Z.shape)
    f, fc = A.full_xattn_forward(Z, p)
    dzf, gf = A.full_xattn_backward(G, fc, p)
    for L in (T - 1, T + 3):
        w, wc = A.windowed_xattn_forward(Z, p, L)
        dzw, gw = A.windowed_xattn_backward(G, wc, p)
        assert np.max(np.abs(w - f)) <= 1e-8 and np.max(np.abs(dzw - dzf)) <= 1e-8
        assert all(np.max(np.abs(gw[k] - gf[k])) <= 1e-8 for k in gf)


def test_windowed_negative_window():
    with pytest.raises(ValueError):
        A.windowed_xattn_forward(np.zeros((1, 3, 2)), A.init_params("WindowedXAttn", 2,
                                                                   np.random.default_rng(0)), -1)


def test_windowed_boundary_probability_zero():
    rng = np.random.default_rng(6)
    p = A.init_params("WindowedXAttn", 4, rng)
    _, cache = A.windowed_xattn_forward(rng.standard_normal((2, 5, 4)), p, 2)
    P = cache["P"]                                                            # (B, T, M, N, W)
    assert np.all(P[:, 0, :, :, :2] == 0) and np.all(P[:, -1, :, :, -2:] == 0)
    assert np.allclose(P.sum(axis=-1), 1.0)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("M", [2, 3, 4])
def test_permutation_equivariance(kind, M):
    rng = np.random.default_rng(7 + M)
    mod = ChannelComm(kind, 2)
    p = mod.init_params(5, rng)
    Z = rng.standard_normal((M, 8, 5))
    perm = rng.permutation(M)
    out, _ = mod.forward(Z, p)
    out_p, _ = mod.forward(Z[perm], p)
    assert np.max(np.abs(out_p - out[perm])) <= 1e-10


@pytest.mark.parametrize("kind", KINDS)
def test_module_gradcheck(kind):
    errs = check_module(kind)
    assert max(errs.values()) < 1e-4, errs


def test_windowed_gradcheck_l0():
    assert max(check_module("WindowedXAttn", L=0).values()) < 1e-4


def test_attention_offsets_recover_shift():
    rng = np.random.default_rng(8)
    T, d, s = 24, 16, 2
    base = rng.standard_normal((T + s, d))
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    # mic 1 hears mic 0 delayed by s frames
    Z = np.stack([base[s:], base[:-s]])
    p = A.init_params("WindowedXAttn", d, rng)
    p["Q.W"] = p["K.W"] = 20.0 * np.eye(d)
    p["Q.b"] = p["K.b"] = np.zeros(d)
    for L, cache in ((4, A.windowed_xattn_forward(Z, p, 4)[1]), (None, A.full_xattn_forward(Z, p)[1])):
        off = A.attention_offsets(cache)[0]                                  # (M, N, T)
        interior = slice(6, T - 6)
        assert np.all(off[0, 1, interior] == s) and np.all(off[1, 0, interior] == -s)
        assert np.all(off[0, 0, interior] == 0)
    assert A.attention_offsets(A.tac_forward(Z, A.init_params("TAC", d, rng))[1]) is None


def test_param_store_round_trip(tmp_path):
    store = ParamStore().update(ChannelComm("WindowedXAttn", prefix="b0.").init_params(4, np.random.default_rng(0)))
    store.save(tmp_path / "p.bin", {"kind": "WindowedXAttn"})
    back, cfg = ParamStore.load(tmp_path / "p.bin")
    assert cfg == {"kind": "WindowedXAttn"} and back.names() == store.names()
    assert all(np.array_equal(back[k], store[k]) for k in store.names())
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        ParamStore.load(tmp_path / "bad.bin")


def test_gradient_accumulation_order_independent():
    rng = np.random.default_rng(9)
    mod = ChannelComm("WindowedXAttn", 2)
    p = mod.init_params(4, rng)
    grads = []
    for _ in range(4):
        _, cache = mod.forward(rng.standard_normal((3, 6, 4)), p)
        grads.append(mod.backward(rng.standard_normal((3, 6, 4)), cache, p)[1])
    a, b = ParamStore().update(p), ParamStore().update(p)
    for g in grads:
        a.accumulate(g)
    for g in reversed(grads):
        b.accumulate(g)
    assert all(np.max(np.abs(a.grads[k] - b.grads[k])) <= 1e-8 for k in p)
    with pytest.raises(A.ShapeError):
        a.accumulate({"Q.W": np.zeros(3)})


def test_prefix_isolation():
    rng = np.random.default_rng(10)
    m0, m1 = ChannelComm("TAC", prefix="a."), ChannelComm("TAC", prefix="b.")
    store = ParamStore().update(m0.init_params(4, rng)).update(m1.init_params(4, rng))
    Z = rng.standard_normal((2, 3, 4))
    _, cache = m0.forward(Z, store)
    _, g = m0.backward(np.ones_like(Z), cache, store)
    assert all(k.startswith("a.") for k in g)


def test_frame_attention_scripted_oracle():
    Z = np.array([[[1.0, 0.0], [0.5, -1.0], [0.0, 2.0]],
                  [[-1.0, 1.0], [2.0, 0.5], [1.0, 1.0]]])                 # M=2, T=3, d=2
    p = A.init_params("FrameAttention", 2, np.random.default_rng(11))
    out, cache = A.frame_attention_forward(Z, p)
    Q, K, V = (Z @ p[n + ".W"] + p[n + ".b"] for n in "QKV")
    for t in range(3):
        for m in range(2):
            s = np.array([Q[m, t] @ K[n, t] for n in range(2)]) / np.sqrt(2)
            w = np.exp(s) / np.exp(s).sum()
            a = w[0] * V[0, t] + w[1] * V[1, t]
            assert np.allclose(cache["comb"][0][0, m, t], a, atol=1e-10)


def test_unfold_time_slots():
    rng = np.random.default_rng(12)
    K = rng.standard_normal((2, 16, 3))
    Ku, valid = A.unfold_time(K, 4)
    for i in range(16):
        for w in range(9):
            j = i - 4 + w
            assert valid[i, w] == (0 <= j < 16)
            ref = K[:, j] if 0 <= j < 16 else np.zeros((2, 3))
            assert np.array_equal(Ku[:, i, w], ref)

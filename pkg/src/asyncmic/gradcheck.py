"""Central-difference gradient checks for the communication modules and the
end-to-end tiny model."""

from __future__ import annotations

import numpy as np

from .attention import KINDS, ChannelComm
from .model import Backbone, BackboneConfig, spectral_loss

# below this magnitude both gradients count as zero; finite differences of an
# exactly-zero gradient (e.g. key biases under softmax shift invariance) only
# carry rounding noise
REL_FLOOR = 1e-5


def rel_error(analytic, numeric, floor=REL_FLOOR):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``; returns the maximum."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den))


def numeric_grad(f, arr, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def check_module(kind, B=2, M=3, T=6, d=4, L=2, seed=0, eps=1e-5):
    """Max relative error over the input and every parameter of one module.

    The scalar objective is ``sum(out * G)`` for a fixed random ``G``.
    """
    rng = np.random.default_rng(seed)
    mod = ChannelComm(kind, L)
    p = mod.init_params(d, rng)
    Z = rng.standard_normal((B, M, T, d))
    G = rng.standard_normal((B, M, T, d))

    def f():
        return float(np.sum(mod.forward(Z, p)[0] * G))

    out, cache = mod.forward(Z, p)
    dZ, grads = mod.backward(G, cache, p)
    errs = {"input": rel_error(dZ, numeric_grad(f, Z, eps))}
    for k in p:
        errs[k] = rel_error(grads[k], numeric_grad(f, p[k], eps))
    return errs


def tiny_config(kind="WindowedXAttn"):
    # 800 Hz sampling gives a 16-sample window, FFT 16 and F = 9 bins
    return BackboneConfig(d_hidden=8, n_blocks=2, module_kind=kind, window_L=2, sample_rate_hz=800)


def check_model(kind="WindowedXAttn", M=2, T=8, seed=0, eps=1e-5):
    """End-to-end check of the tiny backbone (M=2, T=8, F=9, d=8).

    Gradients are taken w.r.t. the compressed input features and every parameter.
    """
    rng = np.random.default_rng(seed)
    model = Backbone(tiny_config(kind))
    p = model.init_params(rng).values
    win, hop, _ = model.config.frame_params()
    n = (T - 1) * hop + win
    X = rng.standard_normal((1, M, n))
    y = rng.standard_normal((1, n))
    feat = model.features(X)
    tgt = model.compressed(y)

    def f():
        return spectral_loss(model.forward_features(feat, p)[0], tgt)[0]

    spec, cache = model.forward_features(feat, p)
    _, dspec = spectral_loss(spec, tgt)
    grads, dfeat = model.backward(dspec, cache, p)
    errs = {"input": rel_error(dfeat, numeric_grad(f, feat, eps))}
    for k in p:
        errs[k] = rel_error(grads[k], numeric_grad(f, p[k], eps))
    return errs


def run_all(seed=0):
    """Max relative error per module, plus the end-to-end model."""
    out = {k: max(check_module(k, seed=seed).values()) for k in KINDS}
    out["WindowedXAttn(L=0)"] = max(check_module("WindowedXAttn", L=0, seed=seed).values())
    out["end_to_end"] = max(check_model(seed=seed).values())
    return out

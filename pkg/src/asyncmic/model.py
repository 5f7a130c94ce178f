"""Minimal encoder / recurrent bottleneck / decoder with a pluggable
channel-communication module.

Every channel is processed with shared weights; the decoded per-channel
complex compressed spectra are summed to form the single output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numba import njit

from . import dsp
from .attention import ChannelComm, ParamStore, init_linear, module_kind


@dataclass
class BackboneConfig:
    d_hidden: int = 64
    n_blocks: int = 2
    module_kind: str = "WindowedXAttn"
    window_L: int = 4
    compression_c: float = 0.3
    loss_lambda: float = 0.3
    sample_rate_hz: int = dsp.DEFAULT_FS
    win_len_s: float = dsp.WIN_LEN_S
    hop_len_s: float = dsp.HOP_LEN_S

    def __post_init__(self):
        self.module_kind = module_kind(self.module_kind)
        if self.d_hidden < 8:
            raise ValueError("d_hidden must be >= 8")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.window_L < 0:
            raise ValueError("window_L must be >= 0")
        if not 0 < self.compression_c <= 1:
            raise ValueError("compression_c must lie in (0, 1]")

    @property
    def n_bins(self):
        return self.frame_params()[2] // 2 + 1

    def frame_params(self):
        return dsp.frame_params(self.sample_rate_hz, self.win_len_s, self.hop_len_s)

    def to_dict(self):
        return asdict(self)


def interleave(Sc, dtype=np.float64):
    """Complex ``(..., F)`` -> real ``(..., 2F)`` with re/im interleaved."""
    out = np.empty(Sc.shape[:-1] + (2 * Sc.shape[-1],), dtype=dtype)
    out[..., 0::2] = Sc.real
    out[..., 1::2] = Sc.imag
    return out


# ---------------------------------------------------------------------------
# GRU


# scalar libm tanh is slow inside numba; exp-based gates are about 3x faster
_FAST = {"nsz", "arcp", "contract", "afn", "reassoc"}


@njit(cache=True, fastmath=_FAST)
def _gru_scan(gx, Wh, bh, H, r_all, z_all, n_all, ghn_all):
    T, R, _ = gx.shape
    d = Wh.shape[0]
    one = gx.dtype.type(1.0)
    two = gx.dtype.type(2.0)
    for t in range(T):
        gh = np.dot(H[t], Wh)
        for i in range(R):
            for k in range(d):
                ar = gx[t, i, k] + gh[i, k] + bh[k]
                az = gx[t, i, d + k] + gh[i, d + k] + bh[d + k]
                ghn = gh[i, 2 * d + k] + bh[2 * d + k]
                r = one / (one + np.exp(-ar))
                z = one / (one + np.exp(-az))
                n = one - two / (np.exp(two * (gx[t, i, 2 * d + k] + r * ghn)) + one)
                H[t + 1, i, k] = n + z * (H[t, i, k] - n)
                r_all[t, i, k] = r
                z_all[t, i, k] = z
                n_all[t, i, k] = n
                ghn_all[t, i, k] = ghn


@njit(cache=True, fastmath=_FAST)
def _gru_scan_back(dH, H, r_all, z_all, n_all, ghn_all, WhT, dgx, dgh):
    T, R, d = dH.shape
    one = dH.dtype.type(1.0)
    dh_next = np.zeros((R, d), dtype=dH.dtype)
    dh = np.empty((R, d), dtype=dH.dtype)
    for t in range(T - 1, -1, -1):
        for i in range(R):
            for k in range(d):
                g = dH[t, i, k] + dh_next[i, k]
                r, z, n = r_all[t, i, k], z_all[t, i, k], n_all[t, i, k]
                dan = g * (one - z) * (one - n * n)
                dar = dan * ghn_all[t, i, k] * r * (one - r)
                daz = g * (H[t, i, k] - n) * z * (one - z)
                dgx[t, i, k] = dar
                dgx[t, i, d + k] = daz
                dgx[t, i, 2 * d + k] = dan
                dgh[t, i, k] = dar
                dgh[t, i, d + k] = daz
                dgh[t, i, 2 * d + k] = dan * r
                dh[i, k] = g * z
        dh_next = dh + np.dot(dgh[t], WhT)


def gru_forward(X, p, prefix):
    """Causal GRU over axis 1 of ``X`` (R, T, d_in), zero initial state.

    Gate layout follows the usual (reset, update, new) convention with the
    reset gate applied to the recurrent part of the candidate.
    """
    Wx, bx = p[prefix + "Wx"], p[prefix + "bx"]
    Wh, bh = p[prefix + "Wh"], p[prefix + "bh"]
    R, T, _ = X.shape
    d = Wh.shape[0]
    gx = np.ascontiguousarray((X @ Wx + bx).transpose(1, 0, 2))  # time-major
    dt = gx.dtype
    Wh = np.ascontiguousarray(Wh, dtype=dt)
    H = np.zeros((T + 1, R, d), dtype=dt)
    gates = [np.empty((T, R, d), dtype=dt) for _ in range(4)]
    _gru_scan(gx, Wh, np.asarray(bh, dtype=dt), H, *gates)
    cache = (X, H, *gates)
    return H[1:].transpose(1, 0, 2), cache


def gru_backward(dH, cache, p, prefix):
    X, H, r_all, z_all, n_all, ghn_all = cache
    Wx, Wh = p[prefix + "Wx"], p[prefix + "Wh"]
    R, T, d = dH.shape
    dt = H.dtype
    dHt = np.ascontiguousarray(dH.transpose(1, 0, 2), dtype=dt)
    dgx = np.empty((T, R, 3 * d), dtype=dt)
    dgh = np.empty((T, R, 3 * d), dtype=dt)
    _gru_scan_back(dHt, H, r_all, z_all, n_all, ghn_all,
                   np.ascontiguousarray(Wh.T, dtype=dt), dgx, dgh)
    dgx = dgx.transpose(1, 0, 2)
    grads = {
        prefix + "Wx": X.reshape(-1, X.shape[-1]).T @ dgx.reshape(-1, 3 * d),
        prefix + "bx": dgx.sum(axis=(0, 1)),
        prefix + "Wh": H[:-1].reshape(-1, d).T @ dgh.reshape(-1, 3 * d),
        prefix + "bh": dgh.sum(axis=(0, 1)),
    }
    return dgx @ Wx.T, grads


# ---------------------------------------------------------------------------
# loss


def spectral_loss(pred_c, target_c, lam=0.3):
    """Blend of complex and magnitude squared errors on compressed spectra.

    Returns ``(loss, grad)`` where ``grad = dL/dRe + 1j * dL/dIm`` of ``pred_c``.
    The mean is over every element (batch, frames and bins).
    """
    pred_c = np.asarray(pred_c)
    target_c = np.asarray(target_c)
    if pred_c.shape != target_c.shape:
        raise ValueError(f"shape mismatch: {pred_c.shape} vs {target_c.shape}")
    n = pred_c.size
    diff = pred_c - target_c
    mp, mt = np.abs(pred_c), np.abs(target_c)
    loss = (lam * np.sum(np.abs(diff) ** 2) + (1 - lam) * np.sum((mp - mt) ** 2)) / n
    unit = np.zeros_like(pred_c)
    nz = mp > 0
    unit[nz] = pred_c[nz] / mp[nz]
    grad = (2 * lam * diff + 2 * (1 - lam) * (mp - mt) * unit) / n
    return float(loss), grad


# ---------------------------------------------------------------------------
# backbone


class Backbone:
    """Encoder -> ``n_blocks`` x (GRU -> comm module) -> decoder, summed over mics."""

    def __init__(self, config=None):
        self.config = config or BackboneConfig()
        c = self.config
        self.comms = [ChannelComm(c.module_kind, c.window_L, prefix=f"block{i}.comm.")
                      for i in range(c.n_blocks)]

    # parameters ---------------------------------------------------------

    def init_params(self, rng):
        c = self.config
        d, F2 = c.d_hidden, 2 * c.n_bins
        store = ParamStore()
        enc = init_linear(rng, F2, d)
        store.add("enc.W", enc["W"])
        store.add("enc.b", enc["b"])
        for i, comm in enumerate(self.comms):
            gx = init_linear(rng, d, 3 * d)
            gh = init_linear(rng, d, 3 * d)
            store.add(f"block{i}.gru.Wx", gx["W"])
            store.add(f"block{i}.gru.bx", gx["b"])
            store.add(f"block{i}.gru.Wh", gh["W"])
            store.add(f"block{i}.gru.bh", gh["b"])
            store.update(comm.init_params(d, rng))
        dec = init_linear(rng, d, F2)
        store.add("dec.W", dec["W"])
        store.add("dec.b", dec["b"])
        return store

    # signal <-> features -------------------------------------------------

    def spectrum(self, x):
        c = self.config
        return dsp.stft(x, c.sample_rate_hz, c.win_len_s, c.hop_len_s)

    def compressed(self, x):
        return dsp.compress(self.spectrum(x), self.config.compression_c).data

    def features(self, X, dtype=np.float64):
        """Compressed STFT of every channel, re/im interleaved: ``(..., M, T, 2F)``."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim < 2:
            raise ValueError("expected (M, N) or (B, M, N) waveforms")
        return interleave(self.compressed(X), dtype)

    # forward / backward --------------------------------------------------

    def encode(self, X, params):
        """Waveforms ``(M, N)`` or ``(B, M, N)`` -> hidden ``(..., M, T, d)``."""
        return self.features(X) @ params["enc.W"] + params["enc.b"]

    def bottleneck(self, Z, params, caches=None):
        single = Z.ndim == 3
        if single:
            Z = Z[None]
        B, M, T, d = Z.shape
        for i, comm in enumerate(self.comms):
            H, gcache = gru_forward(Z.reshape(B * M, T, d), params, f"block{i}.gru.")
            Z, ccache = comm.forward(H.reshape(B, M, T, d), params)
            if caches is not None:
                caches.append((gcache, ccache))
        return Z[0] if single else Z

    def decode(self, Zh, params):
        """Hidden ``(..., M, T, d)`` -> complex compressed spectra ``(..., M, T, F)``."""
        Y = Zh @ params["dec.W"] + params["dec.b"]
        return Y[..., 0::2] + 1j * Y[..., 1::2]

    def forward_features(self, feat, params):
        """Features ``(B, M, T, 2F)`` -> summed compressed spectrum ``(B, T, F)`` and cache."""
        Z = feat @ params["enc.W"] + params["enc.b"]
        caches = []
        Zh = self.bottleneck(Z, params, caches)
        M = feat.shape[-3]
        # the decoder is linear, so summing the hidden states first gives the
        # same result as summing the M decoded spectra
        Zs = Zh.sum(axis=-3)
        Y = Zs @ params["dec.W"] + M * params["dec.b"]
        cache = {"feat": feat, "Zs": Zs, "shape": Zh.shape, "blocks": caches}
        return Y[..., 0::2] + 1j * Y[..., 1::2], cache

    def backward(self, dspec, cache, params, input_grad=True):
        """Gradient of the loss w.r.t. every parameter (and the input features).

        ``dspec`` is ``dL/dRe + 1j dL/dIm`` of the summed spectrum. Returns
        ``(grads, dfeat)``; ``dfeat`` is None when ``input_grad`` is False.
        """
        grads = {}
        feat, Zs = cache["feat"], cache["Zs"]
        B, M, T, d = cache["shape"]
        dY = interleave(dspec, feat.dtype)
        grads["dec.W"] = Zs.reshape(-1, d).T @ dY.reshape(-1, dY.shape[-1])
        grads["dec.b"] = M * dY.sum(axis=(0, 1))
        dZ = np.broadcast_to((dY @ params["dec.W"].T)[:, None], (B, M, T, d))
        for i in range(len(self.comms) - 1, -1, -1):
            gcache, ccache = cache["blocks"][i]
            dH, g = self.comms[i].backward(dZ, ccache, params)
            grads.update(g)
            dX, g = gru_backward(dH.reshape(B * M, T, d), gcache, params, f"block{i}.gru.")
            grads.update(g)
            dZ = dX.reshape(B, M, T, d)
        grads["enc.W"] = feat.reshape(-1, feat.shape[-1]).T @ dZ.reshape(-1, d)
        grads["enc.b"] = dZ.sum(axis=(0, 1, 2))
        dfeat = dZ @ params["enc.W"].T if input_grad else None
        return grads, dfeat

    def loss(self, spec_c, y):
        """Training loss of a summed compressed spectrum against target waveform(s)."""
        return spectral_loss(spec_c, self.compressed(y), self.config.loss_lambda)

    def synthesize(self, spec_c):
        """Decompress a summed spectrum and overlap-add back to a waveform."""
        c = self.config
        S = dsp.decompress(spec_c, c.compression_c)
        return dsp.istft(dsp.Spectrogram(S, c.sample_rate_hz, c.win_len_s, c.hop_len_s))

    def forward(self, X, params):
        """Waveforms ``(M, N)`` or ``(B, M, N)`` -> enhanced waveform(s)."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 2
        feat = self.features(X[None] if single else X)
        spec, _ = self.forward_features(feat, params)
        y = self.synthesize(spec)
        return y[0] if single else y

    def attention_cache(self, cache, block=0):
        return cache["blocks"][block][1]

"""Channel-communication modules with hand-derived backward passes.

All modules map a mic tensor of shape ``(B, M, T, d)`` (or ``(M, T, d)``)
to the same shape and share one parameter layout per kind, independent of
the number of microphones ``M``:

* ``TAC``            per-frame mean over mics of a projection
* ``FrameAttention`` softmax attention across mics at the same frame index
* ``FullXAttn``      cross-attention from every frame of mic ``m`` to all
                     frames of every mic ``n`` (one softmax per ``(m, n)``)
* ``WindowedXAttn``  the same restricted to frames ``i - L .. i + L``

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns ``(dZ, grads)``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from numpy.lib.stride_tricks import sliding_window_view

KINDS = ("TAC", "FrameAttention", "FullXAttn", "WindowedXAttn")
_ALIASES = {"tac": "TAC", "frame": "FrameAttention", "frameattention": "FrameAttention",
            "full": "FullXAttn", "fullxattn": "FullXAttn", "wca": "WindowedXAttn",
            "windowed": "WindowedXAttn", "windowedxattn": "WindowedXAttn"}


class ShapeError(ValueError):
    pass


class CacheError(RuntimeError):
    pass


def module_kind(name):
    """Normalise a module name (``"wca"``, ``"TAC"``, ...) to its canonical tag."""
    if name in KINDS:
        return name
    try:
        return _ALIASES[str(name).lower()]
    except KeyError:
        raise ValueError(f"unknown module kind {name!r}; expected one of {KINDS}") from None


@dataclass
class MicTensor:
    """Hidden representation of all microphones, ``data`` is ``M x T x d``."""

    data: np.ndarray
    frame_hop_s: float = 0.010
    mic_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeError(f"MicTensor needs a non-empty M x T x d array, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("MicTensor contains non-finite entries")
        if not self.mic_ids:
            self.mic_ids = list(range(self.data.shape[0]))

    @property
    def shape(self):
        return self.data.shape


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Flat named weights with paired gradient buffers."""

    def __init__(self):
        self.values = {}
        self.grads = {}

    def add(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def update(self, params):
        for k, v in params.items():
            self.add(k, v)
        return self

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, grads, prefix=""):
        for k, g in grads.items():
            name = prefix + k
            if self.grads[name].shape != np.shape(g):
                raise ShapeError(f"gradient for {name} has shape {np.shape(g)}, "
                                 f"expected {self.grads[name].shape}")
            self.grads[name] += g

    def view(self, prefix):
        n = len(prefix)
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix)}

    def names(self):
        return list(self.values)

    def n_params(self):
        return sum(v.size for v in self.values.values())

    def copy(self):
        other = ParamStore()
        for k, v in self.values.items():
            other.add(k, v.copy())
        return other

    def __len__(self):
        return len(self.values)

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    # checkpoint format: b"ASMC" | u32 version | u32 header length | JSON header
    # | raw little-endian float64 arrays at the offsets listed in the header

    MAGIC = b"ASMC"
    VERSION = 1

    def save(self, path, config=None):
        entries, offset = [], 0
        for name, v in self.values.items():
            entries.append({"name": name, "shape": list(v.shape), "offset": offset})
            offset += v.size * 8
        header = json.dumps({"version": self.VERSION, "dtype": "<f8",
                             "params": entries, "config": config or {}}).encode()
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack("<II", self.VERSION, len(header)))
            fh.write(header)
            for v in self.values.values():
                fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        """Return ``(store, config)`` from a checkpoint written by :meth:`save`."""
        raw = Path(path).read_bytes()
        if raw[:4] != cls.MAGIC:
            raise ValueError(f"{path} is not a parameter checkpoint")
        version, hlen = struct.unpack("<II", raw[4:12])
        if version != cls.VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(raw[12:12 + hlen])
        body = raw[12 + hlen:]
        store = cls()
        for e in header["params"]:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            arr = np.frombuffer(body, dtype="<f8", count=n, offset=e["offset"])
            store.add(e["name"], arr.reshape(e["shape"]).copy())
        return store, header.get("config", {})


def init_linear(rng, fan_in, fan_out):
    bound = np.sqrt(1.0 / fan_in)
    return {"W": rng.uniform(-bound, bound, (fan_in, fan_out)),
            "b": rng.uniform(-bound, bound, fan_out)}


def init_params(kind, d, rng):
    """Initial weights for a module kind, keyed ``"<layer>.W"`` / ``"<layer>.b"``."""
    kind = module_kind(kind)
    layers = ["P", "A"] if kind == "TAC" else ["Q", "K", "V", "A"]
    params = {}
    for name in layers:
        for k, v in init_linear(rng, d, d).items():
            params[f"{name}.{k}"] = v
    for k, v in init_linear(rng, 2 * d, d).items():
        params[f"C.{k}"] = v
    return params


# ---------------------------------------------------------------------------
# helpers


def _lin(x, p, name):
    return x @ p[name + ".W"] + p[name + ".b"]


def _lin_back(dy, x, p, name, grads):
    d = dy.shape[-1]
    grads[name + ".W"] = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, d)
    grads[name + ".b"] = dy.reshape(-1, d).sum(axis=0)
    return dy @ p[name + ".W"].T


def _as_batch(Z, p):
    data = Z.data if isinstance(Z, MicTensor) else np.asarray(Z)
    if not np.issubdtype(data.dtype, np.floating):
        data = data.astype(np.float64)
    squeeze = data.ndim == 3
    if squeeze:
        data = data[None]
    if data.ndim != 4:
        raise ShapeError(f"expected (M, T, d) or (B, M, T, d), got {data.shape}")
    d = data.shape[-1]
    W = p["C.W"] if "C.W" in p else None
    if W is None or W.shape != (2 * d, d):
        raise ShapeError(f"parameters do not match hidden size d={d}")
    return data, squeeze


def _wrap(out, Z, squeeze):
    out = out[0] if squeeze else out
    if isinstance(Z, MicTensor):
        return MicTensor(out, Z.frame_hop_s, list(Z.mic_ids))
    return out


def _softmax(logits, axis=-1):
    m = np.max(logits, axis=axis, keepdims=True)
    e = np.exp(logits - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def _softmax_back(dP, P, axis=-1):
    return P * (dP - np.sum(dP * P, axis=axis, keepdims=True))


def _combine(Z, A, p):
    PA = _lin(A, p, "A")
    cat = np.concatenate([Z, PA], axis=-1)
    return _lin(cat, p, "C"), (A, cat)


def _combine_back(dout, Z, cache, p, grads):
    A, cat = cache
    dcat = _lin_back(dout, cat, p, "C", grads)
    d = Z.shape[-1]
    dZ = dcat[..., :d]
    dA = _lin_back(dcat[..., d:], A, p, "A", grads)
    return dZ, dA


def _check_cache(cache, kind):
    if not cache or cache.get("kind") != kind:
        raise CacheError(f"backward for {kind} called without a matching forward cache")


# ---------------------------------------------------------------------------
# TAC


def tac_forward(Z, params):
    data, squeeze = _as_batch(Z, params)
    F = _lin(data, params, "P")
    Abar = np.broadcast_to(F.mean(axis=1, keepdims=True), data.shape)
    out, ccache = _combine(data, Abar, params)
    cache = {"kind": "TAC", "Z": data, "comb": ccache, "squeeze": squeeze}
    return _wrap(out, Z, squeeze), cache


def tac_backward(dout, cache, params):
    _check_cache(cache, "TAC")
    Z = cache["Z"]
    dout = np.asarray(dout.data if isinstance(dout, MicTensor) else dout)
    if cache["squeeze"]:
        dout = dout[None]
    grads = {}
    dZ, dA = _combine_back(dout, Z, cache["comb"], params, grads)
    M = Z.shape[1]
    dF = np.broadcast_to(dA.sum(axis=1, keepdims=True) / M, Z.shape)
    dZ = dZ + _lin_back(dF, Z, params, "P", grads)
    return (dZ[0] if cache["squeeze"] else dZ), grads


# ---------------------------------------------------------------------------
# per-frame attention across mics


def frame_attention_forward(Z, params):
    data, squeeze = _as_batch(Z, params)
    d = data.shape[-1]
    Q, K, V = (_lin(data, params, n).transpose(0, 2, 1, 3) for n in "QKV")   # (B, T, M, d)
    P = _softmax(Q @ K.transpose(0, 1, 3, 2) / math.sqrt(d))                   # (B, T, M, N)
    A = (P @ V).transpose(0, 2, 1, 3)
    out, ccache = _combine(data, A, params)
    cache = {"kind": "FrameAttention", "Z": data, "Q": Q, "K": K, "V": V, "P": P,
             "comb": ccache, "squeeze": squeeze}
    return _wrap(out, Z, squeeze), cache


def frame_attention_backward(dout, cache, params):
    _check_cache(cache, "FrameAttention")
    Z, Q, K, V, P = (cache[k] for k in ("Z", "Q", "K", "V", "P"))
    dout = np.asarray(dout.data if isinstance(dout, MicTensor) else dout)
    if cache["squeeze"]:
        dout = dout[None]
    d = Z.shape[-1]
    grads = {}
    dZ, dA = _combine_back(dout, Z, cache["comb"], params, grads)
    dA = dA.transpose(0, 2, 1, 3)
    dP = dA @ V.transpose(0, 1, 3, 2)
    dV = P.transpose(0, 1, 3, 2) @ dA
    dS = _softmax_back(dP, P) / math.sqrt(d)
    dQ = dS @ K
    dK = dS.transpose(0, 1, 3, 2) @ Q
    for name, g in (("Q", dQ), ("K", dK), ("V", dV)):
        dZ = dZ + _lin_back(g.transpose(0, 2, 1, 3), Z, params, name, grads)
    return (dZ[0] if cache["squeeze"] else dZ), grads


# ---------------------------------------------------------------------------
# full temporal cross-attention


def band_mask(T, L):
    """``mask[i, j]`` is True where ``|i - j| <= L``."""
    i = np.arange(T)
    return np.abs(i[:, None] - i[None, :]) <= L


def full_xattn_forward(Z, params, mask=None):
    """Cross-attention over all frames; ``mask`` (T, T) optionally restricts keys."""
    data, squeeze = _as_batch(Z, params)
    d = data.shape[-1]
    Q, K, V = (_lin(data, params, n) for n in "QKV")                        # (B, M, T, d)
    S = Q[:, :, None] @ K[:, None].transpose(0, 1, 2, 4, 3) / math.sqrt(d)   # (B, M, N, T, T)
    if mask is not None:
        S = np.where(mask, S, -np.inf)
    P = _softmax(S)
    A = (P @ V[:, None]).sum(axis=2)
    out, ccache = _combine(data, A, params)
    cache = {"kind": "FullXAttn", "Z": data, "Q": Q, "K": K, "V": V, "P": P,
             "comb": ccache, "squeeze": squeeze}
    return _wrap(out, Z, squeeze), cache


def full_xattn_backward(dout, cache, params):
    _check_cache(cache, "FullXAttn")
    Z, Q, K, V, P = (cache[k] for k in ("Z", "Q", "K", "V", "P"))
    dout = np.asarray(dout.data if isinstance(dout, MicTensor) else dout)
    if cache["squeeze"]:
        dout = dout[None]
    d = Z.shape[-1]
    grads = {}
    dZ, dA = _combine_back(dout, Z, cache["comb"], params, grads)
    dP = dA[:, :, None] @ V[:, None].transpose(0, 1, 2, 4, 3)              # (B, M, N, T, T)
    dV = (P.transpose(0, 1, 2, 4, 3) @ dA[:, :, None]).sum(axis=1)
    dS = _softmax_back(dP, P) / math.sqrt(d)
    dQ = (dS @ K[:, None]).sum(axis=2)
    dK = (dS.transpose(0, 1, 2, 4, 3) @ Q[:, :, None]).sum(axis=1)
    for name, g in (("Q", dQ), ("K", dK), ("V", dV)):
        dZ = dZ + _lin_back(g, Z, params, name, grads)
    return (dZ[0] if cache["squeeze"] else dZ), grads


# ---------------------------------------------------------------------------
# windowed cross-attention


def unfold_time(K, L):
    """Local windows of ``K`` along time.

    ``K`` has time on axis ``-2``. Returns ``(Ku, valid)`` with ``Ku[..., i, w, :]
    = K[..., i - L + w, :]`` (zero outside the sequence) and ``valid`` the
    ``(T, 2L + 1)`` boolean mask of in-range slots.
    """
    if L < 0:
        raise ValueError("window L must be >= 0")
    K = np.asarray(K)
    T = K.shape[-2]
    pad = [(0, 0)] * K.ndim
    pad[-2] = (L, L)
    Kp = np.pad(K, pad)
    Ku = np.swapaxes(sliding_window_view(Kp, 2 * L + 1, axis=-2), -1, -2)
    j = np.arange(T)[:, None] - L + np.arange(2 * L + 1)[None, :]
    valid = (j >= 0) & (j < T)
    return Ku, valid


# no nnan/ninf: padded logits rely on IEEE semantics
_FAST = {"nsz", "arcp", "contract", "reassoc"}


@njit(cache=True, fastmath=_FAST)
def _window_attend(Q, Kp, Vp, L, scale, P, A):
    # Q (B, T, M, d); Kp, Vp (B, T + 2L, M, d); P (B, T, M, N, W); A (B, T, M, d)
    B, T, M, d = Q.shape
    W = 2 * L + 1
    for b in range(B):
        for t in range(T):
            lo = max(0, L - t)
            hi = min(W, T + L - t)
            for m in range(M):
                for n in range(M):
                    mx = -np.inf
                    for w in range(lo, hi):
                        s = 0.0
                        for k in range(d):
                            s += Q[b, t, m, k] * Kp[b, t + w, n, k]
                        s *= scale
                        P[b, t, m, n, w] = s
                        if s > mx:
                            mx = s
                    tot = 0.0
                    for w in range(lo, hi):
                        e = np.exp(P[b, t, m, n, w] - mx)
                        P[b, t, m, n, w] = e
                        tot += e
                    for w in range(lo, hi):
                        pw = P[b, t, m, n, w] / tot
                        P[b, t, m, n, w] = pw
                        for k in range(d):
                            A[b, t, m, k] += pw * Vp[b, t + w, n, k]


@njit(cache=True, fastmath=_FAST)
def _window_attend_back(dA, Q, Kp, Vp, P, L, scale, dQ, dKp, dVp):
    B, T, M, d = Q.shape
    W = 2 * L + 1
    dp = np.empty(W, dtype=Q.dtype)
    for b in range(B):
        for t in range(T):
            lo = max(0, L - t)
            hi = min(W, T + L - t)
            for m in range(M):
                for n in range(M):
                    dot = 0.0
                    for w in range(lo, hi):
                        pw = P[b, t, m, n, w]
                        g = 0.0
                        for k in range(d):
                            g += dA[b, t, m, k] * Vp[b, t + w, n, k]
                            dVp[b, t + w, n, k] += pw * dA[b, t, m, k]
                        dp[w] = g
                        dot += pw * g
                    for w in range(lo, hi):
                        ds = P[b, t, m, n, w] * (dp[w] - dot) * scale
                        for k in range(d):
                            dQ[b, t, m, k] += ds * Kp[b, t + w, n, k]
                            dKp[b, t + w, n, k] += ds * Q[b, t, m, k]


def windowed_xattn_forward(Z, params, L):
    """Cross-attention from frame ``i`` of each mic to frames ``i-L..i+L`` of every mic.

    Slots outside the sequence are skipped, so boundary rows renormalise over
    the frames that exist (their probability is exactly 0). Intermediates are
    ``O(M^2 T (2L+1))``; the kernel reads key and value windows in place.
    """
    if L < 0:
        raise ValueError("window L must be >= 0")
    data, squeeze = _as_batch(Z, params)
    B, M, T, d = data.shape
    Q, K, V = (np.ascontiguousarray(_lin(data, params, n).transpose(0, 2, 1, 3))
               for n in "QKV")                                               # (B, T, M, d)
    pad = ((0, 0), (L, L), (0, 0), (0, 0))
    Kp, Vp = np.pad(K, pad), np.pad(V, pad)
    P = np.zeros((B, T, M, M, 2 * L + 1), dtype=Q.dtype)
    A = np.zeros_like(Q)
    _window_attend(Q, Kp, Vp, L, 1.0 / math.sqrt(d), P, A)
    out, ccache = _combine(data, A.transpose(0, 2, 1, 3), params)
    cache = {"kind": "WindowedXAttn", "Z": data, "L": L, "Q": Q, "Kp": Kp, "Vp": Vp,
             "P": P, "comb": ccache, "squeeze": squeeze}
    return _wrap(out, Z, squeeze), cache


def windowed_xattn_backward(dout, cache, params):
    _check_cache(cache, "WindowedXAttn")
    Z, L, Q, Kp, Vp, P = (cache[k] for k in ("Z", "L", "Q", "Kp", "Vp", "P"))
    dout = np.asarray(dout.data if isinstance(dout, MicTensor) else dout)
    if cache["squeeze"]:
        dout = dout[None]
    B, M, T, d = Z.shape
    grads = {}
    dZ, dA = _combine_back(dout, Z, cache["comb"], params, grads)
    dA = np.ascontiguousarray(dA.transpose(0, 2, 1, 3), dtype=Q.dtype)      # (B, T, M, d)
    dQ = np.zeros_like(Q)
    dKp = np.zeros_like(Kp)
    dVp = np.zeros_like(Vp)
    _window_attend_back(dA, Q, Kp, Vp, P, L, 1.0 / math.sqrt(d), dQ, dKp, dVp)
    dK, dV = dKp[:, L:L + T], dVp[:, L:L + T]
    for name, g in (("Q", dQ), ("K", dK), ("V", dV)):
        dZ = dZ + _lin_back(g.transpose(0, 2, 1, 3), Z, params, name, grads)
    return (dZ[0] if cache["squeeze"] else dZ), grads


# ---------------------------------------------------------------------------
# uniform interface


class ChannelComm:
    """One communication module bound to a kind, window and parameter prefix."""

    def __init__(self, kind, window_L=4, prefix=""):
        self.kind = module_kind(kind)
        self.window_L = window_L
        self.prefix = prefix

    def init_params(self, d, rng):
        return {self.prefix + k: v for k, v in init_params(self.kind, d, rng).items()}

    def _params(self, params):
        if isinstance(params, ParamStore):
            return params.view(self.prefix)
        n = len(self.prefix)
        return {k[n:]: v for k, v in params.items() if k.startswith(self.prefix)}

    def forward(self, Z, params):
        p = self._params(params)
        if self.kind == "TAC":
            return tac_forward(Z, p)
        if self.kind == "FrameAttention":
            return frame_attention_forward(Z, p)
        if self.kind == "FullXAttn":
            return full_xattn_forward(Z, p)
        return windowed_xattn_forward(Z, p, self.window_L)

    def backward(self, dout, cache, params):
        p = self._params(params)
        fn = {"TAC": tac_backward, "FrameAttention": frame_attention_backward,
              "FullXAttn": full_xattn_backward, "WindowedXAttn": windowed_xattn_backward}
        dZ, grads = fn[self.kind](dout, cache, p)
        return dZ, {self.prefix + k: v for k, v in grads.items()}


def attention_offsets(cache):
    """Argmax key offset ``j - i`` of each query frame, shape ``(B, M, N, T)``.

    Only defined for the temporal cross-attention kinds; returns None otherwise.
    """
    kind = cache.get("kind")
    if kind == "WindowedXAttn":
        # P: (B, T, M, N, W)
        return np.argmax(cache["P"], axis=-1).transpose(0, 2, 3, 1) - cache["L"]
    if kind == "FullXAttn":
        P = cache["P"]                                                       # (B, M, N, T, T)
        T = P.shape[-1]
        return np.argmax(P, axis=-1) - np.arange(T)
    return None

"""Framing, STFT/iSTFT, spectral compression, alignment and cepstral distance."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile

WIN_LEN_S = 0.020
HOP_LEN_S = 0.010
DEFAULT_FS = 16000


class SignalError(ValueError):
    """Input signal is too short, silent or otherwise unusable."""


def frame_params(sample_rate_hz=DEFAULT_FS, win_len_s=WIN_LEN_S, hop_len_s=HOP_LEN_S):
    """Return ``(win, hop, fft_size)`` in samples.

    The FFT size is the next power of two at or above the window length.
    """
    win = int(round(win_len_s * sample_rate_hz))
    hop = int(round(hop_len_s * sample_rate_hz))
    if win < 2 or hop < 1:
        raise ValueError(f"window of {win} samples / hop of {hop} is too small")
    fft_size = 1 << int(np.ceil(np.log2(win)))
    return win, hop, fft_size


def n_frames(n_samples, win, hop):
    return (n_samples - win) // hop + 1


def sqrt_hann(win):
    # periodic Hann sums to one at 50% overlap, so sqrt-Hann analysis and
    # synthesis give perfect reconstruction
    return np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win))


@dataclass
class Spectrogram:
    """Complex STFT, ``data`` has shape ``(..., T, F)``."""

    data: np.ndarray
    sample_rate_hz: int = DEFAULT_FS
    win_len_s: float = WIN_LEN_S
    hop_len_s: float = HOP_LEN_S

    @property
    def n_frames(self):
        return self.data.shape[-2]

    @property
    def n_bins(self):
        return self.data.shape[-1]

    def frame_params(self):
        return frame_params(self.sample_rate_hz, self.win_len_s, self.hop_len_s)


@dataclass
class CompressedSpec:
    """Magnitude-compressed complex spectrum, ``|data| = |S| ** exponent_c``."""

    data: np.ndarray
    exponent_c: float = 0.3


def stft(x, sample_rate_hz=DEFAULT_FS, win_len_s=WIN_LEN_S, hop_len_s=HOP_LEN_S):
    """Short-time Fourier transform with a sqrt-Hann window.

    Works on the last axis of ``x``; leading axes are kept.
    """
    x = np.asarray(x, dtype=np.float64)
    win, hop, nfft = frame_params(sample_rate_hz, win_len_s, hop_len_s)
    if x.shape[-1] < win:
        raise SignalError(f"signal of {x.shape[-1]} samples is shorter than one window ({win})")
    frames = sliding_window_view(x, win, axis=-1)[..., ::hop, :]
    data = np.fft.rfft(frames * sqrt_hann(win), n=nfft, axis=-1)
    return Spectrogram(data, sample_rate_hz, win_len_s, hop_len_s)


def istft(spec):
    """Weighted overlap-add inverse of :func:`stft`.

    Output length is ``(T - 1) * hop + win``. The first and last ``hop``
    samples are only covered by one window and are not reconstructed exactly.
    """
    win, hop, nfft = spec.frame_params()
    data = np.asarray(spec.data)
    T = data.shape[-2]
    frames = np.fft.irfft(data, n=nfft, axis=-1)[..., :win] * sqrt_hann(win)
    n_phase = -(-win // hop)
    pad = n_phase * hop - win
    if pad:
        frames = np.concatenate([frames, np.zeros(frames.shape[:-1] + (pad,))], axis=-1)
    frames = frames.reshape(frames.shape[:-1] + (n_phase, hop))
    blocks = np.zeros(data.shape[:-2] + (T + n_phase - 1, hop))
    for p in range(n_phase):
        blocks[..., p:p + T, :] += frames[..., :, p, :]
    out = blocks.reshape(data.shape[:-2] + (-1,))[..., :(T - 1) * hop + win]
    return out


def interior_slice(n_frames_, win, hop):
    """Samples of an iSTFT output covered by a full set of overlapping windows."""
    return slice(win - hop, (n_frames_ - 1) * hop + hop)


def compress(S, c=0.3):
    """Raise the magnitude to ``c`` while keeping the phase; zero stays zero."""
    if not 0 < c <= 1:
        raise ValueError(f"compression exponent must be in (0, 1], got {c}")
    data = S.data if isinstance(S, Spectrogram) else np.asarray(S)
    mag = np.abs(data)
    scale = np.zeros_like(mag)
    nz = mag > 0
    scale[nz] = mag[nz] ** (c - 1.0)
    return CompressedSpec(data * scale, c)


def decompress(cs, c=None):
    """Inverse of :func:`compress`; returns the complex array."""
    if isinstance(cs, CompressedSpec):
        data, c = cs.data, cs.exponent_c if c is None else c
    else:
        data = np.asarray(cs)
        if c is None:
            raise ValueError("exponent required for a bare array")
    mag = np.abs(data)
    scale = np.zeros_like(mag)
    nz = mag > 0
    scale[nz] = mag[nz] ** (1.0 / c - 1.0)
    return data * scale


@dataclass
class AlignResult:
    lag: int
    score: float


def normalized_xcorr(a, b, max_lag):
    """Overlap-normalized cross-correlation for lags ``-max_lag..max_lag``.

    ``score[l]`` correlates ``a[t]`` with ``b[t + l]``, so ``b`` delayed by
    ``k`` samples relative to ``a`` peaks at ``l = k``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = min(len(a), len(b))
    a, b = a[:n], b[:n]
    lags = np.arange(-max_lag, max_lag + 1)
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    full = np.fft.irfft(np.conj(np.fft.rfft(a, nfft)) * np.fft.rfft(b, nfft), nfft)
    num = full[lags % nfft]
    ca = np.concatenate([[0.0], np.cumsum(a * a)])
    cb = np.concatenate([[0.0], np.cumsum(b * b)])
    # overlap for lag l >= 0: a[0:n-l] with b[l:n]
    ea = np.where(lags >= 0, ca[n - np.abs(lags)], ca[n] - ca[np.abs(lags)])
    eb = np.where(lags >= 0, cb[n] - cb[np.abs(lags)], cb[n - np.abs(lags)])
    den = np.sqrt(ea * eb)
    score = np.zeros_like(num)
    ok = den > 0
    score[ok] = num[ok] / den[ok]
    return lags, np.clip(score, -1.0, 1.0)


def xcorr_align(a, b, max_lag):
    """Lag of ``b`` relative to ``a`` with the largest absolute normalized correlation.

    Positive lag means ``b`` is delayed. The returned score keeps its sign, so
    an inverted copy reports ``score = -1``.
    """
    n = min(len(a), len(b))
    if max_lag >= n / 2:
        raise ValueError(f"max_lag={max_lag} must be below half the signal length ({n})")
    if not np.any(np.asarray(a)[:n]) or not np.any(np.asarray(b)[:n]):
        raise SignalError("zero-energy input to xcorr_align")
    lags, score = normalized_xcorr(a, b, max_lag)
    i = int(np.argmax(np.abs(score)))
    return AlignResult(int(lags[i]), float(score[i]))


def real_cepstrum(frames_spec, order=24):
    """Cepstral coefficients ``1..order`` from a complex spectrum (..., F)."""
    mag = np.abs(frames_spec)
    logmag = np.log(np.maximum(mag, 1e-300))
    nfft = 2 * (frames_spec.shape[-1] - 1)
    ceps = np.fft.irfft(logmag, n=nfft, axis=-1)
    return ceps[..., 1:order + 1]


def cepstral_distance(ref, est, sample_rate_hz=DEFAULT_FS, order=24, gate_db=40.0):
    """Mean cepstral distance in dB over active frames of ``ref``.

    Frames whose energy is more than ``gate_db`` below the loudest reference
    frame are skipped. ``c0`` is excluded, which makes the measure invariant
    to a broadband gain on ``est``; both signals are also peak-normalised, so a
    power-of-two gain gives bit-identical inputs.
    """
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch: {ref.shape} vs {est.shape}")
    peaks = np.max(np.abs(ref)), np.max(np.abs(est))
    if peaks[0] == 0 or peaks[1] == 0:
        raise SignalError("cepstral distance of an all-silent signal")
    ref, est = ref / peaks[0], est / peaks[1]
    R = stft(ref, sample_rate_hz).data
    E = stft(est, sample_rate_hz).data
    energy = np.sum(np.abs(R) ** 2, axis=-1)
    if energy.max() <= 0 or not np.any(np.sum(np.abs(E) ** 2, axis=-1) > 0):
        raise SignalError("cepstral distance of an all-silent signal")
    active = energy >= energy.max() * 10 ** (-gate_db / 10)
    active &= np.sum(np.abs(E) ** 2, axis=-1) > 0
    diff = real_cepstrum(R[active], order) - real_cepstrum(E[active], order)
    per_frame = 10.0 / np.log(10.0) * np.sqrt(2.0 * np.sum(diff ** 2, axis=-1))
    return float(np.mean(per_frame))


def read_wav(path):
    """Read a WAV file as float64 in [-1, 1]; returns ``(x, sample_rate)``."""
    fs, x = wavfile.read(path)
    if x.dtype == np.int16:
        x = x.astype(np.float64) / 32768.0
    elif x.dtype == np.int32:
        x = x.astype(np.float64) / 2147483648.0
    elif x.dtype == np.uint8:
        x = (x.astype(np.float64) - 128.0) / 128.0
    else:
        x = x.astype(np.float64)
    return x, fs


def write_wav(path, x, sample_rate_hz=DEFAULT_FS, pcm16=False):
    x = np.asarray(x)
    if pcm16:
        data = np.clip(np.round(x * 32767.0), -32768, 32767).astype(np.int16)
    else:
        data = x.astype(np.float32)
    wavfile.write(str(path), int(sample_rate_hz), data)


def write_csv_rows(path, rows, fieldnames=None):
    """Write a list of dicts to CSV; the header comes from the first row."""
    path = Path(path)
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)

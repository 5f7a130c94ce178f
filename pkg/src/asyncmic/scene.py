"""Multi-device scene simulation.

Shoebox image-source RIRs, per-device latency and clock drift, diffuse noise
from many point sources, and the three training-target strategies.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve, resample_poly

from .dsp import DEFAULT_FS, SignalError, frame_params, n_frames, read_wav, write_wav

SPEED_OF_SOUND = 343.0
SINC_HALF_TAPS = 16  # 32-tap interpolation kernel


class GeometryError(ValueError):
    """Source/microphone placement is not valid for the room."""


class ConfigError(ValueError):
    pass


class TargetStrategy(str, Enum):
    RANDOM_MIC = "RandomMic"
    MIN_LATENCY = "MinLatency"
    CLOSEST_MIC = "ClosestMic"


def _as_strategy(s):
    try:
        return TargetStrategy(s)
    except ValueError:
        raise ConfigError(f"unknown target strategy {s!r}") from None


@dataclass
class RoomSpec:
    dims: tuple = (5.0, 4.0, 3.0)
    reflection_coeff: float = 0.6
    max_image_order: int = 6
    sample_rate_hz: int = DEFAULT_FS

    def validate(self):
        dims = np.asarray(self.dims, dtype=float)
        if dims.shape != (3,) or np.any(dims <= 1.0):
            raise GeometryError(f"room dims must be three values > 1 m, got {self.dims}")
        if not 0 <= self.reflection_coeff < 1:
            raise ConfigError(f"reflection_coeff must be in [0, 1), got {self.reflection_coeff}")
        if self.max_image_order < 0:
            raise ConfigError("max_image_order must be >= 0")

    def contains(self, p):
        p = np.asarray(p, dtype=float)
        return bool(np.all(p > 0) and np.all(p < np.asarray(self.dims, dtype=float)))


@dataclass
class SpeakerSpec:
    position: tuple
    source_id: str = "harmonic"


@dataclass
class MicSpec:
    position: tuple
    tau_s: float = 0.0
    gamma: float = 1.0


@dataclass
class SceneSpec:
    room: RoomSpec
    speakers: list
    mics: list
    snr_db: float = 5.0
    level_db: float = -40.0
    overlap_ratio: float = 0.5
    target_strategy: TargetStrategy = TargetStrategy.CLOSEST_MIC
    seed: int = 0
    duration_s: float = 3.0
    n_noise_sources: int = 64

    max_speakers = 3
    max_mics = 6
    max_abs_tau_s = 0.040

    def validate(self):
        self.room.validate()
        if not 1 <= len(self.speakers) <= self.max_speakers:
            raise ConfigError(f"need 1..{self.max_speakers} speakers, got {len(self.speakers)}")
        if not 1 <= len(self.mics) <= self.max_mics:
            raise ConfigError(f"need 1..{self.max_mics} mics, got {len(self.mics)}")
        for obj in list(self.speakers) + list(self.mics):
            if not self.room.contains(obj.position):
                raise GeometryError(f"position {obj.position} is outside the room {self.room.dims}")
        for mic in self.mics:
            if mic.gamma <= 0:
                raise ConfigError(f"gamma must be positive, got {mic.gamma}")
            if abs(mic.tau_s) > self.max_abs_tau_s + 1e-12:
                raise ConfigError(f"|tau| = {abs(mic.tau_s)} s exceeds {self.max_abs_tau_s} s")
        if not 0 <= self.overlap_ratio <= 1:
            raise ConfigError("overlap_ratio must be in [0, 1]")
        if self.n_noise_sources < 1:
            raise ConfigError("n_noise_sources must be >= 1")
        _as_strategy(self.target_strategy)
        return self

    @property
    def n_samples(self):
        return int(round(self.duration_s * self.room.sample_rate_hz))

    def to_dict(self):
        d = asdict(self)
        d["target_strategy"] = _as_strategy(self.target_strategy).value
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        room = RoomSpec(**{**d.pop("room")})
        room.dims = tuple(room.dims)
        speakers = [SpeakerSpec(tuple(s["position"]), s.get("source_id", "harmonic"))
                    for s in d.pop("speakers")]
        mics = [MicSpec(tuple(m["position"]), m.get("tau_s", 0.0), m.get("gamma", 1.0))
                for m in d.pop("mics")]
        if "target_strategy" in d:
            d["target_strategy"] = _as_strategy(d["target_strategy"])
        return cls(room=room, speakers=speakers, mics=mics, **d)

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text_or_path):
        p = Path(str(text_or_path))
        text = p.read_text() if p.suffix == ".json" and p.exists() else text_or_path
        return cls.from_dict(json.loads(text))


@dataclass
class SceneOutput:
    spec: SceneSpec
    observations: np.ndarray          # (M, N) asynchronous mixture
    targets: np.ndarray               # (N,) for spec.target_strategy
    clean_per_speaker: np.ndarray     # (S, N) dry sources with activity applied
    rirs: np.ndarray                  # (M, S, L) zero padded
    direct_rirs: np.ndarray           # (M, S, L)
    speech_images: np.ndarray         # (S, M, N) async reverberant speech, scaled
    noise: np.ndarray                 # (M, N) async noise, scaled
    gain: float                       # level normalisation applied to everything
    metadata: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# fractional delay kernel


def sinc_weights(pos, half=SINC_HALF_TAPS):
    """Indices and Hann-windowed sinc weights for reading at fractional ``pos``.

    Returns ``(idx, w)`` with shape ``(len(pos), 2 * half)``. Integer positions
    get an exact one-hot kernel.
    """
    pos = np.atleast_1d(np.asarray(pos, dtype=np.float64))
    base = np.floor(pos).astype(np.int64)
    k = np.arange(-half + 1, half + 1)
    idx = base[:, None] + k[None, :]
    off = idx - pos[:, None]
    w = np.sinc(off) * (0.5 + 0.5 * np.cos(np.pi * off / half))
    w[np.abs(off) >= half] = 0.0
    exact = pos == base
    if np.any(exact):
        w[exact] = (k == 0).astype(np.float64)
    return idx, w


# ---------------------------------------------------------------------------
# image-source RIR


def _axis_images(length, s, order):
    n_max = order // 2 + 1
    coords, counts = [], []
    for n in range(-n_max, n_max + 1):
        for q in (0, 1):
            refl = abs(n - q) + abs(n)
            if refl <= order:
                coords.append((1 - 2 * q) * s + 2 * n * length)
                counts.append(refl)
    return np.array(coords), np.array(counts)


def image_sources(room, src, mic, order=None):
    """Enumerate image sources of a shoebox room up to ``order`` reflections.

    Returns ``(delay_samples, amplitude, reflections)`` sorted by delay.
    Amplitude is ``beta ** reflections / distance``.
    """
    order = room.max_image_order if order is None else order
    src = np.asarray(src, dtype=float)
    mic = np.asarray(mic, dtype=float)
    _check_pair(room, src, mic)
    per_axis = [_axis_images(room.dims[a], src[a], order) for a in range(3)]
    (cx, nx), (cy, ny), (cz, nz) = per_axis
    X, Y, Z = np.meshgrid(cx, cy, cz, indexing="ij")
    NX, NY, NZ = np.meshgrid(nx, ny, nz, indexing="ij")
    refl = (NX + NY + NZ).ravel()
    pos = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    keep = refl <= order
    pos, refl = pos[keep], refl[keep]
    dist = np.linalg.norm(pos - mic, axis=1)
    delay = dist / SPEED_OF_SOUND * room.sample_rate_hz
    amp = room.reflection_coeff ** refl / dist
    o = np.argsort(delay, kind="stable")
    return delay[o], amp[o], refl[o]


def _check_pair(room, src, mic):
    room.validate()
    if not room.contains(src) or not room.contains(mic):
        raise GeometryError(f"source {tuple(src)} or mic {tuple(mic)} outside room {room.dims}")
    if np.linalg.norm(np.asarray(src) - np.asarray(mic)) < 1e-9:
        raise GeometryError("source and microphone coincide")


def render_taps(delays, amps, n_samples=None, fractional=True):
    """Place taps in an FIR, optionally with fractional-delay kernels."""
    delays = np.asarray(delays, dtype=float)
    amps = np.asarray(amps, dtype=float)
    if n_samples is None:
        n_samples = int(np.ceil(delays.max())) + SINC_HALF_TAPS + 1
    h = np.zeros(n_samples)
    if not fractional:
        idx = np.round(delays).astype(np.int64)
        ok = idx < n_samples
        np.add.at(h, idx[ok], amps[ok])
        return h
    idx, w = sinc_weights(delays)
    w = w * amps[:, None]
    ok = (idx >= 0) & (idx < n_samples) & (w != 0)
    np.add.at(h, idx[ok], w[ok])
    return h


def generate_rir(room, src, mic, order=None, n_samples=None, fractional=True):
    """Room impulse response from ``src`` to ``mic`` by the image-source method."""
    delays, amps, _ = image_sources(room, src, mic, order)
    return render_taps(delays, amps, n_samples, fractional)


def direct_path(rir, before=8, after=32):
    """Keep only ``[p - before, p + after]`` around the strongest tap ``p``."""
    rir = np.asarray(rir, dtype=float)
    if not np.any(rir):
        raise SignalError("direct_path of an all-zero impulse response")
    p = int(np.argmax(np.abs(rir)))
    out = np.zeros_like(rir)
    lo, hi = max(0, p - before), min(len(rir), p + after + 1)
    out[lo:hi] = rir[lo:hi]
    return out


# ---------------------------------------------------------------------------
# asynchrony


def apply_async(x, gamma=1.0, tau_s=0.0, sample_rate_hz=DEFAULT_FS):
    """Resample ``x`` as a device with clock ratio ``gamma`` and latency ``tau_s``.

    ``out[t] = x(gamma * t - tau_s * fs)`` with band-limited interpolation.
    Reads outside the input are zero.
    """
    if gamma <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if gamma == 1.0 and tau_s == 0.0:
        return x.copy()
    pos = gamma * np.arange(n) - tau_s * sample_rate_hz
    idx, w = sinc_weights(pos)
    valid = (idx >= 0) & (idx < n)
    w = np.where(valid, w, 0.0)
    gathered = x[..., np.clip(idx, 0, n - 1)]
    return np.sum(gathered * w, axis=-1)


# ---------------------------------------------------------------------------
# sources


def harmonic_source(n_samples, rng, sample_rate_hz=DEFAULT_FS, f0_range=(100.0, 220.0),
                    max_freq=4000.0, am_rate_hz=4.0):
    """Voiced-speech stand-in: gliding harmonic complex with syllabic AM."""
    t = np.arange(n_samples) / sample_rate_hz
    f0 = rng.uniform(*f0_range)
    glide = 1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.3, 1.2) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * glide) / sample_rate_hz
    x = np.zeros(n_samples)
    z = np.exp(1j * phase)
    zh = np.ones(n_samples, dtype=complex)
    # harmonics by repeated multiplication, much cheaper than one sin per harmonic
    for h in range(1, int(max_freq // (f0 * 1.1)) + 1):
        zh *= z
        x += (zh * np.exp(1j * rng.uniform(0, 2 * np.pi))).imag / h
    env = np.clip(np.sin(2 * np.pi * am_rate_hz * t + rng.uniform(0, 2 * np.pi)), 0.0, None) ** 0.5
    return x * env


def speech_shaped_noise(n_samples, rng, sample_rate_hz=DEFAULT_FS, burst_rate_hz=3.0):
    """Low-pass tilted Gaussian noise gated into bursts."""
    white = rng.standard_normal(n_samples)
    spec = np.fft.rfft(white)
    f = np.fft.rfftfreq(n_samples, 1.0 / sample_rate_hz)
    spec /= np.sqrt(1.0 + (f / 500.0) ** 2)
    x = np.fft.irfft(spec, n_samples)
    t = np.arange(n_samples) / sample_rate_hz
    env = (np.sin(2 * np.pi * burst_rate_hz * t + rng.uniform(0, 2 * np.pi)) > -0.3).astype(float)
    return x * env


# tone frequencies of the chord source as 31.25 Hz steps (FFT bins at 16 kHz / 512)
CHORD_STEPS = (9, 15, 22, 30, 39, 49)


def chord_source(n_samples, rng, sample_rate_hz=DEFAULT_FS, steps=CHORD_STEPS,
                 control_rate_hz=25.0, step_hz=31.25):
    """Fixed-frequency tones with fast, independent random envelopes.

    The spectrum occupies a few fixed bins, so a small model can represent the
    clean signal and the remaining error is dominated by noise. The envelopes
    change every ``1 / control_rate_hz`` seconds, which makes each stretch of
    the signal distinctive in time.
    """
    t = np.arange(n_samples) / sample_rate_hz
    n_ctrl = int(np.ceil(t[-1] * control_rate_hz)) + 2 if n_samples else 2
    knots = np.arange(n_ctrl) / control_rate_hz
    x = np.zeros(n_samples)
    for k in steps:
        amp = rng.uniform(0.0, 1.0, n_ctrl) ** 2
        env = np.interp(t, knots, amp)
        x += env * np.sin(2 * np.pi * k * step_hz * t + rng.uniform(0, 2 * np.pi))
    return x


def load_source(source_id, n_samples, rng, sample_rate_hz=DEFAULT_FS):
    """Built-in generator by name, or a WAV path (looped/truncated to length)."""
    if source_id == "harmonic":
        return harmonic_source(n_samples, rng, sample_rate_hz)
    if source_id == "ssn":
        return speech_shaped_noise(n_samples, rng, sample_rate_hz)
    if source_id == "chord":
        return chord_source(n_samples, rng, sample_rate_hz)
    path = Path(source_id)
    if not path.exists():
        raise ConfigError(f"unknown source {source_id!r}")
    x, fs = read_wav(path)
    if x.ndim > 1:
        x = x.mean(axis=1)
    if fs != sample_rate_hz:
        g = np.gcd(int(fs), int(sample_rate_hz))
        x = resample_poly(x, sample_rate_hz // g, fs // g)
    if not np.any(x):
        raise SignalError(f"source {source_id} is silent")
    reps = -(-n_samples // len(x))
    start = int(rng.integers(0, len(x)))
    return np.tile(x, reps + 1)[start:start + n_samples]


# ---------------------------------------------------------------------------
# noise


def make_diffuse_noise(room, mic_positions, n_sources, rng, n_samples=None, order=None):
    """Diffuse noise at each mic: sum of ``n_sources`` white point sources, each
    convolved with its RIR to the mic."""
    if n_sources < 1:
        raise ConfigError("n_sources must be >= 1")
    mics = np.atleast_2d(np.asarray(mic_positions, dtype=float))
    n_samples = int(room.sample_rate_hz) if n_samples is None else n_samples
    dims = np.asarray(room.dims, dtype=float)
    for m in mics:
        if not room.contains(m):
            raise GeometryError(f"mic {tuple(m)} outside room {room.dims}")
    positions = []
    while len(positions) < n_sources:
        p = rng.uniform(0.1, 1.0, 3) * (dims - 0.2) + 0.1
        p = np.minimum(p, dims - 0.1)
        if np.min(np.linalg.norm(mics - p, axis=1)) > 0.1:
            positions.append(p)
    signals = rng.standard_normal((n_sources, n_samples))
    rirs = [[generate_rir(room, p, m, order) for p in positions] for m in mics]
    L = max(len(h) for row in rirs for h in row)
    nfft = 1 << int(np.ceil(np.log2(n_samples + L)))
    S = np.fft.rfft(signals, nfft, axis=-1)
    out = np.zeros((len(mics), n_samples))
    for i, row in enumerate(rirs):
        H = np.fft.rfft(np.stack([np.pad(h, (0, L - len(h))) for h in row]), nfft, axis=-1)
        out[i] = np.fft.irfft(np.sum(H * S, axis=0), nfft)[:n_samples]
    return out


# ---------------------------------------------------------------------------
# scene assembly


def _overlap_fraction(segments, n):
    count = np.zeros(n, dtype=int)
    for a, b in segments:
        count[a:b] += 1
    active = np.count_nonzero(count >= 1)
    return np.count_nonzero(count >= 2) / active if active else 0.0


def place_segments(n_speakers, n_samples, overlap_ratio, rng, tol=0.1, max_tries=2000):
    """One contiguous active segment per speaker, rejection sampled so the
    measured overlap lands within ``tol`` of ``overlap_ratio``."""
    if n_speakers == 1:
        return [(0, n_samples)], 0.0
    best, best_err = None, np.inf
    for _ in range(max_tries):
        lengths = (rng.uniform(0.4, 0.75, n_speakers) * n_samples).astype(int)
        start0 = rng.integers(0, n_samples - lengths[0] + 1)
        segs = [(int(start0), int(start0 + lengths[0]))]
        for k in range(1, n_speakers):
            shift = rng.uniform(-1, 1) * lengths[k]
            a = int(np.clip(start0 + shift, 0, n_samples - lengths[k]))
            segs.append((a, a + int(lengths[k])))
        ov = _overlap_fraction(segs, n_samples)
        err = abs(ov - overlap_ratio)
        if err < best_err:
            best, best_err = segs, err
        if err <= tol:
            break
    return best, _overlap_fraction(best, n_samples)


def _activity(segments, n, fs, ramp_s=0.01):
    masks = np.zeros((len(segments), n))
    r = max(1, int(ramp_s * fs))
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
    for k, (a, b) in enumerate(segments):
        masks[k, a:b] = 1.0
        if b - a > 2 * r:
            masks[k, a:a + r] = ramp
            masks[k, b - r:b] = ramp[::-1]
    return masks


def frame_offsets(taus, gammas, n_samples, sample_rate_hz=DEFAULT_FS):
    """Per-mic content delay in frames, evaluated at each frame centre, shape (M, T)."""
    win, hop, _ = frame_params(sample_rate_hz)
    T = n_frames(n_samples, win, hop)
    centres = np.arange(T) * hop + win / 2
    taus = np.asarray(taus, dtype=float)[:, None]
    gammas = np.asarray(gammas, dtype=float)[:, None]
    return (taus * sample_rate_hz - (gammas - 1.0) * centres[None, :]) / hop


def _pad_stack(rows):
    L = max(len(h) for row in rows for h in row)
    return np.array([[np.pad(h, (0, L - len(h))) for h in row] for row in rows])


def mix_scene(spec, include_noise=True, normalize=True, speaker_subset=None):
    """Simulate one asynchronous multi-device capture.

    ``speaker_subset`` renders only the listed speakers while keeping every
    random draw (placement, sources, noise) identical to the full scene.
    """
    spec.validate()
    room = spec.room
    fs = room.sample_rate_hz
    N = spec.n_samples
    S, M = len(spec.speakers), len(spec.mics)
    streams = np.random.SeedSequence(spec.seed).spawn(3 + S)
    rng_place, rng_noise, rng_target = (np.random.default_rng(s) for s in streams[:3])

    segments, measured_overlap = place_segments(S, N, spec.overlap_ratio, rng_place)
    activity = _activity(segments, N, fs)
    clean = np.zeros((S, N))
    for k, sp in enumerate(spec.speakers):
        src = load_source(sp.source_id, N, np.random.default_rng(streams[3 + k]), fs)
        if not np.any(src):
            raise SignalError(f"speaker {k} source is silent")
        clean[k] = src * activity[k]
    random_mic = int(rng_target.integers(0, M))

    rirs = [[generate_rir(room, sp.position, mic.position) for sp in spec.speakers]
            for mic in spec.mics]
    direct = [[direct_path(h) for h in row] for row in rirs]
    rirs_arr, direct_arr = _pad_stack(rirs), _pad_stack(direct)

    keep = np.ones(S, bool) if speaker_subset is None else np.isin(np.arange(S), speaker_subset)
    images = np.zeros((S, M, N))
    for k in range(S):
        for m in range(M):
            images[k, m] = fftconvolve(clean[k], rirs[m][k])[:N]

    noise = np.zeros((M, N))
    active = activity.max(axis=0) > 0.5
    if include_noise:
        raw = make_diffuse_noise(room, [m.position for m in spec.mics],
                                 spec.n_noise_sources, rng_noise, N)
        # SNR is set against the full scene's speech so speaker subsets stay linear
        ps = np.mean(images.sum(axis=0)[:, active] ** 2)
        pn = np.mean(raw[:, active] ** 2)
        noise = raw * np.sqrt(ps / (pn * 10 ** (spec.snr_db / 10)))
    images[~keep] = 0.0

    taus = np.array([m.tau_s for m in spec.mics])
    gammas = np.array([m.gamma for m in spec.mics])
    for m in range(M):
        for k in range(S):
            if keep[k]:
                images[k, m] = apply_async(images[k, m], gammas[m], taus[m], fs)
        noise[m] = apply_async(noise[m], gammas[m], taus[m], fs)
    observations = images.sum(axis=0) + noise

    gain = 1.0
    if normalize:
        rms = np.sqrt(np.mean(observations ** 2))
        if rms == 0:
            raise SignalError("scene mixture is silent")
        gain = 10 ** (spec.level_db / 20) / rms
    observations = observations * gain
    images *= gain
    noise *= gain

    mic_pos = np.array([m.position for m in spec.mics], dtype=float)
    spk_pos = np.array([s.position for s in spec.speakers], dtype=float)
    dists = np.linalg.norm(mic_pos[:, None, :] - spk_pos[None, :, :], axis=-1)
    metadata = {
        "tau_s": taus.tolist(),
        "gamma": gammas.tolist(),
        "closest_mic": np.argmin(dists, axis=0).tolist(),
        "min_latency_mic": int(np.argmin(taus)),
        "random_mic": random_mic,
        "segments": [list(s) for s in segments],
        "measured_overlap": float(measured_overlap),
        "frame_offsets": frame_offsets(taus, gammas, N, fs).tolist(),
        "gain": float(gain),
        "sample_rate_hz": int(fs),
    }
    out = SceneOutput(spec, observations, np.zeros(N), clean, rirs_arr, direct_arr,
                      images, noise, float(gain), metadata)
    if keep.all():
        out.targets = synth_target(out, spec.target_strategy)
    else:
        out.targets = synth_target(out, spec.target_strategy, speakers=np.flatnonzero(keep))
    return out


def target_mics(scene, strategy):
    """Mic index used for each speaker under ``strategy``."""
    strategy = _as_strategy(strategy)
    S = len(scene.spec.speakers)
    md = scene.metadata
    if strategy is TargetStrategy.RANDOM_MIC:
        return [md["random_mic"]] * S
    if strategy is TargetStrategy.MIN_LATENCY:
        return [int(np.argmin(md["tau_s"]))] * S
    return list(md["closest_mic"])


def synth_target(scene, strategy, speakers=None):
    """Direct-path target mixture for ``strategy``.

    Each speaker's dry source is convolved with the direct path to its chosen
    mic, then that mic's clock drift and latency are applied.
    """
    chosen = target_mics(scene, strategy)
    fs = scene.spec.room.sample_rate_hz
    N = scene.observations.shape[-1]
    md = scene.metadata
    ks = range(len(chosen)) if speakers is None else speakers
    y = np.zeros(N)
    for k in ks:
        m = chosen[k]
        d = fftconvolve(scene.clean_per_speaker[k], scene.direct_rirs[m, k])[:N]
        y += apply_async(d, md["gamma"][m], md["tau_s"][m], fs)
    return y * scene.gain


def save_scene(scene, out_dir):
    """Per-mic float32 WAVs, target.wav, spec.json and metadata.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fs = scene.spec.room.sample_rate_hz
    for m, x in enumerate(scene.observations):
        write_wav(out_dir / f"mic_{m:02d}.wav", x, fs)
    write_wav(out_dir / "target.wav", scene.targets, fs)
    scene.spec.to_json(out_dir / "spec.json")
    (out_dir / "metadata.json").write_text(json.dumps(scene.metadata, indent=2))


# ---------------------------------------------------------------------------
# random scene specs


@dataclass
class SceneDistribution:
    """Ranges for drawing random :class:`SceneSpec` instances."""

    room_dims_low: tuple = (3.0, 3.0, 2.5)
    room_dims_high: tuple = (8.0, 7.0, 3.5)
    reflection_range: tuple = (0.3, 0.8)
    max_image_order: int = 6
    n_speakers: tuple = (1, 3)
    n_mics: tuple = (1, 6)
    tau_mode: str = "uniform"        # uniform | max_delay | zero
    max_tau_s: float = 0.040
    drift_std_hz: float = 0.5
    snr_mean_db: float = 5.0
    snr_std_db: float = 10.0
    level_mean_db: float = -40.0
    level_std_db: float = 10.0
    overlap_ratio: float = 0.5
    duration_s: float = 3.0
    n_noise_sources: int = 64
    source_ids: tuple = ("harmonic", "ssn")
    target_strategy: str = "ClosestMic"
    sample_rate_hz: int = DEFAULT_FS

    def sample(self, rng, n_mics=None, seed=None):
        dims = rng.uniform(self.room_dims_low, self.room_dims_high)
        room = RoomSpec(tuple(float(v) for v in dims), float(rng.uniform(*self.reflection_range)),
                        self.max_image_order, self.sample_rate_hz)
        S = int(rng.integers(self.n_speakers[0], self.n_speakers[1] + 1))
        M = int(rng.integers(self.n_mics[0], self.n_mics[1] + 1)) if n_mics is None else n_mics

        def inside():
            return tuple(float(v) for v in rng.uniform(0.5, dims - 0.5))

        speakers = [SpeakerSpec(inside(), str(rng.choice(self.source_ids))) for _ in range(S)]
        mics = []
        for _ in range(M):
            if self.tau_mode == "zero":
                tau = 0.0
            elif self.tau_mode == "max_delay":
                tau = float(rng.choice([-1.0, 1.0]) * self.max_tau_s)
            else:
                tau = float(rng.uniform(-self.max_tau_s, self.max_tau_s))
            f = self.sample_rate_hz + self.drift_std_hz * rng.standard_normal()
            mics.append(MicSpec(inside(), tau, float(f / self.sample_rate_hz)))
        spec = SceneSpec(room, speakers, mics,
                         snr_db=float(rng.normal(self.snr_mean_db, self.snr_std_db)),
                         level_db=float(rng.normal(self.level_mean_db, self.level_std_db)),
                         overlap_ratio=self.overlap_ratio,
                         target_strategy=_as_strategy(self.target_strategy),
                         seed=int(rng.integers(0, 2**63 - 1)) if seed is None else seed,
                         duration_s=self.duration_s, n_noise_sources=self.n_noise_sources)
        return spec.validate()

    @classmethod
    def preset(cls, name, **overrides):
        """Named distributions mirroring the ablation axes."""
        presets = {
            "default": {},
            "desk": {"max_image_order": 3, "n_noise_sources": 8, "n_mics": (1, 4)},
            "sync": {"tau_mode": "zero", "drift_std_hz": 0.0},
            "drift_0.5": {"tau_mode": "zero", "drift_std_hz": 0.5},
            "drift_2": {"tau_mode": "zero", "drift_std_hz": 2.0},
            "max_delay_40ms": {"tau_mode": "max_delay", "drift_std_hz": 0.0},
            "no_overlap": {"overlap_ratio": 0.0, "n_speakers": (2, 3)},
            "full_overlap": {"overlap_ratio": 1.0, "n_speakers": (2, 3)},
        }
        if name not in presets:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **overrides})

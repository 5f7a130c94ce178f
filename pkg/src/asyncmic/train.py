"""Seeded training loop, delayed-copy task, evaluation and module comparison."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from . import dsp, scene
from .attention import ParamStore, attention_offsets
from .model import Backbone, BackboneConfig, interleave, spectral_loss

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "train_loss", "val_loss", "cd_db", "align_acc")
# step key reserved for held-out draws; training steps never reach it
HELD_OUT = 1 << 40


class TrainingError(RuntimeError):
    """Training diverged; the message names the offending batch seed."""


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, lr=1e-3):
        self.lr = lr

    def step(self, values, grads):
        for k, g in grads.items():
            values[k] -= self.lr * g


class Adam:
    """Adam with bias correction; state is kept in float64."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, values, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(values[k]))
            v = self.v.setdefault(k, np.zeros_like(values[k]))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            values[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name, lr):
    name = str(name).lower()
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer {name!r}")


def clip_by_global_norm(grads, max_norm):
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# data


@dataclass
class Example:
    """One evaluation scene: mic waveforms, target waveform and true frame delays."""

    observations: np.ndarray          # (M, N)
    target: np.ndarray                # (N,)
    frame_delays: np.ndarray | None   # (M, T) content delay of each mic, in frames
    name: str = ""
    active_frames: np.ndarray | None = None


@dataclass
class DelayedCopyConfig:
    """Every mic hears the same reverberant source, shifted by a whole number of
    frames, plus its own independent noise.

    Per-mic delays span at most ``max_offset_frames`` between any two mics and
    lie in ``[-max_offset_frames, max_offset_frames]``. The target is the mean of
    the per-mic shifted direct-path signals.
    """

    n_mics: tuple = (2, 3)
    max_offset_frames: int = 4
    snr_db: tuple = (-5.0, 5.0)
    pool_size: int = 256
    noise_pool_size: int = 64
    duration_s: float = 3.0
    source_id: str = "harmonic"
    level_rms: float = 0.05
    max_image_order: int = 3
    target: str = "direct"      # direct | reverberant
    sample_rate_hz: int = dsp.DEFAULT_FS


def _tilted_noise(n, rng, fs):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / fs)
    spec /= np.sqrt(1.0 + (f / 1000.0) ** 2)
    x = np.fft.irfft(spec, n)
    return x / np.sqrt(np.mean(x * x))


class DelayedCopyTask:
    """Pool-based generator for the delayed-copy scenario.

    Reverberant and direct-path sources are rendered once into a pool, together
    with their STFTs. Because every shift is a whole number of hops, shifting a
    signal is a slice of its frames, so batches are assembled without any FFTs.
    Each example is fully determined by ``(seed, step, index)``.
    """

    def __init__(self, cfg=None, seed=0, split="train", compression_c=0.3):
        self.cfg = cfg = cfg or DelayedCopyConfig()
        self.seed, self.split, self.c = seed, split, compression_c
        fs = cfg.sample_rate_hz
        self.win, self.hop, _ = dsp.frame_params(fs)
        K = cfg.max_offset_frames
        self.n = int(round(cfg.duration_s * fs))
        self.T = dsp.n_frames(self.n, self.win, self.hop)
        self.n_long = self.n + 2 * K * self.hop
        split_key = {"train": 0, "val": 1, "test": 2}[split]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7919, split_key]))
        # held-out splits draw from their own, smaller pool of unseen sources
        self.pool_size = cfg.pool_size if split == "train" else min(cfg.pool_size, 64)
        rev, direct = [], []
        for _ in range(self.pool_size):
            r, d = self._render_source(rng)
            rev.append(r)
            direct.append(d)
        self.rev = np.array(rev)
        self.direct = np.array(direct)
        self.noise = np.array([_tilted_noise(2 * self.n_long, rng, fs) for _ in range(cfg.noise_pool_size)])
        self.R = dsp.stft(self.rev, fs).data.astype(np.complex64)
        if cfg.target == "reverberant":
            self.direct = self.rev
        elif cfg.target != "direct":
            raise ValueError(f"unknown delayed-copy target {cfg.target!r}")
        self.D = dsp.stft(self.direct, fs).data.astype(np.complex64)
        self.Nz = dsp.stft(self.noise, fs).data.astype(np.complex64)
        self.power = np.mean(np.abs(self.R) ** 2, axis=(1, 2))
        self.noise_power = np.mean(np.abs(self.Nz) ** 2, axis=(1, 2))

    def _render_source(self, rng):
        cfg = self.cfg
        fs = cfg.sample_rate_hz
        dims = rng.uniform((3.0, 3.0, 2.5), (8.0, 7.0, 3.5))
        room = scene.RoomSpec(tuple(dims), float(rng.uniform(0.3, 0.8)), cfg.max_image_order, fs)
        src = rng.uniform(0.5, dims - 0.5)
        mic = rng.uniform(0.5, dims - 0.5)
        while np.linalg.norm(src - mic) < 0.3:
            mic = rng.uniform(0.5, dims - 0.5)
        h = scene.generate_rir(room, src, mic)
        s = scene.load_source(cfg.source_id, self.n_long, rng, fs)
        r = fftconvolve(s, h)[:self.n_long]
        d = fftconvolve(s, scene.direct_path(h))[:self.n_long]
        g = cfg.level_rms / max(np.sqrt(np.mean(r * r)), 1e-12)
        return r * g, d * g

    # -- example draws ------------------------------------------------------

    def n_mics_for_step(self, step):
        lo, hi = self.cfg.n_mics
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, step]))
        return int(rng.integers(lo, hi + 1))

    def draw(self, step, index, n_mics):
        """Choices for one example: pool indices, per-mic delays and noise gains."""
        cfg = self.cfg
        K = cfg.max_offset_frames
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, step, index]))
        src = int(rng.integers(self.pool_size))
        delays = rng.integers(0, K + 1, size=n_mics) - int(rng.integers(0, K + 1))
        noise_ids = rng.choice(cfg.noise_pool_size, size=n_mics, replace=cfg.noise_pool_size < n_mics)
        noise_starts = rng.integers(0, self.Nz.shape[1] - self.T + 1, size=n_mics)
        snr = rng.uniform(*cfg.snr_db, size=n_mics)
        gains = np.sqrt(self.power[src] / self.noise_power[noise_ids] * 10 ** (-snr / 10))
        return src, delays, noise_ids, noise_starts, gains

    def _frames(self, A, delay):
        K = self.cfg.max_offset_frames
        return A[K - delay:K - delay + self.T]

    def assemble(self, step, indices, n_mics):
        """Features ``(B, M, T, 2F)`` float32, compressed target ``(B, T, F)`` and delays ``(B, M)``."""
        B, F = len(indices), self.R.shape[-1]
        X = np.empty((B, n_mics, self.T, F), dtype=np.complex64)
        Y = np.empty((B, self.T, F), dtype=np.complex64)
        delays = np.empty((B, n_mics), dtype=int)
        for b, index in enumerate(indices):
            src, dl, nid, nst, g = self.draw(step, index, n_mics)
            for m in range(n_mics):
                X[b, m] = self._frames(self.R[src], dl[m]) + g[m] * self.Nz[nid[m], nst[m]:nst[m] + self.T]
            Y[b] = np.mean([self._frames(self.D[src], d) for d in dl], axis=0)
            delays[b] = dl
        feat = interleave(dsp.compress(X, self.c).data, np.float32)
        return feat, dsp.compress(Y, self.c).data, delays

    def batch(self, step, batch_size):
        return self.assemble(step, range(batch_size), self.n_mics_for_step(step))

    def held_out_mics(self, index):
        lo, hi = self.cfg.n_mics
        return lo + index % (hi - lo + 1)

    def held_out_batches(self, count, batch=8, step_key=HELD_OUT):
        """The held-out set of :meth:`examples` as feature batches, grouped by mic count."""
        groups = {}
        for i in range(count):
            groups.setdefault(self.held_out_mics(i), []).append(i)
        out = []
        for M, idx in sorted(groups.items()):
            for j in range(0, len(idx), batch):
                out.append(self.assemble(step_key, idx[j:j + batch], M))
        return out

    def example(self, step, index, n_mics):
        """The same draw rendered as waveforms, for waveform-level evaluation."""
        src, dl, nid, nst, g = self.draw(step, index, n_mics)
        K, hop, n = self.cfg.max_offset_frames, self.hop, self.n
        obs = np.empty((n_mics, n))
        tgt = np.zeros(n)
        for m in range(n_mics):
            a = (K - dl[m]) * hop
            obs[m] = self.rev[src, a:a + n] + g[m] * self.noise[nid[m], nst[m] * hop:nst[m] * hop + n]
            tgt += self.direct[src, a:a + n] / n_mics
        ref = self._frames(self.R[src], 0)
        energy = np.sum(np.abs(ref) ** 2, axis=-1)
        active = energy >= 0.01 * energy.max()
        delays = np.repeat(dl[:, None].astype(float), self.T, axis=1)
        return Example(obs, tgt, delays, f"{self.split}-{step}-{index}", active)

    def examples(self, count, step_key=HELD_OUT):
        """Fixed held-out set; mic counts cycle through the configured range."""
        return [self.example(step_key, i, self.held_out_mics(i)) for i in range(count)]


def example_from_spec(spec, strategy=None):
    """Simulate a :class:`SceneSpec` into an :class:`Example`."""
    out = scene.mix_scene(spec)
    strategy = strategy or spec.target_strategy
    target = scene.synth_target(out, strategy)
    delays = np.asarray(out.metadata["frame_offsets"], dtype=float)
    return Example(out.observations, target, delays, f"scene-{spec.seed}")


class SceneTask:
    """On-the-fly simulated scenes drawn from a :class:`SceneDistribution`."""

    def __init__(self, distribution, seed=0, compression_c=0.3, n_mics=None, target_strategy=None):
        self.dist = distribution
        self.seed, self.c = seed, compression_c
        self.n_mics = n_mics
        self.target_strategy = target_strategy or distribution.target_strategy
        self._cache = {}

    def n_mics_for_step(self, step):
        if self.n_mics is not None:
            return self.n_mics
        lo, hi = self.dist.n_mics
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, step]))
        return int(rng.integers(lo, hi + 1))

    def example(self, step, index, n_mics):
        key = (step, index, n_mics)
        if key not in self._cache:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, step, index]))
            spec = self.dist.sample(rng, n_mics=n_mics)
            self._cache = {key: example_from_spec(spec, self.target_strategy)}
        return self._cache[key]

    def batch(self, step, batch_size):
        M = self.n_mics_for_step(step)
        exs = [self.example(step, b, M) for b in range(batch_size)]
        X = np.array([e.observations for e in exs])
        Y = np.array([e.target for e in exs])
        feat = interleave(dsp.compress(dsp.stft(X, self.dist.sample_rate_hz), self.c).data, np.float32)
        tgt = dsp.compress(dsp.stft(Y, self.dist.sample_rate_hz), self.c).data
        return feat, tgt, None

    def examples(self, count, step_key=HELD_OUT):
        return [self.example(step_key, i, self.n_mics_for_step(step_key + 1 + i)) for i in range(count)]


# ---------------------------------------------------------------------------
# experiment config


@dataclass
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    task: str = "delayed_copy"            # delayed_copy | scenes
    delayed_copy: DelayedCopyConfig = field(default_factory=DelayedCopyConfig)
    scene_distribution: dict = field(default_factory=dict)
    scene_preset: str = "desk"
    target_strategy: str = "ClosestMic"
    eval_every: int = 500
    n_val: int = 16
    metrics: list = field(default_factory=lambda: list(METRIC_FIELDS))
    clip_norm: float = 5.0
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if isinstance(self.delayed_copy, dict):
            dc = dict(self.delayed_copy)
            for k in ("n_mics", "snr_db"):
                if k in dc:
                    dc[k] = tuple(dc[k])
            self.delayed_copy = DelayedCopyConfig(**dc)
        self.validate()

    def validate(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.task not in ("delayed_copy", "scenes"):
            raise ValueError(f"unknown task {self.task!r}")
        if str(self.optimizer).lower() not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        scene._as_strategy(self.target_strategy)
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def make_task(self, split="train"):
        c = self.backbone.compression_c
        if self.task == "delayed_copy":
            return DelayedCopyTask(self.delayed_copy, self.seed, split, c)
        dist = scene.SceneDistribution.preset(self.scene_preset, **{
            k: tuple(v) if isinstance(v, list) else v for k, v in self.scene_distribution.items()})
        offset = {"train": 0, "val": 1, "test": 2}[split]
        return SceneTask(dist, self.seed * 3 + offset, c, target_strategy=self.target_strategy)


@dataclass
class MetricsRow:
    step: int
    train_loss: float
    val_loss: float | None = None
    cd_db: float | None = None
    align_acc: float | None = None

    def __post_init__(self):
        if self.align_acc is not None and not 0.0 <= self.align_acc <= 1.0:
            raise ValueError("align_acc must lie in [0, 1]")

    def as_csv(self):
        return {k: "" if v is None else v for k, v in asdict(self).items()}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, store, cfg, step):
    store.save(path, config={"experiment": cfg.to_dict(), "step": step})


def load_checkpoint(path):
    """Returns ``(ParamStore, ExperimentConfig, step)``."""
    store, meta = ParamStore.load(path)
    cfg = ExperimentConfig.from_dict(meta["experiment"])
    return store, cfg, meta.get("step", 0)


# ---------------------------------------------------------------------------
# evaluation


def align_accuracy(offsets, frame_delays, active=None, window_L=None, tol=1):
    """Fraction of interior, active query frames whose attention argmax matches
    the true cross-mic frame offset within ``tol``.

    ``offsets`` is ``(M, N, T)`` from one example; ``frame_delays`` is ``(M, T)``.
    Self pairs are excluded; returns ``(hits, total)``.
    """
    M, N, T = offsets.shape
    if M < 2:
        return 0, 0
    t = np.arange(T)
    hits = total = 0
    for m in range(M):
        for n in range(N):
            if m == n:
                continue
            true = np.rint(frame_delays[n] - frame_delays[m])
            ok = (t + true >= 0) & (t + true < T)
            if window_L is not None:
                ok &= np.abs(true) <= window_L
                ok &= (t >= window_L) & (t < T - window_L)
            if active is not None:
                ok &= active
            hits += int(np.sum((np.abs(offsets[m, n] - true) <= tol) & ok))
            total += int(np.sum(ok))
    return hits, total


def _example_loss(model, params, ex, dtype):
    feat = model.features(ex.observations[None], dtype)
    spec, cache = model.forward_features(feat, params)
    tgt = model.compressed(ex.target[None])
    loss, _ = spectral_loss(spec.astype(np.complex128), tgt, model.config.loss_lambda)
    return loss, spec, cache


def evaluate(checkpoint, eval_set, csv_path=None, rng_seed=0):
    """Score a checkpoint on a list of :class:`Example` or ``SceneSpec``.

    ``checkpoint`` is a path or a ``(ParamStore, ExperimentConfig)`` pair.
    Returns one dict per scene plus a summary :class:`MetricsRow`; the summary
    is None for an empty set.
    """
    if isinstance(checkpoint, (str, Path)):
        store, cfg, step = load_checkpoint(checkpoint)
    else:
        store, cfg = checkpoint[:2]
        step = checkpoint[2] if len(checkpoint) > 2 else 0
    model = Backbone(cfg.backbone)
    dtype = np.dtype(cfg.dtype)
    params = {k: v.astype(dtype) for k, v in store.values.items()}
    rng = np.random.default_rng(rng_seed)
    rows = []
    hits = total = 0
    has_align = True
    fs = cfg.backbone.sample_rate_hz
    for i, ex in enumerate(eval_set):
        if isinstance(ex, scene.SceneSpec):
            ex = example_from_spec(ex, cfg.target_strategy)
        loss, spec, cache = _example_loss(model, params, ex, dtype)
        y_hat = model.synthesize(spec.astype(np.complex128))[0]
        target = ex.target[:len(y_hat)]
        noisy = ex.observations[int(rng.integers(ex.observations.shape[0])), :len(y_hat)]
        row = {"scene": ex.name or str(i), "n_mics": ex.observations.shape[0], "loss": loss,
               "cd_db": _safe_cd(target, y_hat, fs), "cd_noisy_db": _safe_cd(target, noisy, fs),
               "align_acc": ""}
        offs = attention_offsets(model.attention_cache(cache, 0))
        if offs is None or ex.frame_delays is None:
            has_align = False
        else:
            h, n = align_accuracy(offs[0], ex.frame_delays, ex.active_frames, cfg.backbone.window_L
                                  if cfg.backbone.module_kind == "WindowedXAttn" else None)
            if n:
                row["align_acc"] = h / n
            hits, total = hits + h, total + n
        rows.append(row)
    if csv_path is not None:
        dsp.write_csv_rows(csv_path, rows, ["scene", "n_mics", "loss", "cd_db", "cd_noisy_db", "align_acc"])
    if not rows:
        return rows, None
    summary = MetricsRow(step, float("nan"),
                         float(np.mean([r["loss"] for r in rows])),
                         float(np.nanmean([r["cd_db"] for r in rows])),
                         hits / total if has_align and total else None)
    return rows, summary


def _safe_cd(ref, est, fs):
    try:
        return dsp.cepstral_distance(ref, est, fs)
    except dsp.SignalError:
        return float("nan")


def validation_loss(model, params, val_batches):
    losses = []
    for feat, tgt, _ in val_batches:
        spec, _ = model.forward_features(feat, params)
        losses.append(spectral_loss(spec, tgt, model.config.loss_lambda)[0])
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    store: ParamStore
    config: ExperimentConfig
    rows: list
    final_val_loss: float | None
    checkpoint: Path | None = None


def train(cfg, out_dir=None, log_every=100, task=None, val_task=None):
    """Train one model; returns a :class:`TrainResult`.

    Writes ``metrics.csv``, ``checkpoint.bin`` and ``config.json`` when
    ``out_dir`` is given. Deterministic for a given config.
    """
    cfg.validate()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    model = Backbone(cfg.backbone)
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 104729]))
    store = model.init_params(init_rng)
    dtype = np.dtype(cfg.dtype)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    rows = []
    final_val = None
    if cfg.steps > 0:
        task = task or cfg.make_task("train")
        val_task = val_task or cfg.make_task("val")
        val_batches = _val_batches(val_task, cfg)
    for step in range(cfg.steps):
        feat, tgt, _ = task.batch(step, cfg.batch_size)
        params = {k: v.astype(dtype) for k, v in store.values.items()}
        spec, cache = model.forward_features(feat.astype(dtype, copy=False), params)
        loss, dspec = spectral_loss(spec, tgt, cfg.backbone.loss_lambda)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}; batch seed=({cfg.seed}, {step}, 0..{cfg.batch_size - 1})")
        grads, _ = model.backward(dspec, cache, params, input_grad=False)
        grads = {k: g.astype(np.float64) for k, g in grads.items()}
        clip_by_global_norm(grads, cfg.clip_norm)
        opt.step(store.values, grads)
        row = MetricsRow(step, loss)
        last = step == cfg.steps - 1
        if cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or last):
            params = {k: v.astype(dtype) for k, v in store.values.items()}
            row.val_loss = final_val = validation_loss(model, params, val_batches)
            if out_dir is not None:
                save_checkpoint(out_dir / "checkpoint.bin", store, cfg, step + 1)
        rows.append(row)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f", step, loss)
    if cfg.steps > 0 and final_val is None:
        params = {k: v.astype(dtype) for k, v in store.values.items()}
        final_val = validation_loss(model, params, val_batches)
    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / "checkpoint.bin"
        save_checkpoint(ckpt, store, cfg, cfg.steps)
        dsp.write_csv_rows(out_dir / "metrics.csv", [r.as_csv() for r in rows], list(METRIC_FIELDS))
    return TrainResult(store, cfg, rows, final_val, ckpt)


def _val_batches(val_task, cfg, batch=8):
    if isinstance(val_task, DelayedCopyTask):
        batches = val_task.held_out_batches(cfg.n_val, batch)
    else:
        batches = [val_task.batch(HELD_OUT + i, min(batch, cfg.n_val - i)) for i in range(0, cfg.n_val, batch)]
    return [(f.astype(cfg.dtype), t, d) for f, t, d in batches]


# ---------------------------------------------------------------------------
# module comparison


@dataclass
class Comparison:
    kinds: list
    results: dict          # kind -> TrainResult
    summaries: dict        # kind -> MetricsRow from the held-out evaluation
    eval_rows: dict        # kind -> per-scene rows

    def final_val_losses(self):
        return {k: r.final_val_loss for k, r in self.results.items()}


def compare_modules(cfg_base, kinds, out_dir=None, n_eval=20, log_every=0):
    """Train one model per kind on identical seeds and data, then evaluate each
    on the same held-out scenes. Writes ``comparison.csv`` and ``report.md``."""
    if not kinds:
        raise ValueError("kinds must be nonempty")
    out_dir = Path(out_dir) if out_dir is not None else None
    task = cfg_base.make_task("train") if cfg_base.steps > 0 else None
    val_task = cfg_base.make_task("val") if cfg_base.steps > 0 else None
    test_set = cfg_base.make_task("test").examples(n_eval) if n_eval else []
    results, summaries, eval_rows = {}, {}, {}
    for kind in kinds:
        bb = BackboneConfig(**{**cfg_base.backbone.to_dict(), "module_kind": kind})
        cfg = ExperimentConfig(**{**cfg_base.__dict__, "backbone": bb})
        sub = out_dir / bb.module_kind if out_dir is not None else None
        res = train(cfg, sub, log_every=log_every, task=task, val_task=val_task)
        rows, summary = evaluate((res.store, cfg, cfg.steps), test_set,
                                 csv_path=sub / "eval.csv" if sub is not None else None)
        results[bb.module_kind], summaries[bb.module_kind], eval_rows[bb.module_kind] = res, summary, rows
    comp = Comparison(list(results), results, summaries, eval_rows)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_comparison(comp, out_dir)
    return comp


def write_comparison(comp, out_dir):
    out_dir = Path(out_dir)
    curve = []
    for kind, res in comp.results.items():
        for r in res.rows:
            if r.val_loss is not None:
                curve.append({"kind": kind, "step": r.step + 1, "train_loss": r.train_loss,
                              "val_loss": r.val_loss})
    dsp.write_csv_rows(out_dir / "comparison.csv", curve, ["kind", "step", "train_loss", "val_loss"])
    lines = ["# Module comparison", "",
             "| module | final val loss | CD enhanced (dB) | CD noisy mic (dB) | align acc |",
             "|---|---|---|---|---|"]
    for kind in comp.kinds:
        res, s = comp.results[kind], comp.summaries.get(kind)
        rows = comp.eval_rows.get(kind) or []
        noisy = np.nanmean([r["cd_noisy_db"] for r in rows]) if rows else float("nan")
        val = "n/a" if res.final_val_loss is None else f"{res.final_val_loss:.5f}"
        cd = "n/a" if s is None else f"{s.cd_db:.2f}"
        acc = "n/a" if s is None or s.align_acc is None else f"{s.align_acc:.3f}"
        lines.append(f"| {kind} | {val} | {cd} | {noisy:.2f} | {acc} |")
    base = comp.results[comp.kinds[0]].final_val_loss
    if len(comp.kinds) > 1 and base:
        lines += ["", f"Val-loss ratio relative to {comp.kinds[0]}:", ""]
        for kind in comp.kinds[1:]:
            v = comp.results[kind].final_val_loss
            lines.append(f"- {kind}: {v / base:.3f}")
    lines += ["", "Validation-loss curves are in `comparison.csv`."]
    (out_dir / "report.md").write_text("\n".join(lines) + "\n")

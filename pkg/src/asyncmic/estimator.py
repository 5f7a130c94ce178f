"""scikit-learn style wrapper around the backbone."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import dsp
from .attention import ParamStore
from .model import Backbone, BackboneConfig, spectral_loss
from .train import ExperimentConfig, clip_by_global_norm, load_checkpoint, make_optimizer


def _as_scenes(X, name="X"):
    """Accept ``(n, M, N)`` arrays or a list of ``(M_i, N_i)`` arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        scenes = list(X)
    elif isinstance(X, np.ndarray) and X.ndim == 2:
        scenes = [X]
    else:
        scenes = [np.asarray(x) for x in X]
    out = []
    for i, x in enumerate(scenes):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"{name}[{i}] must be (n_mics, n_samples), got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError(f"{name}[{i}] contains NaN or inf")
        out.append(x)
    if not out:
        raise ValueError(f"{name} is empty")
    return out


class AsyncMicEnhancer(TransformerMixin, BaseEstimator):
    """Multi-microphone enhancer with a pluggable channel-communication module.

    ``fit`` takes mic waveforms ``(n_scenes, M, N)`` (or a list with varying M)
    and target waveforms ``(n_scenes, N)``. ``predict`` / ``transform`` return
    the enhanced waveforms; ``score`` is the negative spectral loss.
    """

    def __init__(self, module_kind="WindowedXAttn", d_hidden=64, n_blocks=2, window_L=4,
                 compression_c=0.3, loss_lambda=0.3, steps=200, batch_size=4, lr=1e-3,
                 optimizer="adam", clip_norm=5.0, sample_rate_hz=dsp.DEFAULT_FS, seed=0):
        self.module_kind = module_kind
        self.d_hidden = d_hidden
        self.n_blocks = n_blocks
        self.window_L = window_L
        self.compression_c = compression_c
        self.loss_lambda = loss_lambda
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.clip_norm = clip_norm
        self.sample_rate_hz = sample_rate_hz
        self.seed = seed

    def _backbone_config(self):
        return BackboneConfig(d_hidden=self.d_hidden, n_blocks=self.n_blocks,
                              module_kind=self.module_kind, window_L=self.window_L,
                              compression_c=self.compression_c, loss_lambda=self.loss_lambda,
                              sample_rate_hz=self.sample_rate_hz)

    def fit(self, X, y):
        scenes = _as_scenes(X)
        targets = [np.asarray(t, dtype=np.float64) for t in (y if not isinstance(y, np.ndarray) or y.ndim > 1 else [y])]
        if len(targets) != len(scenes):
            raise ValueError(f"{len(scenes)} scenes but {len(targets)} targets")
        for i, (x, t) in enumerate(zip(scenes, targets)):
            if t.shape != (x.shape[1],):
                raise ValueError(f"y[{i}] has shape {t.shape}, expected ({x.shape[1]},)")
        if self.steps < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("steps must be >= 0, batch_size >= 1 and lr > 0")
        cfg = self._backbone_config()
        model = Backbone(cfg)
        rng = np.random.default_rng(self.seed)
        store = model.init_params(rng)
        opt = make_optimizer(self.optimizer, self.lr)
        # group by (M, N) so every batch stacks
        groups = {}
        for i, x in enumerate(scenes):
            groups.setdefault(x.shape, []).append(i)
        feats = {k: model.features(np.array([scenes[i] for i in idx])) for k, idx in groups.items()}
        tgts = {k: model.compressed(np.array([targets[i] for i in idx])) for k, idx in groups.items()}
        keys = sorted(groups)
        self.loss_curve_ = []
        for step in range(self.steps):
            k = keys[step % len(keys)]
            n = len(groups[k])
            sel = rng.choice(n, size=min(self.batch_size, n), replace=False)
            spec, cache = model.forward_features(feats[k][sel], store.values)
            loss, dspec = spectral_loss(spec, tgts[k][sel], self.loss_lambda)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {step}")
            grads, _ = model.backward(dspec, cache, store.values, input_grad=False)
            clip_by_global_norm(grads, self.clip_norm)
            opt.step(store.values, grads)
            self.loss_curve_.append(loss)
        self.params_ = store
        self.model_ = model
        self.n_mics_seen_ = sorted({x.shape[0] for x in scenes})
        return self

    @classmethod
    def from_checkpoint(cls, path):
        store, exp, _ = load_checkpoint(path)
        b = exp.backbone
        est = cls(module_kind=b.module_kind, d_hidden=b.d_hidden, n_blocks=b.n_blocks,
                  window_L=b.window_L, compression_c=b.compression_c, loss_lambda=b.loss_lambda,
                  sample_rate_hz=b.sample_rate_hz, seed=exp.seed)
        est.params_ = store
        est.model_ = Backbone(b)
        est.loss_curve_ = []
        est.n_mics_seen_ = []
        return est

    def predict(self, X):
        check_is_fitted(self, "params_")
        scenes = _as_scenes(X)
        out = [self.model_.forward(x, self.params_.values) for x in scenes]
        if isinstance(X, np.ndarray) and X.ndim == 2:
            return out[0]
        return np.array(out) if len({len(o) for o in out}) == 1 else out

    def transform(self, X):
        return self.predict(X)

    def score(self, X, y):
        """Negative mean spectral loss (higher is better)."""
        check_is_fitted(self, "params_")
        scenes = _as_scenes(X)
        targets = [np.asarray(t, dtype=np.float64) for t in (y if not isinstance(y, np.ndarray) or y.ndim > 1 else [y])]
        losses = []
        for x, t in zip(scenes, targets):
            spec, _ = self.model_.forward_features(self.model_.features(x[None]), self.params_.values)
            losses.append(self.model_.loss(spec, t[None])[0])
        return -float(np.mean(losses))

    def get_store(self) -> ParamStore:
        check_is_fitted(self, "params_")
        return self.params_

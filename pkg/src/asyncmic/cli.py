"""Command-line entry point: simulate, train, eval, compare, bench, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 bad invocation or config. Errors
are printed to stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import bench, dsp, gradcheck, scene, train

SEED_ENV = "ASYNC_MIC_SEED"
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    """Bad invocation or config; maps to exit status 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config helpers


def _load_json(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return data


def apply_overrides(cfg, overrides):
    """Apply ``a.b=value`` pairs; values are parsed as JSON when possible."""
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return cfg


def resolve_seed(arg_seed, config_seed=None):
    """``--seed`` wins, then the environment variable, then the config, then 0."""
    if arg_seed is not None:
        return int(arg_seed)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None
    return int(config_seed) if config_seed is not None else 0


def _out_dir(path):
    if path is None:
        raise UsageError("--out is required")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from None
    return out


def _experiment(args):
    cfg = apply_overrides(_load_json(args.config), args.overrides)
    cfg["seed"] = resolve_seed(args.seed, cfg.get("seed"))
    try:
        return train.ExperimentConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad experiment config: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands


def _simulate_one(job):
    spec, out = job
    out_scene = scene.mix_scene(spec)
    scene.save_scene(out_scene, out)
    return str(out)


def cmd_simulate(args):
    cfg = apply_overrides(_load_json(args.config), args.overrides)
    out = _out_dir(args.out)
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    base_seed = resolve_seed(args.seed, cfg.get("seed"))
    jobs = []
    try:
        if "room" in cfg:
            base = scene.SceneSpec.from_dict(cfg).validate()
            for i in range(args.count):
                seed = base_seed if args.count == 1 else _derive(base_seed, i)
                spec = scene.SceneSpec.from_dict({**base.to_dict(), "seed": seed}).validate()
                jobs.append((spec, out / f"scene_{i:03d}"))
        else:
            dist_cfg = dict(cfg)
            dist_cfg.pop("seed", None)
            preset = dist_cfg.pop("preset", "default")
            dist = scene.SceneDistribution.preset(
                preset, **{k: tuple(v) if isinstance(v, list) else v for k, v in dist_cfg.items()})
            for i in range(args.count):
                rng = np.random.default_rng(np.random.SeedSequence([base_seed, i]))
                jobs.append((dist.sample(rng, seed=_derive(base_seed, i)), out / f"scene_{i:03d}"))
    except (scene.ConfigError, scene.GeometryError):
        raise
    except (TypeError, KeyError, ValueError) as exc:
        raise UsageError(f"bad scene config: {exc}") from None
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            dirs = list(pool.map(_simulate_one, jobs))
    else:
        dirs = [_simulate_one(j) for j in jobs]
    for d in dirs:
        print(d)
    return 0


def _derive(seed, i):
    return int(np.random.SeedSequence([seed, i]).generate_state(1, np.uint64)[0] >> 1)


def cmd_train(args):
    cfg = _experiment(args)
    out = _out_dir(args.out)
    res = train.train(cfg, out, log_every=args.log_every)
    print(json.dumps({"checkpoint": str(res.checkpoint), "final_val_loss": res.final_val_loss}))
    return 0


def _eval_set(args, cfg):
    if args.scenes:
        path = Path(args.scenes)
        if path.is_dir():
            specs = sorted(path.glob("*/spec.json"))
            return [scene.SceneSpec.from_json(p) for p in specs]
        if path.is_file():
            data = json.loads(path.read_text())
            items = data if isinstance(data, list) else data.get("scenes", [])
            return [scene.SceneSpec.from_dict(d) for d in items]
        raise UsageError(f"scene set not found: {args.scenes}")
    return cfg.make_task("test").examples(args.count)


def cmd_eval(args):
    if not args.checkpoint or not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    out = _out_dir(args.out)
    store, cfg, step = train.load_checkpoint(args.checkpoint)
    try:
        eval_set = _eval_set(args, cfg)
    except (TypeError, KeyError, ValueError) as exc:
        raise UsageError(f"bad scene set: {exc}") from None
    rows, summary = train.evaluate((store, cfg, step), eval_set, out / "eval_scenes.csv")
    summaries = [] if summary is None else [summary.as_csv()]
    dsp.write_csv_rows(out / "metrics.csv", summaries, list(train.METRIC_FIELDS))
    print(json.dumps({"n_scenes": len(rows), "summary": summaries[0] if summaries else None}))
    return 0


def cmd_compare(args):
    cfg = _experiment(args)
    out = _out_dir(args.out)
    kinds = [k for k in args.kinds.split(",") if k]
    try:
        kinds = [train.BackboneConfig(module_kind=k).module_kind for k in kinds]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not kinds:
        raise UsageError("--kinds must name at least one module")
    comp = train.compare_modules(cfg, kinds, out, n_eval=args.count)
    print(json.dumps(comp.final_val_losses()))
    return 0


def cmd_bench(args):
    cfg = apply_overrides(_load_json(args.config), args.overrides)
    out = _out_dir(args.out)
    cfg.pop("seed", None)
    try:
        bcfg = bench.BenchConfig(**cfg, seed=resolve_seed(args.seed))
    except TypeError as exc:
        raise UsageError(f"bad bench config: {exc}") from None
    rows = bench.run_bench(bcfg)
    dsp.write_csv_rows(out / "bench.csv", rows, list(bench.BENCH_FIELDS))
    ratios = bench.doubling_ratios(rows)
    dsp.write_csv_rows(out / "ratios.csv", ratios,
                       ["kind", "M", "L", "d", "T0", "T1", "memory_ratio", "time_ratio"])
    for r in ratios:
        print(f"{r['kind']} M={r['M']} L={r['L']} memory_ratio={r['memory_ratio']:.3f} "
              f"time_ratio={r['time_ratio']:.3f}")
    return 0


def cmd_gradcheck(args):
    seed = resolve_seed(args.seed)
    errs = gradcheck.run_all(seed)
    for name, err in errs.items():
        print(f"{name} max_rel_err={err:.3e}")
    return 0 if all(e < GRADCHECK_TOL for e in errs.values()) else 1


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "eval": cmd_eval,
            "compare": cmd_compare, "bench": cmd_bench, "gradcheck": cmd_gradcheck}


def build_parser():
    p = _Parser(prog="asyncmic", description="Asynchronous ad-hoc microphone array toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, config=True, out=True):
        if config:
            sp.add_argument("--config", help="JSON config file")
        if out:
            sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help=f"seed (falls back to ${SEED_ENV})")
        sp.add_argument("--workers", type=int, default=1, help="parallel workers (1 = deterministic)")
        sp.add_argument("overrides", nargs="*", help="key=value config overrides")
        return sp

    sp = common(sub.add_parser("simulate", help="render scenes to WAV + metadata"))
    sp.add_argument("--count", type=int, default=1)
    sp = common(sub.add_parser("train", help="train one model"))
    sp.add_argument("--log-every", type=int, default=100)
    sp = common(sub.add_parser("eval", help="evaluate a checkpoint"), config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scenes", help="directory of simulated scenes or JSON list of scene specs")
    sp.add_argument("--count", type=int, default=20, help="held-out scenes when --scenes is absent")
    sp = common(sub.add_parser("compare", help="train and compare modules"))
    sp.add_argument("--kinds", default="TAC,WindowedXAttn")
    sp.add_argument("--count", type=int, default=20, help="held-out evaluation scenes")
    common(sub.add_parser("bench", help="attention memory/time benchmark"))
    common(sub.add_parser("gradcheck", help="finite-difference gradient checks"), config=False, out=False)
    return p


def _fail(status, exc):
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit": status}), file=sys.stderr)
    return status


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be >= 1")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail(2, exc)
    except (scene.ConfigError, scene.GeometryError) as exc:
        return _fail(2, exc)
    except Exception as exc:  # runtime failure
        return _fail(1, exc)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Exit codes: 0 success, 2 config/validation error, 3 I/O error, 4 evaluator error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import io
from .config import ConfigError, RunConfig, config_to_dict, defaults_yaml, load_config
from .evaluator import (EvaluationError, TransferFunction, error_db, insertion_loss,
                        passband, passband_iou, surrogate_eval, surrogate_eval_arrays)
from .geometry import (CompoundAction, GeometryConfig, InvalidActionError, make_boundary,
                       map_actions, map_actions_batch, random_actions)
from .trainer import HISTORY_FIELDS, SurrogateEvaluator, Trainer

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_EVAL = 0, 2, 3, 4

log = logging.getLogger("resinv")


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg.with_overrides(seed=getattr(args, "seed", None), out=getattr(args, "out", None),
                              n=getattr(args, "n", None),
                              iterations=getattr(args, "iterations", None),
                              evaluator=getattr(args, "evaluator", None))


def _make_evaluator(cfg: RunConfig):
    if cfg.evaluator == "builtin":
        return SurrogateEvaluator(cfg.surrogate)
    from .external import ExternalEvaluator
    return ExternalEvaluator(cfg.evaluator, cfg.evaluator_max_in_flight, cfg.evaluator_timeout,
                             geometry=cfg.geometry)


# --- train ------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    target = io.read_target(args.target)
    out = Path(cfg.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
    io.write_target(out / "target.json", target)

    evaluator = _make_evaluator(cfg)
    trainer = Trainer(cfg.train, target, cfg.geometry, evaluator, cfg.policy)
    extra = {"surrogate": cfg.surrogate.to_dict(), "threshold_db": cfg.threshold_db}

    hist_fh = open(out / "history.csv", "w", newline="")
    writer = csv.writer(hist_fh, lineterminator="\n")
    writer.writerow(HISTORY_FIELDS)
    rows = []

    def on_iteration(row, tr):
        rows.append(row)
        writer.writerow([row["iteration"]] + [io._float(row[f]) for f in HISTORY_FIELDS[1:]])
        t = row["iteration"]
        if t % cfg.train.checkpoint_every == 0:
            io.save_checkpoint(out / "checkpoints" / f"policy_{t:06d}.json", tr.state.policy, t,
                               cfg.seed, geometry=cfg.geometry, target=target, extra=extra)
        if t % 50 == 0 or t == 1:
            log.info("iteration %d  mean %.3f  running %.3f  best %.3f", t,
                     row["mean_reward"], row["running_reward"], row["best_reward"])

    try:
        result = trainer.run(callback=on_iteration)
    finally:
        hist_fh.close()
        if hasattr(evaluator, "close"):
            evaluator.close()

    st = result.state
    io.save_checkpoint(out / "policy.json", st.policy, st.iteration, cfg.seed,
                       geometry=cfg.geometry, target=target, extra=extra)
    io.write_design(out / "best_design.json", result.best.design)
    io.write_target(out / "best_s21.json", result.best.response)
    io.write_response_csv(out / "best_response.csv", result.best.response)
    if args.plot:
        from . import plotting
        plotting.plot_history(rows, out / "history.png")
        plotting.plot_response(out / "response.png", target, result.best.response,
                               f"best error {-result.best.reward:.3f} dB")
        plotting.plot_layout(result.best.design, out / "layout.png")
    print(f"best error_db {-result.best.reward:.6f}")
    return EXIT_OK


# --- synth-target -----------------------------------------------------------------

def synth_target(n: int, seed: int, cfg: RunConfig | None = None):
    """A random valid design for ``(n, seed)`` and its surrogate response."""
    cfg = cfg or RunConfig()
    rng = np.random.default_rng([seed, n, 0x7A6])
    action = CompoundAction.from_flat(random_actions(n, 1, rng)[0], n)
    g = cfg.geometry
    design = map_actions(action, g.L, g.g_min_ratio, g.g_max_ratio, g.n_budget, g.mode)
    return design, surrogate_eval(design, cfg.surrogate)


def cmd_synth_target(args) -> int:
    cfg = _load_cfg(args)
    n = cfg.train.n
    seed = cfg.seed
    design, tf = synth_target(n, seed, cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_target(out / f"target_{n}_{seed}.json", tf)
    io.write_design(out / f"truth_{n}_{seed}.json", design)
    print(out / f"target_{n}_{seed}.json")
    return EXIT_OK


# --- eval ---------------------------------------------------------------------------

def evaluate_design(design, freqs, cfg: RunConfig) -> TransferFunction:
    if cfg.evaluator == "builtin":
        return surrogate_eval(design, cfg.surrogate, freqs)
    from .external import external_eval
    res = external_eval([design], freqs, cfg.evaluator, cfg.evaluator_max_in_flight,
                        cfg.evaluator_timeout)[0]
    if isinstance(res, Exception):
        raise res
    return res


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    design = io.read_design(args.design)
    target = io.read_target(args.target)
    cand = evaluate_design(design, target.freqs, cfg)
    err = error_db(target, cand)
    iou = passband_iou(target, cand, cfg.threshold_db)
    il = insertion_loss(cand, passband(target, cfg.threshold_db))
    out = Path(args.out) if args.out else Path(args.design).parent
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.design).stem
    io.write_response_csv(out / f"{stem}_response.csv", cand)
    if args.plot:
        from . import plotting
        plotting.plot_response(out / f"{stem}_response.png", target, cand,
                               f"error {err:.3f} dB, IOU {iou:.2f}")
        plotting.plot_layout(design, out / f"{stem}_layout.png")
    print(f"error_db {err:.6f}")
    print(f"passband_iou {iou:.6f}")
    print(f"insertion_loss_db {il:.6f}")
    return EXIT_OK


# --- sample -------------------------------------------------------------------------

def cmd_sample(args) -> int:
    policy, data = io.load_checkpoint(args.checkpoint)
    n = policy.n
    geometry = GeometryConfig(**data["geometry"]) if "geometry" in data else GeometryConfig()
    seed = args.seed if args.seed is not None else data.get("rng_state", {}).get("seed", 0)
    batch = policy.sample(args.count, np.random.default_rng([seed, 0x5A4D]))
    designs = map_actions_batch(batch.actions, n, geometry)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "samples"
    out.mkdir(parents=True, exist_ok=True)

    rewards = None
    if "target" in data:
        from .evaluator import SurrogateConfig, error_db_mag
        target = io.target_from_dict(data["target"])
        scfg = SurrogateConfig(**data["surrogate"]) if "surrogate" in data else SurrogateConfig()
        mags = np.abs(surrogate_eval_arrays(designs, scfg, target.freqs))
        rewards = -error_db_mag(target.mag, mags)

    with open(out / "samples.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "file", "reward"])
        for k in range(args.count):
            name = f"design_{k:04d}.json"
            io.write_design(out / name, designs.design(k, geometry.g_min_ratio,
                                                        geometry.g_max_ratio, geometry.n_budget))
            r = "" if rewards is None else io._float(rewards[k])
            w.writerow([k, name, r])
            print(name if rewards is None else f"{name} reward {rewards[k]:.6f}")
    return EXIT_OK


# --- report -------------------------------------------------------------------------

def cmd_report(args) -> int:
    from . import plotting
    from .config import config_from_dict

    run = Path(args.run)
    rows = io.read_history(run / "history.csv")
    plotting.plot_history(rows, run / "history.png")
    best = io.read_target(run / "best_s21.json")
    target = io.read_target(run / "target.json") if (run / "target.json").exists() else None
    title = f"best error {error_db(target, best):.3f} dB" if target is not None else ""
    plotting.plot_response(run / "response.png", target, best, title)
    design = io.read_design(run / "best_design.json")
    if (run / "config.yaml").exists():
        cfg = config_from_dict(yaml.safe_load((run / "config.yaml").read_text()))
        g = cfg.geometry
        budget = design.n if g.n_budget is None else g.n_budget
        design = replace(design, boundary=make_boundary(budget, design.side, g.g_min_ratio,
                                                        g.g_max_ratio))
    plotting.plot_layout(design, run / "layout.png")
    for name in ("history.png", "response.png", "layout.png"):
        print(run / name)
    return EXIT_OK


# --- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="resinv", description=__doc__.splitlines()[0])
    p.add_argument("--print-defaults", action="store_true",
                   help="print the default run config as YAML and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    def common(sp, target=False):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--evaluator", help="builtin | exec:<cmd> | tcp:<host:port>")
        if target:
            sp.add_argument("--target", required=True, help="target/v1 file")

    sp = sub.add_parser("train", help="train a policy against a target")
    common(sp, target=True)
    sp.add_argument("--n", type=int, help="number of resonators")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--plot", action="store_true", help="also render PNG figures")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("synth-target", help="synthesize a target from a random design")
    common(sp)
    sp.add_argument("--n", type=int)
    sp.set_defaults(func=cmd_synth_target)

    sp = sub.add_parser("eval", help="evaluate a design against a target")
    common(sp, target=True)
    sp.add_argument("--design", required=True, help="design/v1 file")
    sp.add_argument("--plot", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sample", help="sample designs from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("report", help="render figures for a finished run directory")
    sp.add_argument("--run", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_defaults:
        sys.stdout.write(defaults_yaml())
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    if getattr(args, "count", 1) < 1:
        print("error: --count must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, io.FormatError, InvalidActionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EvaluationError as exc:
        print(f"evaluator error: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except OSError as exc:
        name = f" {exc.filename}" if getattr(exc, "filename", None) else ""
        print(f"I/O error:{name} {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

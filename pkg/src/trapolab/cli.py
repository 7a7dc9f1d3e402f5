"""Command line: ``trapolab <subcommand> [options]``.

Exit codes: 0 ok, 2 usage, 3 config, 4 runtime, 5 IO.

Distribution files (``fixedpoint --probs-file``) hold plain decimal
numbers separated by whitespace, commas or semicolons; ``#`` starts a
comment.  The values must sum to 1 within 1e-9 unless ``--renormalize``
is given.  :func:`trapolab.dist.format_probs` writes this format.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import shutil
import sys
from pathlib import Path

from trapolab.config import ExperimentConfig
from trapolab.errors import ConfigError, MissingMetrics, SpecInvalid, TrapoError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4, 5


class RunDirExists(OSError):
    pass


# -- shared helpers -------------------------------------------------------------

def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args, extra: dict | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = _parse_set(args.set)
    overrides.update({k: v for k, v in (extra or {}).items() if v is not None})
    return cfg.with_overrides(overrides)


def _run_dir(root, prefix: str, cfg: ExperimentConfig, seed: int, force: bool) -> Path:
    path = Path(root) / f"{prefix}-{cfg.hash()}-s{seed}"
    if path.exists():
        if not force:
            raise RunDirExists(f"run directory {path} already exists (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True)
    (path / "config.txt").write_text(cfg.to_text())
    return path


def _load_tasks(cfg: ExperimentConfig):
    from trapolab.env import generate_tasks, load_tasks

    if cfg["tasks.path"]:
        tasks, family = load_tasks(cfg["tasks.path"])
        if not tasks:
            raise ConfigError(f"task file {cfg['tasks.path']} holds no tasks")
        return tasks, family or cfg.family()
    family = cfg.family()
    return generate_tasks(family, cfg["tasks.count"], cfg["tasks.seed"]), family


# -- subcommands -----------------------------------------------------------------

def cmd_gen_tasks(args) -> int:
    from trapolab.env import generate_tasks, save_tasks

    cfg = _config(args, {"tasks.count": args.count, "tasks.seed": args.seed})
    family = cfg.family()
    tasks = generate_tasks(family, cfg["tasks.count"], cfg["tasks.seed"])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_tasks(tasks, args.out, family)
    print(f"wrote {len(tasks)} tasks ({sum(t.hard for t in tasks)} hard) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from trapolab.trainer import MICRO_REGIMES, train

    cfg = _config(args, {"train.regime": args.regime, "train.seed": args.seed, "tasks.path": args.tasks})
    tasks, family = _load_tasks(cfg)
    tcfg = cfg.train_config(tasks, family)
    run = _run_dir(args.runs_dir, cfg["train.regime"], cfg, cfg["train.seed"], args.force)

    trace = cfg["micro.trace"] and tcfg.regime in MICRO_REGIMES
    guidance = open(run / "guidance.jsonl", "w") if trace else contextlib.nullcontext()
    with open(run / "metrics.jsonl", "w") as mf, guidance as gf:
        def on_metrics(rec):
            mf.write(rec.to_json() + "\n")

        def on_groups(step, groups):
            for slot, g in enumerate(groups):
                gf.write(json.dumps({
                    "step": step, "slot": slot, "task": g.task.task_id,
                    "decisions": [[d.group, d.pass_rate, d.threshold, d.guided, d.ratio,
                                   d.expert_index, d.prefix_len] for d in g.decisions],
                    "rewards": [t.reward for t in g.trajectories],
                }) + "\n")

        def on_checkpoint(step, policy):
            (run / "checkpoints").mkdir(exist_ok=True)
            policy.save(run / "checkpoints" / f"step-{step:06d}.json")

        result = train(tcfg, on_metrics, on_groups if trace else None, on_checkpoint)
    result.policy.save(run / "policy.json")
    summary = {"regime": tcfg.regime, "seed": tcfg.seed, "steps": tcfg.steps,
               "final_unguided_reward": result.final_reward, "vocab_size": result.policy.vocab.size}
    (run / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"run directory: {run}")
    print(f"final unguided reward: {result.final_reward:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from trapolab.policy import ContextSoftmaxPolicy
    from trapolab.trainer import pass_at_k

    run = Path(args.run) if args.run else None
    if run is not None and not args.config and (run / "config.txt").exists():
        args.config = str(run / "config.txt")
    cfg = _config(args, {"tasks.path": args.tasks})
    ckpt = Path(args.checkpoint) if args.checkpoint else (run / "policy.json" if run else None)
    if ckpt is None:
        raise ConfigError("eval needs --checkpoint or --run")
    policy = ContextSoftmaxPolicy.load(ckpt)
    tasks, _ = _load_tasks(cfg)
    n = cfg["eval.n"]
    results = {}
    for k in cfg["eval.k"]:
        results[f"pass@{k}"] = pass_at_k(policy, tasks, k, n, cfg["eval.temperature"],
                                         cfg["eval.seed"], cfg["policy.max_len"])
    for name, v in results.items():
        print(f"{name}\t{v:.6f}")
    if run is not None:
        (run / "eval.json").write_text(json.dumps({"n": n, **results}, indent=1) + "\n")
    return EXIT_OK


def cmd_fixedpoint(args) -> int:
    from trapolab.dist import parse_probs, total_variation
    from trapolab.fixed_point import brute_force_endpoint, solve_lambda

    text = Path(args.probs_file).read_text() if args.probs_file else args.probs
    p = parse_probs(text, renormalize=args.renormalize)
    sol = solve_lambda(p, args.alpha)
    fmt = lambda v: "(" + ", ".join(f"{x:.6g}" for x in v) + ")"  # noqa: E731
    print(f"lambda = {sol.lam:.6g}")
    print(f"pi* = {fmt(sol.optimal.probs)}")
    print(f"kept = {list(sol.kept)}  boundary = {list(sol.boundary)}  fixed point = {sol.is_fixed_point}")
    print("symbol\tp\tpi*\tkept")
    for i, (pi, qi) in enumerate(zip(p.probs, sol.optimal.probs)):
        print(f"{i}\t{pi:.6g}\t{qi:.6g}\t{int(i in sol.kept)}")
    record = {"alpha": args.alpha, "p": p.probs.tolist(), "lambda": sol.lam, "kept": list(sol.kept),
              "boundary": list(sol.boundary), "pi_star": sol.optimal.probs.tolist(),
              "is_fixed_point": sol.is_fixed_point}
    status = EXIT_OK
    if not args.no_oracle:
        q = brute_force_endpoint(p, args.alpha)
        tv = total_variation(sol.optimal, q)
        verdict = "agree" if tv <= 1e-3 else "DISAGREE"
        print(f"oracle: projected gradient {fmt(q.probs)}  TV = {tv:.2e}  {verdict}")
        record.update(oracle=q.probs.tolist(), oracle_tv=tv, oracle_agrees=tv <= 1e-3)
        if tv > 1e-3:
            status = EXIT_RUNTIME
    if args.record:
        Path(args.record).write_text(json.dumps(record) + "\n")
    return status


def cmd_gmm(args) -> int:
    from trapolab.gmm import canonical_expert, canonical_target, quadrature_grid, train_mimic, void_region
    from trapolab.plotting import density_panels, line_plot

    cfg = _config(args, {"gmm.objective": args.objective, "gmm.seed": args.seed})
    if cfg["gmm.objective"] not in ("sft", "trsft"):
        raise ConfigError("gmm.objective must be sft or trsft")
    sigma = cfg["gmm.sigma"]
    if sigma <= 0:
        raise ConfigError("gmm.sigma must be positive")
    expert, init = canonical_expert(sigma), canonical_target(sigma)
    steps = cfg["gmm.steps"]
    run = _run_dir(args.runs_dir, f"gmm-{cfg['gmm.objective']}", cfg, cfg["gmm.seed"], args.force)
    trace = train_mimic(expert, init, cfg["gmm.objective"], steps=steps, lr=cfg["gmm.lr"],
                        batch=cfg["gmm.batch"], seed=cfg["gmm.seed"], alpha_c_ratio=cfg["gmm.alpha_c_ratio"],
                        eps=cfg["gmm.eps"], kl_samples=cfg["gmm.kl_samples"],
                        snapshot_steps=tuple(s for s in cfg["gmm.snapshots"] if s <= steps))
    with open(run / "metrics.tsv", "w") as fh:
        fh.write("step\tkl\tvoid_mass\n")
        for t, kl, vm in trace.records():
            fh.write(f"{t}\t{kl!r}\t{vm!r}\n")
    snaps = {str(t): m.to_json() for t, m in sorted(trace.snapshots.items())}
    (run / "snapshots.json").write_text(json.dumps({"objective": trace.objective, "alpha_c": trace.alpha_c,
                                                    "eps": trace.eps, "snapshots": snaps}, indent=1) + "\n")
    grid = quadrature_grid(expert, init)
    density_panels(run / "density.svg", grid, expert.density(grid),
                   [(f"step {t}", m.density(grid)) for t, m in sorted(trace.snapshots.items())],
                   void_region(expert, init, trace.eps, grid))
    line_plot(run / "curves.svg", [("KL", trace.steps, trace.kl)], ylabel="forward KL estimate",
              title=f"{trace.objective}: KL")
    print(f"run directory: {run}")
    print(f"KL: {trace.kl[0]:.4f} -> {trace.kl[-1]:.4f}; void mass: initial {trace.void_mass[0]:.4g}, "
          f"peak {trace.peak_void_mass:.4g} at step {int(trace.void_mass.argmax())}, final {trace.void_mass[-1]:.4g}")
    return EXIT_OK


def cmd_report(args) -> int:
    from trapolab.report import render_report

    cfg = _config(args)
    size = (cfg["report.width"], cfg["report.height"])
    if min(size) <= 0:
        raise ConfigError("report.width and report.height must be positive")
    written = render_report([Path(d) for d in args.runs], Path(args.out), size=size)
    for path in written:
        print(path)
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trapolab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, runs=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if runs:
            p.add_argument("--runs-dir", default="runs", help="parent of run directories")
            p.add_argument("--force", action="store_true", help="overwrite an existing run directory")

    p = sub.add_parser("gen-tasks", help="write a task set")
    common(p, runs=False)
    p.add_argument("--out", default="tasks.jsonl")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_tasks)

    p = sub.add_parser("train", help="train one regime")
    common(p)
    p.add_argument("--regime")
    p.add_argument("--seed", type=int)
    p.add_argument("--tasks", help="task file (overrides tasks.path)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="pass@k of a checkpoint")
    common(p, runs=False)
    p.add_argument("--run", help="run directory (uses its config and policy)")
    p.add_argument("--checkpoint")
    p.add_argument("--tasks")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fixedpoint", help="solve the trust-region optimum of a categorical")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--probs", help="comma separated probabilities")
    src.add_argument("--probs-file", help="distribution file (see module docs)")
    p.add_argument("--record", help="also write the result as a JSON record to this path")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--renormalize", action="store_true")
    p.add_argument("--no-oracle", action="store_true", help="skip the projected-gradient check")
    p.set_defaults(func=cmd_fixedpoint)

    p = sub.add_parser("gmm", help="fit a two-mode GMM to a three-mode expert")
    common(p)
    p.add_argument("--objective", choices=("sft", "trsft"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gmm)

    p = sub.add_parser("report", help="tables and SVG plots from run directories")
    common(p, runs=False)
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, SpecInvalid) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingMetrics, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrapoError, ValueError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

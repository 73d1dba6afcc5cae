"""Command-line entry point: one subcommand per pipeline stage plus ``e2e``.

Exit codes: 0 success, 1 usage error, 2 data validation error, 3 numerical abort.
"""

from __future__ import annotations

import os
import sys

# BLAS pools must be capped before numpy loads
_THREADS = os.environ.get("BATCHRL_THREADS")
if _THREADS is not None and _THREADS.strip().isdigit():
    _n = str(max(int(_THREADS), 1))
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _n)

import argparse
import csv
import json
import logging
import tempfile
from pathlib import Path
from typing import List, Sequence

from .checkpoint import CheckpointError, ModelCheckpoint
from .cpe import REWARD, CpeError
from .data import DISCRETE, PARAMETRIC, ActionSpace, DataError, TransitionData
from .envs import CartPole, EnvError, Gridworld, PointMass, evaluate_greedy, generate_logged_data
from .normalization import (
    FeatureKind,
    NormalizationError,
    Preprocessor,
    collect_columns,
    fit_features,
    load_specs,
    save_specs,
    split_state_action,
)
from .rl.dqn import NumericalError
from .rl.policy import PidController, parse_mode
from .serving import Scorer, ScoringError, batch_score
from .timeline import TimelineError, read_transitions, run_timeline, timeline_join, write_jsonl
from .trainer import CHECKPOINT_NAME, TrainConfig, evaluate_checkpoint, train
from .understanding import EnvDataset, EnvModelConfig, UnderstandingError, run_checks

logger = logging.getLogger("batchrl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
DATA_ERRORS = (
    TimelineError,
    NormalizationError,
    DataError,
    CheckpointError,
    CpeError,
    ScoringError,
    EnvError,
    UnderstandingError,
    FileNotFoundError,
)
CONFIG_DIR = Path(__file__).parent / "configs"
ENVS = {"gridworld": Gridworld, "cartpole": CartPole, "pointmass": PointMass}
# behavior policy and logged transitions for e2e runs
E2E_DEFAULTS = {
    "gridworld": ("eps:0.3", 10_000),
    "cartpole": ("uniform", 50_000),
    "pointmass": ("uniform", 20_000),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _check_mode(mode: str) -> None:
    try:
        parse_mode(mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _require(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"no such file: {p}")


def _build_td(transitions, norm_path, reward_weights=None) -> TransitionData:
    state_specs, action_specs = split_state_action(load_specs(norm_path))
    space = ActionSpace.infer(transitions)
    # continuous actions stay in raw [-1, 1] units to match the tanh actor
    action_pre = Preprocessor(action_specs) if action_specs and space.kind == PARAMETRIC else None
    return TransitionData(transitions, Preprocessor(state_specs), space, reward_weights, action_pre)


def _cpe_rows(report) -> List[dict]:
    return [e.to_dict() for e in report]


def _write_cpe(path: str | Path, rows: List[dict], epoch: int | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = [{"epoch": epoch, **r} for r in rows]
    path.write_text(json.dumps(doc, indent=1))
    with path.with_suffix(".csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "metric", "estimator", "raw", "normalized"])
        for r in doc:
            w.writerow([r["epoch"], r["metric"], r["estimator"], r["raw"], r["normalized"]])


def _print_cpe(rows: Sequence[dict], out=None) -> None:
    out = out or sys.stdout
    print(f"{'estimator':<28}{'raw':>14}{'normalized':>14}", file=out)
    for r in rows:
        if r["metric"] == REWARD:
            print(f"{r['estimator']:<28}{r['raw']:>14.6g}{r['normalized']:>14.6g}", file=out)


# ---------------------------------------------------------------- subcommands


def cmd_timeline(args) -> int:
    _require(args.input, args.reward_weights)
    n = run_timeline(args.input, args.output, args.reward_weights)
    logger.info("wrote %d transitions to %s", n, args.output)
    return EXIT_OK


def _parse_overrides(items: Sequence[str]) -> dict:
    out = {}
    for item in items or ():
        feature, sep, kind = item.partition("=")
        if not sep or not feature:
            raise UsageError(f"--override expects <feature>=<kind>, got {item!r}")
        try:
            out[feature] = FeatureKind(kind)
        except ValueError:
            raise UsageError(f"unknown feature kind {kind!r}; expected one of {[k.value for k in FeatureKind]}")
    return out


def cmd_normalize(args) -> int:
    _require(args.input)
    overrides = _parse_overrides(args.override)
    transitions = read_transitions(args.input)
    cols = collect_columns(transitions, args.sample, args.seed)
    unknown = sorted(set(overrides) - set(cols))
    if unknown:
        raise NormalizationError(f"overrides name unknown features: {unknown}")
    specs = fit_features(cols, overrides)
    save_specs(args.output, specs)
    logger.info("wrote %d feature specs to %s", len(specs), args.output)
    return EXIT_OK


def cmd_understand(args) -> int:
    _require(args.input, args.norm)
    td = _build_td(read_transitions(args.input), args.norm)
    ds = EnvDataset.from_transition_data(td)
    report = run_checks(ds, cfg=EnvModelConfig(k=args.k, seed=args.seed, epochs=args.epochs))
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(json.dumps(report.to_dict(), indent=1))
    for note in report.explanations:
        print(note)
    return EXIT_OK


def _load_config(args) -> TrainConfig:
    _require(args.config)
    cfg = TrainConfig.load(args.config).to_dict()
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg["epochs"] = args.epochs
    return TrainConfig.from_dict(cfg)


def cmd_train(args) -> int:
    _require(args.input, args.norm, args.resume)
    cfg = _load_config(args)
    td = _build_td(read_transitions(args.input), args.norm, cfg.reward_weights)
    result = train(cfg, td, args.out, args.resume)
    if result.history and result.history[-1]["cpe"]:
        _print_cpe(result.history[-1]["cpe"])
    logger.info("checkpoint at %s", Path(args.out) / CHECKPOINT_NAME)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _require(args.model, args.input)
    _check_mode(args.target_policy)
    ckpt = ModelCheckpoint.load(args.model)
    _, report = evaluate_checkpoint(ckpt, read_transitions(args.input), args.target_policy, args.seed)
    rows = _cpe_rows(report)
    _write_cpe(args.report, rows, ckpt.state.get("epoch"))
    _print_cpe(rows)
    return EXIT_OK


def cmd_score(args) -> int:
    _require(args.model, args.input)
    ckpt = ModelCheckpoint.load(args.model)
    pid = None
    policy = args.policy
    if args.pid_target is not None:
        if policy != "threshold":
            raise UsageError("--pid-target needs --policy threshold")
        pid = PidController(args.kp, args.ki, args.kd, args.pid_target, threshold=args.threshold)
    elif policy != "threshold":
        _check_mode(policy)
    scorer = Scorer(ckpt, seed=args.seed, pid=pid, pid_window=args.pid_window, threshold=args.threshold)
    rows = args.rows or str(Path(args.out).with_suffix("")) + ".rows.jsonl"
    result = batch_score(scorer, args.input, args.out, rows, policy)
    logger.info("scored %d requests, %d errors", result.scored, len(result.errors))
    if scorer.pid is not None:
        logger.info("final threshold %.6f", scorer.pid.threshold)
    return EXIT_DATA if result.errors else EXIT_OK


def cmd_run_env(args) -> int:
    if args.episodes is None and args.min_rows is None:
        raise UsageError("run-env needs --episodes or --min-rows")
    env = ENVS[args.env]()
    rows = generate_logged_data(env, args.policy, args.episodes, args.seed, args.min_rows)
    n = write_jsonl(args.out, (_row_dict(r) for r in rows))
    logger.info("wrote %d rows to %s", n, args.out)
    return EXIT_OK


def _row_dict(row) -> dict:
    d = row.to_dict()
    return {k: v for k, v in d.items() if v is not None}


def _greedy_eval(env, ckpt: ModelCheckpoint):
    scorer = Scorer(ckpt, seed=0)
    if isinstance(env, PointMass):
        def act(features):
            x = scorer.state_pre.transform(features)
            return scorer.learner.act(x)[:, 0]

        return evaluate_greedy(env, act)
    order = [scorer.action_space.index(a) for a in env.actions]

    def values(features):
        return scorer.learner.q_values(scorer.state_pre.transform(features))[:, order]

    return evaluate_greedy(env, values)


def cmd_e2e(args) -> int:
    env = ENVS[args.env]()
    policy, n_rows = E2E_DEFAULTS[args.env]
    policy = args.policy or policy
    n_rows = args.transitions or n_rows
    work = Path(args.workdir) if args.workdir else Path(tempfile.mkdtemp(prefix=f"batchrl-{args.env}-"))
    work.mkdir(parents=True, exist_ok=True)
    config = args.config or CONFIG_DIR / f"{args.env}.json"
    _require(config)

    rows_path, trans_path, norm_path = work / "rows.jsonl", work / "transitions.jsonl", work / "norm.json"
    rows = generate_logged_data(env, policy, seed=args.seed, min_rows=n_rows)
    write_jsonl(rows_path, (_row_dict(r) for r in rows))
    n = run_timeline(rows_path, trans_path)
    logger.info("logged %d rows, joined %d transitions (%s)", len(rows), n, policy)
    transitions = read_transitions(trans_path)
    save_specs(norm_path, fit_features(collect_columns(transitions)))

    if not args.skip_understand:
        td = _build_td(transitions, norm_path)
        report = run_checks(EnvDataset.from_transition_data(td), cfg=EnvModelConfig(seed=args.seed))
        (work / "understanding.json").write_text(json.dumps(report.to_dict(), indent=1))
        for note in report.explanations:
            logger.info("understand: %s", note)

    cfg = TrainConfig.load(config).to_dict()
    cfg["seed"] = args.seed
    cfg = TrainConfig.from_dict(cfg)
    td = _build_td(transitions, norm_path, cfg.reward_weights)
    result = train(cfg, td, work / "model")
    ckpt = result.checkpoint

    ev = _greedy_eval(env, ckpt)
    print(f"greedy policy value {ev.value:.6g} oracle {ev.oracle:.6g} ratio {ev.ratio:.4f}")
    if td.action_space.kind == DISCRETE:
        # fresh behavior data for the final CPE table
        fresh = timeline_join(generate_logged_data(env, policy, seed=args.seed + 1, min_rows=n_rows // 5))
        _, report = evaluate_checkpoint(ckpt, fresh, cfg.target_policy, args.seed)
        rows_out = _cpe_rows(report)
        _write_cpe(work / "cpe.json", rows_out, ckpt.state.get("epoch"))
        _print_cpe(rows_out)
    else:
        print("CPE skipped: continuous actions")
    print(f"artifacts in {work}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="batchrl", description="Offline RL pipeline: join, normalize, check, train, evaluate, serve.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    s = sub.add_parser("timeline", help="join logged rows into transitions", formatter_class=fmt)
    s.add_argument("--input", required=True, help="logged rows (JSONL)")
    s.add_argument("--output", required=True, help="transitions (JSONL)")
    s.add_argument("--reward-weights", default=None, help="JSON map metric -> weight")
    s.set_defaults(func=cmd_timeline)

    s = sub.add_parser("normalize", help="identify and fit feature normalization", formatter_class=fmt)
    s.add_argument("--input", required=True, help="transitions (JSONL)")
    s.add_argument("--output", required=True, help="normalization spec (JSON)")
    s.add_argument("--sample", type=int, default=None, help="fit on at most N transitions")
    s.add_argument("--override", nargs="*", default=[], metavar="FEATURE=KIND", help="force a feature kind")
    s.add_argument("--seed", type=int, default=0, help="sampling seed")
    s.set_defaults(func=cmd_normalize)

    s = sub.add_parser("understand", help="data health checks with a GMM environment model", formatter_class=fmt)
    s.add_argument("--input", required=True, help="transitions (JSONL)")
    s.add_argument("--norm", required=True, help="normalization spec (JSON)")
    s.add_argument("--report", required=True, help="report (JSON)")
    s.add_argument("--k", type=int, default=3, help="mixture components")
    s.add_argument("--epochs", type=int, default=100, help="maximum model epochs")
    s.add_argument("--seed", type=int, default=0, help="model seed")
    s.set_defaults(func=cmd_understand)

    s = sub.add_parser("train", help="train a policy with per-epoch CPE", formatter_class=fmt)
    s.add_argument("--config", required=True, help="training config (JSON)")
    s.add_argument("--input", required=True, help="transitions (JSONL)")
    s.add_argument("--norm", required=True, help="normalization spec (JSON)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--resume", default=None, help="checkpoint to warm start from")
    s.add_argument("--seed", type=int, default=None, help="override the config seed")
    s.add_argument("--epochs", type=int, default=None, help="override the config's total epochs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="counterfactual policy evaluation of a checkpoint", formatter_class=fmt)
    s.add_argument("--model", required=True, help="checkpoint (JSON)")
    s.add_argument("--input", required=True, help="logged transitions (JSONL)")
    s.add_argument("--target-policy", default="greedy", help="greedy | softmax:T | epsilon:E")
    s.add_argument("--report", required=True, help="report (JSON; a CSV is written alongside)")
    s.add_argument("--seed", type=int, default=0, help="sample order seed")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("score", help="score requests and log propensities", formatter_class=fmt)
    s.add_argument("--model", required=True, help="checkpoint (JSON)")
    s.add_argument("--input", required=True, help="requests (JSONL)")
    s.add_argument("--out", required=True, help="responses (JSONL)")
    s.add_argument("--rows", default=None, help="RawRow stubs (JSONL); default <out>.rows.jsonl")
    s.add_argument("--policy", default="greedy", help="greedy | epsilon:E | softmax:T | threshold")
    s.add_argument("--threshold", type=float, default=0.5, help="initial send threshold")
    s.add_argument("--pid-target", type=float, default=None, help="target send rate for the PID controller")
    s.add_argument("--kp", type=float, default=0.5, help="PID proportional gain")
    s.add_argument("--ki", type=float, default=0.05, help="PID integral gain")
    s.add_argument("--kd", type=float, default=0.0, help="PID derivative gain")
    s.add_argument("--pid-window", type=int, default=100, help="requests per PID update")
    s.add_argument("--seed", type=int, default=None, help="sampling seed for stochastic policies")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("run-env", help="log behavior-policy episodes from a bundled env", formatter_class=fmt)
    s.add_argument("--env", required=True, choices=sorted(ENVS), help="bundled environment")
    s.add_argument("--policy", default="uniform", help="uniform | eps:V | softmax:T")
    s.add_argument("--episodes", type=int, default=None, help="episode count")
    s.add_argument("--min-rows", type=int, default=None, help="stop once this many rows are logged")
    s.add_argument("--seed", type=int, default=0, help="episode sampling seed")
    s.add_argument("--out", required=True, help="logged rows (JSONL)")
    s.set_defaults(func=cmd_run_env)

    s = sub.add_parser("e2e", help="run-env, timeline, normalize, understand, train, evaluate", formatter_class=fmt)
    s.add_argument("--env", required=True, choices=sorted(ENVS), help="bundled environment")
    s.add_argument("--seed", type=int, default=0, help="seed for logging, models and evaluation")
    s.add_argument("--policy", default=None, help="behavior policy (default per env)")
    s.add_argument("--transitions", type=int, default=None, help="logged transitions (default per env)")
    s.add_argument("--config", default=None, help="training config (default: bundled per env)")
    s.add_argument("--workdir", default=None, help="artifact directory (default: a new temp dir)")
    s.add_argument("--skip-understand", action="store_true", help="skip the data health checks")
    s.set_defaults(func=cmd_e2e)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"batchrl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"batchrl {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DATA_ERRORS as exc:
        print(f"batchrl {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # config and parameter validation
        print(f"batchrl {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

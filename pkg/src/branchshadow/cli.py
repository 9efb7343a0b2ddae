"""Command-line driver: attack, sweep-flush, zigzag, timing-table, report.

Settings come from (lowest to highest precedence) built-in defaults, the
BRANCHSHADOW_SEED environment variable, a flat ``key = value`` config file
given with ``--config``, and command-line flags.

Exit codes: 0 success, 1 configuration error, 2 internal inconsistency
(probe readings contradicting the architectural trace in a configuration
where they must agree).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import campaign as cp
from . import victims as victims_mod
from . import zigzagger
from .ir import IRError, assemble
from .uarch import CHANNELS, TABLE1, TIMING_CHANNELS, TimingChannelModel

EXIT_OK, EXIT_CONFIG, EXIT_INCONSISTENT = 0, 1, 2
SEED_ENV = "BRANCHSHADOW_SEED"
DEFAULT_PERIODS = (100, 1_000, 10_000, 100_000, 1_000_000)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _f(x: float) -> str:
    return "nan" if x != x else f"{x:.4f}"


def _header(pairs) -> str:
    return "".join(f"# {k}={v}\n" for k, v in pairs)


def _emit(text: str, path: str | None) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def _leak_text(v) -> str:
    if isinstance(v, str):
        return v
    return json.dumps(v, separators=(",", ":"), sort_keys=True)


# --------------------------------------------------------------------------
# config plumbing
# --------------------------------------------------------------------------

_CONFIG_FLAGS = ("victim", "channel", "predictor", "interrupts", "flush", "trials", "seed",
                 "zigzag", "k", "repeats", "nbits", "budget", "workers")


def _add_config_flags(p: argparse.ArgumentParser, victim: bool = True) -> None:
    p.add_argument("--config", help="flat key = value config file")
    if victim:
        p.add_argument("--victim", help=f"one of {', '.join(victims_mod.VICTIMS)}")
    p.add_argument("--channel", help=f"one of {', '.join(CHANNELS)}")
    p.add_argument("--predictor", help="btb-only or gshare")
    p.add_argument("--interrupts", help="normal or cache-disabled")
    p.add_argument("--flush", help="none, on-switch or periodic:<cycles>")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--zigzag", action=argparse.BooleanOptionalAction, default=None,
                   help="attack the zigzagger-transformed victim")
    p.add_argument("--k", help="branches per trampoline (integer >= 2 or 'all')")
    p.add_argument("--repeats", type=int, help="majority-vote repeats for timed probes")
    p.add_argument("--nbits", type=int, help="modexp exponent width")
    p.add_argument("--budget", type=int, help="reconstruction search budget (steps)")
    p.add_argument("--workers", type=int, help="worker processes for trials")


def build_config(args, **override) -> cp.ExperimentConfig:
    values: dict = {}
    env = os.environ.get(SEED_ENV)
    if env is not None:
        values["seed"] = env
    if getattr(args, "config", None):
        values.update(cp.read_config_file(args.config))
    for name in _CONFIG_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    values.update(override)
    try:
        return cp.ExperimentConfig.from_mapping(values)
    except ValueError as exc:
        raise cp.ConfigError(str(exc)) from None


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

TRIAL_COLUMNS = ("trial", "success", "inconsistent", "interrupts", "ipc_proxy", "recovered", "truth")
TRANSCRIPT_COLUMNS = ("run_id", "interrupt", "probe_kind", "branch", "observation", "inference")


def _campaign_summary(rep: cp.CampaignReport) -> list[tuple[str, str]]:
    return [
        ("accuracy", _f(rep.accuracy)),
        ("branch_balanced_accuracy", _f(rep.balanced_accuracy)),
        ("conditional_probes", str(rep.conditional_probes)),
        ("inconsistent_trials", str(rep.inconsistent)),
        ("label_conflicts", str(rep.conflicts)),
        ("mean_ipc_proxy", _f(rep.mean_ipc)),
    ]


def _reading(obs) -> str:
    return "" if obs is None else _f(float(obs))


def cmd_attack(args) -> int:
    cfg = build_config(args)
    rep = cp.run_campaign(cfg)
    rows = [(t.trial, int(t.success), int(t.inconsistent), t.interrupts, _f(t.ipc_proxy),
             _leak_text(t.leak), _leak_text(t.truth)) for t in rep.trials]
    _emit(_header(cfg.items()) + _header(_campaign_summary(rep)) + _csv(rows, TRIAL_COLUMNS),
          args.out)
    if args.json:
        spec = cp._setup(cfg).spec
        doc = {"config": dict(cfg.items()), "accuracy": round(rep.accuracy, 4),
               "secrets": [{"trial": t.trial, "victim": cfg.victim,
                            "secret_name": spec.secret_name, "recovered_value": t.leak,
                            "ground_truth": t.truth, "match": t.success}
                           for t in rep.trials]}
        _emit(json.dumps(doc, indent=2, sort_keys=True) + "\n", args.json)
    if args.transcript:
        tr = [(r[0], r[1], r[2], f"{r[3]:#x}", _reading(r[4]), r[5]) for r in rep.transcript()]
        _emit(_header(cfg.items()) + _csv(tr, TRANSCRIPT_COLUMNS), args.transcript)
    if rep.deterministic and rep.conflicts:
        print(f"error: {rep.conflicts} probe readings contradict the architectural trace",
              file=sys.stderr)
        return EXIT_INCONSISTENT
    return EXIT_OK


SWEEP_COLUMNS = ("period", "attack_accuracy", "branch_balanced_accuracy", "mean_ipc_proxy")


def _parse_periods(text: str) -> list[int]:
    try:
        return [int(float(p)) for p in text.split(",") if p.strip()]
    except ValueError:
        raise cp.ConfigError(f"bad period list {text!r}") from None


def cmd_sweep_flush(args) -> int:
    cfg = build_config(args)
    periods = _parse_periods(args.periods) if args.periods is not None else list(DEFAULT_PERIODS)
    results = cp.sweep_flush(cfg, periods)
    base = cp.run_campaign(cp.ExperimentConfig.from_mapping({**dict(cfg.items()), "flush": "none"}))
    rows = [(p, _f(r.accuracy), _f(r.balanced_accuracy), _f(r.mean_ipc)) for p, r in results]
    head = [(k, v) for k, v in cfg.items() if k != "flush"]
    head += [("periods", ",".join(str(p) for p in periods)),
             ("baseline_accuracy", _f(base.accuracy)),
             ("baseline_mean_ipc_proxy", _f(base.mean_ipc))]
    _emit(_header(head) + _csv(rows, SWEEP_COLUMNS), args.out)
    return EXIT_OK


def cmd_zigzag(args) -> int:
    try:
        text = open(args.input).read()
    except OSError as exc:
        raise cp.ConfigError(f"cannot read {args.input}: {exc.strerror}") from None
    try:
        prog = assemble(text)
        k = args.k if args.k == zigzagger.ALL else int(args.k)
        zcfg = zigzagger.ZigzaggerConfig(k, args.seed if args.seed is not None else _env_seed())
        new, report = zigzagger.transform(prog, zcfg)
    except (IRError, ValueError, zigzagger.ZigzagError) as exc:
        raise cp.ConfigError(str(exc)) from None
    _emit(new.to_text(), args.out)
    _emit(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", args.report)
    return EXIT_OK


TIMING_COLUMNS = ("channel", "class", "samples", "mean", "sigma", "ref_mean", "ref_sigma",
                  "mean_rel_err", "sigma_rel_err", "clamped_mean", "flag")


def timing_table(samples: int, seed: int) -> list[tuple]:
    """Per channel and outcome class: raw sample mean and sigma against the reference."""
    model = TimingChannelModel(seed=seed)
    rows = []
    for ch in TIMING_CHANNELS:
        mc, sc, mm, sm = TABLE1[ch]
        for cls, mu, sigma, bad in (("correct", mc, sc, False), ("mispredict", mm, sm, True)):
            x = model.sample_many(ch, bad, samples, clamp=False)
            mean = float(x.mean())
            sd = float(x.std(ddof=1)) if samples > 1 else float("nan")
            flag = "degenerate-sigma" if samples < 2 else ""
            rows.append((ch, cls, samples, mean, sd, mu, sigma, abs(mean - mu) / mu,
                         abs(sd - sigma) / sigma, float(np.maximum(x, 1.0).mean()), flag))
    return rows


def cmd_timing_table(args) -> int:
    if args.samples < 1:
        raise cp.ConfigError("samples must be positive")
    seed = args.seed if args.seed is not None else _env_seed()
    rows = timing_table(args.samples, seed)
    out = [(r[0], r[1], r[2]) + tuple(_f(v) for v in r[3:10]) + (r[10],) for r in rows]
    head = [("samples", args.samples), ("seed", seed),
            ("note", "mean/sigma over raw draws; clamped_mean applies the >= 1 cycle floor")]
    _emit(_header(head) + _csv(out, TIMING_COLUMNS), args.out)
    return EXIT_OK


REPORT_COLUMNS = ("victim", "trials", "accuracy", "branch_balanced_accuracy",
                  "inconsistent_trials", "label_conflicts", "mean_ipc_proxy")


def cmd_report(args) -> int:
    names = args.victims.split(",") if args.victims else list(victims_mod.VICTIMS)
    rows = []
    status = EXIT_OK
    cfg = None
    for name in names:
        cfg = build_config(args, victim=name.strip())
        rep = cp.run_campaign(cfg)
        rows.append((cfg.victim, cfg.trials, _f(rep.accuracy), _f(rep.balanced_accuracy),
                     rep.inconsistent, rep.conflicts, _f(rep.mean_ipc)))
        if rep.deterministic and rep.conflicts:
            status = EXIT_INCONSISTENT
    head = [(k, v) for k, v in cfg.items() if k != "victim"]
    _emit(_header(head) + _csv(rows, REPORT_COLUMNS), args.out)
    return status


def _env_seed() -> int:
    v = os.environ.get(SEED_ENV, "0")
    try:
        return int(v)
    except ValueError:
        raise cp.ConfigError(f"{SEED_ENV} must be an integer, got {v!r}") from None


# --------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="branchshadow", description="Branch shadowing experiments on a simulated enclave.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("attack", help="run an attack campaign against one victim")
    _add_config_flags(a)
    a.add_argument("--out", help="per-trial CSV (default stdout)")
    a.add_argument("--json", help="write recovered secrets as JSON")
    a.add_argument("--transcript", help="write the probe transcript CSV")
    a.set_defaults(func=cmd_attack)

    s = sub.add_parser("sweep-flush", help="attack accuracy and IPC across periodic flush periods")
    _add_config_flags(s)
    s.add_argument("--periods", help="comma-separated periods in cycles "
                                     "(default 100,1000,10000,100000,1000000)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep_flush)

    z = sub.add_parser("zigzag", help="transform an IR file with trampolines")
    z.add_argument("input", help="IR text file")
    z.add_argument("--k", default=zigzagger.ALL)
    z.add_argument("--seed", type=int)
    z.add_argument("--out", help="transformed IR (default stdout)")
    z.add_argument("--report", default="-", help="TransformReport JSON (default stdout)")
    z.set_defaults(func=cmd_zigzag)

    t = sub.add_parser("timing-table", help="sample the timing channels")
    t.add_argument("--samples", type=int, default=1_000_000)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_timing_table)

    r = sub.add_parser("report", help="attack summary across victims")
    _add_config_flags(r, victim=False)
    r.add_argument("--victims", help="comma-separated victim names (default all)")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors exit 1, --help exits 0
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    try:
        return args.func(args)
    except cp.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

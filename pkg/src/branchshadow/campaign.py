"""Attack campaigns: run a victim under interrupts, probe, reconstruct, score.

Every trial derives its own seeds from ``(config.seed, trial)``, so trials
can run in any order (or in worker processes) without changing results.
"""
from __future__ import annotations

import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Mapping

import numpy as np

from . import victims as victims_mod
from . import zigzagger
from .attacker import (POSITIVE, TAKEN, Attacker, InconsistentObservations,
                       reconstruct_control_flow, window_truth)
from .harness import INTERRUPT_MODELS, FlushPolicy, run_with_interrupts
from .ir import CONDITIONAL
from .uarch import (BTB_ONLY, CHANNELS, LBR_FLAG, PREDICTOR_MODES, Microarchitecture,
                    TimingChannelModel)


class ConfigError(ValueError):
    pass


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    victim: str = "modexp"
    channel: str = LBR_FLAG
    predictor: str = BTB_ONLY
    interrupts: str = "cache-disabled"
    flush: str = "none"
    trials: int = 100
    seed: int = 0
    zigzag: bool = False
    k: str = "all"
    repeats: int = 25
    nbits: int = 16
    budget: int = 200_000
    workers: int = 1

    def __post_init__(self):
        if self.victim not in victims_mod.BUILDERS:
            raise ConfigError(f"unknown victim {self.victim!r} "
                              f"(choose from {', '.join(victims_mod.VICTIMS)})")
        if self.channel not in CHANNELS:
            raise ConfigError(f"unknown channel {self.channel!r}")
        if self.predictor not in PREDICTOR_MODES:
            raise ConfigError(f"unknown predictor mode {self.predictor!r}")
        if self.interrupts not in INTERRUPT_MODELS:
            raise ConfigError(f"unknown interrupt model {self.interrupts!r}")
        try:
            FlushPolicy.parse(self.flush)
            self.zigzag_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for name in ("trials", "repeats", "nbits", "budget", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.repeats % 2 == 0:
            raise ConfigError("repeats must be odd (majority vote)")

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "ExperimentConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            typ = kinds[key]
            try:
                if typ == "int":
                    kw[key] = int(raw)
                elif typ == "bool":
                    kw[key] = _bool(raw)
                else:
                    kw[key] = str(raw).strip()
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        if "channel" in kw:
            kw["channel"] = kw["channel"].lower()
        return cls(**kw)

    def items(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def zigzag_config(self) -> zigzagger.ZigzaggerConfig:
        k = self.k if self.k == zigzagger.ALL else int(self.k)
        return zigzagger.ZigzaggerConfig(k, self.seed)


def read_config_file(path: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = open(path).read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key = value")
        out[key.strip()] = value.strip()
    return out


# --------------------------------------------------------------------------
# trials
# --------------------------------------------------------------------------

@dataclass
class TrialResult:
    trial: int
    success: bool
    inconsistent: bool
    leak: object
    truth: object
    interrupts: int
    ipc_proxy: float
    counts: dict          # cond branch addr -> [pos, pos_ok, neg, neg_ok]
    conflicts: int        # probe labels disagreeing with the architectural truth
    steps: int
    rows: list = field(default_factory=list)


class _Setup:
    """Per-config objects shared by all trials (victim, target program, probes)."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        kw = {"nbits": cfg.nbits} if cfg.victim == "modexp" else {}
        self.spec = victims_mod.build(cfg.victim, **kw)
        self.report = None
        self.program = self.spec.program
        if cfg.zigzag:
            self.program, self.report = zigzagger.transform(self.spec.program, cfg.zigzag_config())
        timing = None if cfg.channel == LBR_FLAG else TimingChannelModel(seed=cfg.seed)
        self.attacker = Attacker(self.program, cfg.channel, timing, repeats=cfg.repeats)
        self.model = INTERRUPT_MODELS[cfg.interrupts]
        self.flush = FlushPolicy.parse(cfg.flush)
        self.kinds = self.program.branch_kinds()

    def source_events(self, events):
        if self.report is None:
            return events
        return zigzagger.source_events(self.spec.program, self.program, self.report, events)


_SETUPS: dict = {}


def _setup(cfg: ExperimentConfig) -> _Setup:
    s = _SETUPS.get(cfg)
    if s is None:
        s = _SETUPS[cfg] = _Setup(cfg)
    return s


def trial_seeds(seed: int, trial: int) -> list[int]:
    return [int(x) for x in np.random.SeedSequence([seed, trial]).generate_state(4)]


def run_trial(cfg: ExperimentConfig, trial: int) -> TrialResult:
    st = _setup(cfg)
    s_input, s_windows, s_timing, s_guess = trial_seeds(cfg.seed, trial)
    spec = st.spec
    x = spec.random_input(random.Random(s_input))
    truth = spec.ground_truth(x)
    att = st.attacker
    if att.timing is not None:
        att.timing = TimingChannelModel(att.timing.params, s_timing)

    rep = run_with_interrupts(st.program, x, st.model, att, st.flush, s_windows,
                              uarch=Microarchitecture(mode=cfg.predictor), run_id=trial)
    obs = [o.labels for o in rep.observations]

    inconsistent = False
    steps = 0
    try:
        rec = reconstruct_control_flow(st.program, obs, att.observed, st.model.max_window(),
                                       cfg.budget)
        steps = rec.steps
        leak = spec.leak_from_events(st.source_events(rec.events))
    except InconsistentObservations:
        # nothing explains the readings: fall back to a blind guess
        inconsistent = True
        leak = spec.ground_truth(spec.random_input(random.Random(s_guess)))

    counts: dict = {}
    conflicts = 0
    for lab, tru in zip(obs, window_truth(st.program, rep.trace.events, rep.windows)):
        for addr, label in lab.items():
            t = tru.get(addr)
            if (label in POSITIVE) != (t in POSITIVE):
                conflicts += 1
            if t is None or st.kinds[addr] != CONDITIONAL:
                continue
            c = counts.setdefault(addr, [0, 0, 0, 0])
            if t == TAKEN:
                c[0] += 1
                c[1] += label == TAKEN
            else:
                c[2] += 1
                c[3] += label != TAKEN

    # victim cost under the same interrupts and flushes, without the attacker
    plain = run_with_interrupts(st.program, x, st.model, None, st.flush, s_windows,
                                uarch=Microarchitecture(mode=cfg.predictor))
    return TrialResult(trial, leak == truth, inconsistent, leak, truth, rep.interrupts,
                       plain.ipc_proxy, counts, conflicts, steps, rep.transcript)


# --------------------------------------------------------------------------
# campaigns
# --------------------------------------------------------------------------

@dataclass
class CampaignReport:
    config: ExperimentConfig
    trials: list

    @property
    def accuracy(self) -> float:
        return sum(t.success for t in self.trials) / len(self.trials)

    @property
    def inconsistent(self) -> int:
        return sum(t.inconsistent for t in self.trials)

    @property
    def conflicts(self) -> int:
        return sum(t.conflicts for t in self.trials)

    @property
    def mean_ipc(self) -> float:
        return float(np.mean([t.ipc_proxy for t in self.trials]))

    def branch_counts(self) -> dict:
        tot: dict = {}
        for t in self.trials:
            for a, c in t.counts.items():
                acc = tot.setdefault(a, [0, 0, 0, 0])
                for i in range(4):
                    acc[i] += c[i]
        return tot

    @property
    def conditional_probes(self) -> int:
        return sum(c[0] + c[2] for c in self.branch_counts().values())

    def branch_accuracy(self) -> dict:
        """Balanced accuracy per conditional branch seen both taken and not taken."""
        out = {}
        for a, (p, pk, n, nk) in sorted(self.branch_counts().items()):
            if p and n:
                out[a] = 0.5 * (pk / p + nk / n)
        return out

    @property
    def balanced_accuracy(self) -> float:
        acc = self.branch_accuracy()
        return float(np.mean(list(acc.values()))) if acc else float("nan")

    @property
    def deterministic(self) -> bool:
        """Readings should match the truth exactly in this configuration."""
        c = self.config
        return c.channel == LBR_FLAG and c.flush == "none"

    def transcript(self) -> list:
        rows = [r for t in self.trials for r in t.rows]
        rows.sort(key=lambda r: (r[0], r[1]))
        return rows


def _trial_job(args):
    cfg, trial = args
    return run_trial(cfg, trial)


def run_campaign(cfg: ExperimentConfig) -> CampaignReport:
    jobs = [(cfg, i) for i in range(cfg.trials)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(_trial_job, jobs, chunksize=max(1, len(jobs) // (4 * cfg.workers))))
    else:
        results = [_trial_job(j) for j in jobs]
    results.sort(key=lambda t: t.trial)
    return CampaignReport(cfg, results)


def sweep_flush(cfg: ExperimentConfig, periods) -> list[tuple[int, CampaignReport]]:
    periods = list(periods)
    if not periods:
        raise ConfigError("empty period list")
    if any(p <= 0 for p in periods):
        raise ConfigError("flush periods must be positive")
    out = []
    for p in periods:
        c = ExperimentConfig.from_mapping({**dict(cfg.items()), "flush": f"periodic:{p}"})
        out.append((p, run_campaign(c)))
    return out

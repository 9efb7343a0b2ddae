"""Enclave/attacker execution over shared branch state, with an AEX scheduler.

The victim runs in enclave mode.  After every sampled window of victim
instructions an asynchronous exit happens, the flush policy runs, and the
probe callback executes in attacker mode against the same branch state.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .ir import (OP_BR, OP_COMPUTE, OP_IJMP, OP_JMP, STRIDE, ArchTrace, Machine,
                 Program)
from .uarch import (ATTACKER, COND, CORRECT, ENCLAVE, IND, KIND_NAME, LBR_CYCLES, UNCOND,
                    Lbr, LbrRecord, Microarchitecture, TimingChannelModel, TABLE1)

_OP_CODE = {OP_BR: COND, OP_JMP: UNCOND, OP_IJMP: IND}


class HarnessError(Exception):
    """A probe callback failed; the run was aborted."""


@dataclass(frozen=True)
class InterruptModel:
    """Instructions executed between consecutive interrupts."""

    mean: float
    sigma: float
    name: str = ""

    def __post_init__(self):
        if self.mean < 1 or self.sigma < 0:
            raise ValueError("window mean must be >= 1 and sigma >= 0")

    def sample(self, rng: np.random.Generator, n: int | None = None):
        """Whole instruction counts, rounded and clamped to at least 1."""
        if n is None:
            return max(1, int(round(rng.normal(self.mean, self.sigma))))
        x = np.rint(rng.normal(self.mean, self.sigma, n)).astype(np.int64)
        return np.maximum(x, 1)

    def max_window(self, k: float = 8.0) -> int:
        """Practical upper bound on a window length (mean + k sigma)."""
        return max(1, int(np.ceil(self.mean + k * self.sigma)))


NORMAL = InterruptModel(48.76, 2.75, "normal")
CACHE_DISABLED = InterruptModel(4.71, 1.96, "cache-disabled")
INTERRUPT_MODELS = {m.name: m for m in (NORMAL, CACHE_DISABLED)}


@dataclass(frozen=True)
class FlushPolicy:
    kind: str = "none"  # none | on-switch | periodic
    period: int | None = None

    def __post_init__(self):
        if self.kind not in ("none", "on-switch", "periodic"):
            raise ValueError(f"unknown flush policy {self.kind!r}")
        if self.kind == "periodic" and (self.period is None or self.period <= 0):
            raise ValueError("periodic flush needs a positive period")

    @classmethod
    def parse(cls, text: str) -> "FlushPolicy":
        text = text.strip()
        if text.startswith("periodic"):
            _, _, p = text.partition(":")
            try:
                return cls("periodic", int(float(p)))
            except ValueError:
                raise ValueError(f"bad periodic flush spec {text!r}") from None
        return cls(text)

    def __str__(self) -> str:
        return f"periodic:{self.period}" if self.kind == "periodic" else self.kind


@dataclass
class ExecutionContext:
    mode: str
    program: Program
    cycles: int = 0
    instructions: int = 0


@dataclass
class ProbeContext:
    """What a probe callback gets at each interrupt."""

    uarch: Microarchitecture
    lbr: Lbr
    run_id: int
    interrupt_idx: int
    final: bool


@dataclass
class RunReport:
    trace: ArchTrace
    transcript: list = field(default_factory=list)  # (run_id, idx, kind, addr, obs, inference)
    cycles: int = 0
    instructions: int = 0
    penalties: int = 0
    mispredicts: int = 0
    flushes: int = 0
    windows: list = field(default_factory=list)  # [start, end) indices into trace.events
    observations: list = field(default_factory=list)  # callback return values, per interrupt

    @property
    def ipc_proxy(self) -> float:
        return self.instructions / self.cycles if self.cycles else 0.0

    @property
    def interrupts(self) -> int:
        return len(self.windows)

    def to_json(self) -> str:
        doc = {
            "instructions": self.instructions,
            "cycles": self.cycles,
            "ipc_proxy": round(self.ipc_proxy, 4),
            "penalty_cycles": self.penalties,
            "mispredicts": self.mispredicts,
            "flushes": self.flushes,
            "interrupts": self.interrupts,
            "halted": self.trace.halted,
            "fuel_exhausted": self.trace.fuel_exhausted,
            "windows": self.windows,
        }
        return json.dumps(doc, sort_keys=True)


ProbeCallback = Callable[[ProbeContext], object]


def run_with_interrupts(victim: Program, inputs: Mapping | None,
                        interrupts: InterruptModel | None,
                        probe: ProbeCallback | None = None,
                        flush: FlushPolicy = FlushPolicy(),
                        seed: int = 0, *,
                        uarch: Microarchitecture | None = None,
                        lbr: Lbr | None = None,
                        fuel: int = 1_000_000,
                        run_id: int = 0,
                        registers: Mapping[int, int] | None = None) -> RunReport:
    """Run ``victim`` in enclave mode, interrupting it after sampled windows.

    ``probe`` may return either None or an object with a ``rows`` attribute /
    an iterable of ``(probe_kind, target_addr, observation, inference)``
    rows; the raw return values are kept in ``RunReport.observations``.
    With ``interrupts=None`` the victim runs uninterrupted and ``probe`` is
    only called once, after the final exit.
    """
    uarch = uarch or Microarchitecture()
    lbr = lbr if lbr is not None else Lbr()
    rng = np.random.default_rng(seed)
    unit = uarch.unit
    penalty = uarch.penalty

    m = Machine(victim, inputs, registers)
    step = m.step
    code = m.code
    base = victim.base
    events: list = []
    append = events.append
    ctx = ExecutionContext(ENCLAVE, victim)
    report = RunReport(ArchTrace(events, m.regs, False, False))

    periodic = flush.period if flush.kind == "periodic" else 0
    on_switch = flush.kind == "on-switch"
    next_flush = periodic
    cycles = 0
    penalties = mispredicts = flushes = 0
    last_record = 0

    windows = iter(())
    if interrupts is not None:
        windows = _window_stream(interrupts, rng)
    remaining = next(windows, -1)
    win_start = 0

    def aex(final: bool) -> None:
        nonlocal flushes
        ctx.mode, ctx.cycles, ctx.instructions = ATTACKER, cycles, len(events)
        idx = len(report.windows)
        report.windows.append((win_start, len(events)))
        if on_switch:
            uarch.flush()
            flushes += 1
        if probe is not None:
            try:
                out = probe(ProbeContext(uarch, lbr, run_id, idx, final))
            except Exception as exc:  # abort with a diagnostic
                raise HarnessError(f"probe callback failed at interrupt {idx} "
                                   f"(victim pc {m.pc:#x}): {exc}") from exc
            report.observations.append(out)
            rows = getattr(out, "rows", out)
            if rows:
                report.transcript.extend((run_id, idx) + tuple(r) for r in rows)
        if on_switch and not final:
            uarch.flush()
            flushes += 1
        ctx.mode = ENCLAVE

    while not m.halted and m.count < fuel:
        if periodic and cycles >= next_flush:
            uarch.flush()
            flushes += 1
            next_flush = (cycles // periodic + 1) * periodic
        pc, op, cost, taken, nxt = step()
        cycles += cost
        if taken is None:
            append((pc, None, None))
        else:
            append((pc, taken, nxt))
            kc = _OP_CODE[op]
            if kc == IND:
                static = pc + STRIDE
            else:
                static = code[(pc - base) >> 2][2]
            outcome = unit.execute(kc, pc, static, pc + STRIDE, taken, nxt)
            if outcome != CORRECT:
                cycles += penalty
                penalties += penalty
                mispredicts += 1
            if taken:
                lbr.append(LbrRecord(pc, nxt, outcome == CORRECT, cycles - last_record,
                                     ENCLAVE, KIND_NAME[kc]))
                last_record = cycles
        if m.halted:
            break
        if remaining > 0:
            remaining -= 1
            if remaining == 0:
                aex(False)
                win_start = len(events)
                remaining = next(windows)

    report.trace.halted = m.halted
    report.trace.fuel_exhausted = not m.halted
    report.trace.registers = list(m.regs)
    report.cycles = cycles
    report.instructions = len(events)
    report.penalties = penalties
    report.mispredicts = mispredicts
    # final exit (EEXIT) gets one last probe
    if probe is not None or interrupts is not None:
        aex(True)
    report.flushes = flushes
    return report


def _window_stream(model: InterruptModel, rng: np.random.Generator):
    while True:
        yield from model.sample(rng, 256).tolist()


def cycle_account(program: Program, trace: ArchTrace, penalties: Iterable[int]) -> tuple[int, float]:
    """cycles = sum of instruction costs + sum of penalties; returns (cycles, ipc)."""
    code = program.compiled()
    base = program.base
    cycles = 0
    for addr, _t, _n in trace.events:
        op, a, _b, _c = code[(addr - base) >> 2]
        cycles += a if op == OP_COMPUTE else 1
    cycles += sum(penalties)
    n = len(trace.events)
    return cycles, (n / cycles if cycles else 0.0)


# --------------------------------------------------------------------------
# attacker-context execution
# --------------------------------------------------------------------------

def branch_script(program: Program, registers: Mapping[int, int] | None = None,
                  entry: int | None = None, fuel: int = 10_000) -> tuple:
    """Architectural branch sequence of an attacker routine.

    Returns ``(kind_code, addr, static_target, fallthrough, taken, target)``
    per executed branch; replaying it through ``replay`` is equivalent to
    running the routine instruction by instruction, since attacker routines
    never read shared state.
    """
    m = Machine(program, None, registers, entry)
    code, base = m.code, program.base
    out = []
    while not m.halted and m.count < fuel:
        pc, op, _cost, taken, nxt = m.step()
        if taken is not None:
            kc = _OP_CODE[op]
            static = pc + STRIDE if kc == IND else code[(pc - base) >> 2][2]
            out.append((kc, pc, static, pc + STRIDE, taken, nxt))
    if not m.halted:
        raise HarnessError(f"attacker routine {program.name!r} did not halt")
    return tuple(out)


def replay(script: tuple, uarch: Microarchitecture, lbr: Lbr,
           timing: TimingChannelModel | None = None) -> list[int]:
    """Execute a branch script in attacker context; returns outcome codes.

    Each LBR record's elapsed cycles is drawn from the LBR timing channel
    according to whether the previous attacker branch mispredicted.
    """
    unit = uarch.unit
    outcomes = []
    prev_bad = False
    for kc, addr, static, ft, taken, target in script:
        outcome = unit.execute(kc, addr, static, ft, taken, target)
        outcomes.append(outcome)
        if taken:
            if timing is None:
                p = TABLE1[LBR_CYCLES]
                elapsed = p[2] if prev_bad else p[0]
            else:
                elapsed = timing.sample(LBR_CYCLES, prev_bad)
            lbr.append(LbrRecord(addr, target, outcome == CORRECT, elapsed,
                                 ATTACKER, KIND_NAME[kc]))
        prev_bad = outcome != CORRECT
    return outcomes


def run_attacker(program: Program, uarch: Microarchitecture, lbr: Lbr,
                 timing: TimingChannelModel | None = None,
                 registers: Mapping[int, int] | None = None,
                 entry: int | None = None) -> list[int]:
    """Run an attacker routine against the shared state (slow, general path)."""
    return replay(branch_script(program, registers, entry), uarch, lbr, timing)

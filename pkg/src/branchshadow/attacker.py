"""Branch shadowing: shadow-code synthesis, probes, classifiers and
control-flow reconstruction from per-interrupt observations."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .harness import branch_script, replay
from .ir import (CONDITIONAL, INDIRECT, OP_BR, OP_HALT, OP_IJMP, OP_JMP, STRIDE,
                 UNCONDITIONAL, CondBranch, Compute, Halt, IndirectJump, Jump, Program)
from .uarch import (ATTACKER, CORRECT, LBR_CYCLES, LBR_FLAG, PT_CYC, RDTSCP, TIMING_CHANNELS,
                    Lbr, Microarchitecture, TimingChannelModel, alias, btb_index, btb_tag)

TAKEN = "Taken"
NOT_TAKEN = "NotTakenOrNotExecuted"
EXECUTED = "Executed"
NOT_EXECUTED = "NotExecuted"
POSITIVE = {TAKEN, EXECUTED}

_NOP = Compute(1)
_HALT = Halt()


class ShadowError(Exception):
    pass


class ProbeError(Exception):
    pass


class InconsistentObservations(Exception):
    """No control-flow path explains the observations."""

    def __init__(self, message: str, branch: int | None = None, window: int | None = None):
        super().__init__(message)
        self.branch = branch
        self.window = window


# --------------------------------------------------------------------------
# thresholds
# --------------------------------------------------------------------------

def _phi(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


@dataclass(frozen=True)
class Threshold:
    channel: str
    boundary: float
    between_means: bool  # False when no density crossing lies between the means

    def classify(self, reading: float) -> str:
        return "mispredict" if reading > self.boundary else "correct"


def gaussian_crossings(mc: float, sc: float, mm: float, sm: float,
                       prior_mispredict: float = 0.5) -> list[float]:
    """Real points where the prior-weighted class densities are equal."""
    pc, pm = 1.0 - prior_mispredict, prior_mispredict
    a = -0.5 / sc ** 2 + 0.5 / sm ** 2
    b = mc / sc ** 2 - mm / sm ** 2
    c = -0.5 * mc ** 2 / sc ** 2 + 0.5 * mm ** 2 / sm ** 2 + math.log(sm / sc) + math.log(pc / pm)
    if abs(a) < 1e-15:
        return [-c / b]
    disc = b * b - 4 * a * c
    if disc < 0:
        return []
    r = math.sqrt(disc)
    return sorted({(-b - r) / (2 * a), (-b + r) / (2 * a)})


def threshold_accuracy(params: Sequence[float], boundary: float,
                       prior_mispredict: float = 0.5) -> float:
    """Accuracy of the rule "mispredict iff reading > boundary" (closed form)."""
    mc, sc, mm, sm = params
    p_correct = _phi((boundary - mc) / sc) if sc > 0 else float(mc <= boundary)
    p_mis = 1.0 - (_phi((boundary - mm) / sm) if sm > 0 else float(mm <= boundary))
    return (1 - prior_mispredict) * p_correct + prior_mispredict * p_mis


def derive_threshold(model: TimingChannelModel, channel: str,
                     prior_mispredict: float = 0.5) -> Threshold:
    """Bayes decision boundary between the two Gaussian classes of a channel.

    Prefers the crossing between the class means; when the two densities do
    not cross there (very unequal sigmas), the crossing that gives the best
    single-threshold accuracy is used and ``between_means`` is False.
    """
    mc, sc, mm, sm = model.channel_params(channel)
    if mc == mm:
        raise ValueError(f"degenerate channel {channel!r}: equal class means")
    if sc == 0 or sm == 0 or (sc == sm and prior_mispredict == 0.5):
        return Threshold(channel, (mc + mm) / 2, True)
    roots = gaussian_crossings(mc, sc, mm, sm, prior_mispredict)
    lo, hi = min(mc, mm), max(mc, mm)
    inside = [r for r in roots if lo < r < hi]
    if inside:
        return Threshold(channel, inside[0], True)
    if not roots:
        raise ValueError(f"channel {channel!r}: class densities never cross")
    best = max(roots, key=lambda r: threshold_accuracy((mc, sc, mm, sm), r, prior_mispredict))
    return Threshold(channel, best, False)


def bayes_single_probe_accuracy(model: TimingChannelModel, channel: str) -> float:
    th = derive_threshold(model, channel)
    return threshold_accuracy(model.channel_params(channel), th.boundary)


def monte_carlo_accuracy(model: TimingChannelModel, channel: str, n: int,
                         threshold: Threshold | None = None) -> float:
    """Single-probe accuracy over ``n`` samples per class (clamped readings)."""
    th = threshold or derive_threshold(model, channel)
    good = model.sample_many(channel, False, n)
    bad = model.sample_many(channel, True, n)
    return 0.5 * (float(np.mean(good <= th.boundary)) + float(np.mean(bad > th.boundary)))


# --------------------------------------------------------------------------
# shadow synthesis
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TargetBranch:
    addr: int
    kind: str
    static_target: int | None = None

    @classmethod
    def of(cls, program: Program, addr: int) -> "TargetBranch":
        for a, k, t in program.branches():
            if a == addr:
                return cls(a, k, t)
        raise ShadowError(f"no branch at {addr:#x}")


@dataclass
class ShadowProbe:
    target: TargetBranch
    probe_kind: str
    channel: str
    program: Program
    registers: dict
    shadow_addr: int
    script: tuple
    cleanup: tuple = ()
    cleanup_program: Program | None = None

    @property
    def taken_records(self) -> int:
        return sum(1 for s in self.script if s[4])


def _image_range(target: TargetBranch, image: tuple[int, int] | None, extra: Iterable[int] = ()):
    pts = [target.addr] + [t for t in ([target.static_target] + list(extra)) if t is not None]
    lo = min(pts)
    hi = max(pts) + STRIDE
    if image is not None:
        lo, hi = min(lo, image[0]), max(hi, image[1])
    return lo & ~63, hi


def _build(base: int, n: int, fill, placed: dict, name: str, entry_addr: int) -> Program:
    ins = [fill] * n
    for addr, instr in placed.items():
        ins[(addr - base) // STRIDE] = instr
    return Program(base, ins, {"shadow": (entry_addr - base) // STRIDE}, "shadow", name)


def make_shadow(target: TargetBranch, probe_kind: str | None = None, channel: str = LBR_FLAG,
                image: tuple[int, int] | None = None,
                occupied: Iterable[tuple[int, int]] = (),
                candidate: int | None = None) -> ShadowProbe:
    """Synthesize the shadow routine for one victim branch.

    ``image`` is the victim code range the shadow image mirrors; the side
    slots (the unconditional shadow's own target and the measurement
    branch) are placed just past its alias so they never alias a victim
    instruction.  ``candidate`` (indirect only) aims the shadow jump at the
    alias of a guessed victim target instead of its own next instruction.
    """
    kind = target.kind
    probe_kind = probe_kind or kind
    if probe_kind != kind:
        raise ShadowError(f"cannot probe a {kind} branch with a {probe_kind} shadow")
    if channel not in (LBR_FLAG,) + TIMING_CHANNELS:
        raise ShadowError(f"unknown channel {channel!r}")
    extra = [] if candidate is None else [candidate]
    lo, hi = _image_range(target, image, extra)
    base = alias(lo)
    side = alias(hi)          # first slot past the mirrored range
    n = (side - base) // STRIDE + 2
    end = base + n * STRIDE
    for olo, ohi in occupied:
        if base < ohi and olo < end:
            raise ShadowError(f"aliasing base {base:#x} collides with an existing image "
                              f"[{olo:#x}, {ohi:#x})")
    a_b = alias(target.addr)
    assert btb_index(a_b) == btb_index(target.addr) and btb_tag(a_b) == btb_tag(target.addr)
    timing = channel in TIMING_CHANNELS
    meas = side + STRIDE
    regs: dict = {}
    cleanup_prog = None
    cleanup: tuple = ()
    name = f"shadow_{target.addr:x}"

    if kind == CONDITIONAL:
        a_t = alias(target.static_target)
        if a_t == a_b:
            raise ShadowError("self-targeting conditional cannot be shadowed")
        placed = {a_b + STRIDE: _HALT, a_t: Jump(meas) if timing else _HALT, meas: _HALT}
        placed[a_b] = CondBranch(0, a_t)
        regs = {0: 1}
        prog = _build(base, n, _NOP, placed, name, a_b)
        # not-taken replays at the same addresses invalidate what the probe left
        cl = {a_b: CondBranch(0, meas)}
        if timing:
            cl[a_t] = CondBranch(0, meas)
        cleanup_prog = _build(base, n, _HALT, cl, name + "_cleanup", a_b)
        cleanup = branch_script(cleanup_prog, {0: 0}, a_b)
        if timing:
            cleanup += branch_script(cleanup_prog, {0: 0}, a_t)
    elif kind == UNCONDITIONAL:
        placed = {a_b: Jump(side), a_b + STRIDE: _HALT, side: Jump(meas), meas: _HALT}
        prog = _build(base, n, _NOP, placed, name, a_b)
    else:
        dest = a_b + STRIDE if candidate is None else alias(candidate)
        if dest == a_b:
            raise ShadowError("candidate target equals the branch itself")
        placed = {a_b: IndirectJump(0, (dest,)), dest: _HALT}
        if timing:
            placed[dest] = Jump(meas)
            placed[meas] = _HALT
        regs = {0: dest}
        prog = _build(base, n, _NOP, placed, name, a_b)
    script = branch_script(prog, regs, a_b)
    return ShadowProbe(target, probe_kind, channel, prog, regs, a_b, script, cleanup, cleanup_prog)


# --------------------------------------------------------------------------
# probes
# --------------------------------------------------------------------------

@dataclass
class InferenceResult:
    addr: int
    kind: str
    label: str
    confidence: float = 1.0
    reading: float | None = None
    classified: str | None = None

    @property
    def positive(self) -> bool:
        return self.label in POSITIVE


def _last_attacker_records(lbr: Lbr, n: int):
    out = []
    for r in reversed(lbr._buf):
        if r.context == ATTACKER:
            out.append(r)
            if len(out) == n:
                break
    out.reverse()
    return out


def _read(probe: ShadowProbe, outcomes: list[int], lbr: Lbr,
          timing: TimingChannelModel | None) -> tuple[float, bool]:
    """Channel reading for one probe run, plus whether it says "predicted"."""
    ch = probe.channel
    if ch in (RDTSCP, PT_CYC):
        if timing is None:
            raise ProbeError(f"channel {ch} needs a timing model")
        return timing.sample(ch, outcomes[0] != CORRECT), False
    n = probe.taken_records
    recs = _last_attacker_records(lbr, n) if lbr.filtering else list(lbr._buf)[-n:]
    if len(recs) < n or recs[0].from_addr != probe.shadow_addr:
        raise ProbeError(f"LBR holds no record of the shadow branch at {probe.shadow_addr:#x}")
    if ch == LBR_FLAG:
        return float(recs[0].predicted), recs[0].predicted
    if n < 2:
        raise ProbeError("no measurement branch record for the cycles channel")
    return recs[1].elapsed_cycles, False


def _run(probe: ShadowProbe, uarch: Microarchitecture, lbr: Lbr,
         timing: TimingChannelModel | None) -> tuple[float, bool]:
    outcomes = replay(probe.script, uarch, lbr, timing)
    reading = _read(probe, outcomes, lbr, timing)
    if probe.cleanup:
        replay(probe.cleanup, uarch, lbr, timing)
    return reading


def _classify(probe: ShadowProbe, reading: float, flag: bool, threshold: Threshold | None) -> str:
    if probe.channel == LBR_FLAG:
        return "correct" if flag else "mispredict"
    if threshold is None:
        raise ProbeError(f"channel {probe.channel} needs a threshold")
    return threshold.classify(reading)


def probe_conditional(probe: ShadowProbe, uarch: Microarchitecture, lbr: Lbr,
                      timing: TimingChannelModel | None = None,
                      threshold: Threshold | None = None) -> InferenceResult:
    if probe.probe_kind != CONDITIONAL:
        raise ProbeError("not a conditional probe")
    reading, flag = _run(probe, uarch, lbr, timing)
    cls = _classify(probe, reading, flag, threshold)
    label = TAKEN if cls == "correct" else NOT_TAKEN
    return InferenceResult(probe.target.addr, CONDITIONAL, label, 1.0, reading, cls)


def probe_indirect(probe: ShadowProbe, uarch: Microarchitecture, lbr: Lbr,
                   timing: TimingChannelModel | None = None,
                   threshold: Threshold | None = None) -> InferenceResult:
    if probe.probe_kind != INDIRECT:
        raise ProbeError("not an indirect probe")
    reading, flag = _run(probe, uarch, lbr, timing)
    cls = _classify(probe, reading, flag, threshold)
    label = EXECUTED if cls == "mispredict" else NOT_EXECUTED
    return InferenceResult(probe.target.addr, INDIRECT, label, 1.0, reading, cls)


def probe_unconditional(probe: ShadowProbe, uarch: Microarchitecture, lbr: Lbr,
                        timing: TimingChannelModel, threshold: Threshold,
                        repeats: int = 25) -> InferenceResult:
    """Majority vote over ``repeats`` timed probes.

    The shadow jump retrains the aliased entry, so each extra repeat runs
    on a copy of the pre-probe state (the attacker replays the victim up to
    the same interrupt); ``uarch`` itself ends in the state left by the
    first repeat.
    """
    if probe.probe_kind != UNCONDITIONAL:
        raise ProbeError("not an unconditional probe")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if probe.channel == LBR_FLAG:
        raise ProbeError("the LBR flag never reports unconditional mispredictions; "
                         "use a cycles channel")
    snapshot = uarch.copy() if repeats > 1 else None
    votes = 0
    readings = []
    for r in range(repeats):
        u = uarch if r == 0 else snapshot.copy()
        reading, _ = _run(probe, u, lbr, timing)
        readings.append(reading)
        votes += threshold.classify(reading) == "mispredict"
    executed = votes * 2 > repeats
    conf = (votes if executed else repeats - votes) / repeats
    label = EXECUTED if executed else NOT_EXECUTED
    return InferenceResult(probe.target.addr, UNCONDITIONAL, label, conf,
                           float(np.median(readings)), "mispredict" if executed else "correct")


def probe(probe: ShadowProbe, uarch: Microarchitecture, lbr: Lbr,
          timing: TimingChannelModel | None = None, threshold: Threshold | None = None,
          repeats: int = 25) -> InferenceResult:
    """Dispatch on the probe kind."""
    if probe.probe_kind == CONDITIONAL:
        return probe_conditional(probe, uarch, lbr, timing, threshold)
    if probe.probe_kind == INDIRECT:
        return probe_indirect(probe, uarch, lbr, timing, threshold)
    return probe_unconditional(probe, uarch, lbr, timing, threshold, repeats)


def infer_indirect_target(target: TargetBranch, rerun: Callable[[], Microarchitecture],
                          candidates: Sequence[int], image: tuple[int, int] | None = None
                          ) -> int | None:
    """Find the victim's indirect target by re-running it once per candidate.

    A shadow jump aimed at alias(c) is predicted correctly only if the
    victim left target c in the shared entry.
    """
    for c in candidates:
        try:
            sp = make_shadow(target, INDIRECT, LBR_FLAG, image, candidate=c)
        except ShadowError:
            continue
        uarch = rerun()
        lbr = Lbr()
        replay(sp.script, uarch, lbr)
        rec = _last_attacker_records(lbr, 1)
        if rec and rec[0].predicted:
            return c
    return None


# --------------------------------------------------------------------------
# set-conflict eviction probe
# --------------------------------------------------------------------------

EVICTION_REGION = 0x4000_0000


@dataclass
class EvictionMonitor:
    set_index: int
    scripts: tuple
    addrs: tuple

    def prime(self, uarch: Microarchitecture, lbr: Lbr) -> None:
        for s in self.scripts:
            replay(s, uarch, lbr)


def make_eviction_monitor(set_index: int, ways: int = 4, sets: int = 1024,
                          region: int = EVICTION_REGION) -> EvictionMonitor:
    """``ways`` always-taken attacker branches sharing one set, distinct tags."""
    low = next((v for v in range(0, 0x10000, STRIDE) if btb_index(v, sets) == set_index), None)
    if low is None:
        raise ValueError(f"set index {set_index} unreachable")
    scripts, addrs = [], []
    for k in range(ways):
        a = region + (k + 1) * 0x10000 + low
        prog = Program(a, (CondBranch(0, a + STRIDE), _HALT), {}, None, f"evict_{k}")
        scripts.append(branch_script(prog, {0: 1}))
        addrs.append(a)
    return EvictionMonitor(set_index, tuple(scripts), tuple(addrs))


def probe_set_eviction(monitor: EvictionMonitor, uarch: Microarchitecture, lbr: Lbr) -> bool:
    """Re-run the primed branches; any misprediction means the set saw a victim insert."""
    evicted = False
    for s in monitor.scripts:
        if any(o != CORRECT for o in replay(s, uarch, lbr)):
            evicted = True
    return evicted


# --------------------------------------------------------------------------
# function-level synchronization
# --------------------------------------------------------------------------

def locate_active_function(prologues: Mapping[str, ShadowProbe], uarch: Microarchitecture,
                           lbr: Lbr, timing: TimingChannelModel | None = None,
                           threshold: Threshold | None = None, repeats: int = 25) -> str | None:
    """The unique function whose prologue branch shows activity, else None."""
    hits = [name for name, sp in prologues.items()
            if probe(sp, uarch, lbr, timing, threshold, repeats).positive]
    return hits[0] if len(hits) == 1 else None


# --------------------------------------------------------------------------
# campaign-side attacker
# --------------------------------------------------------------------------

@dataclass
class WindowObservation:
    labels: dict           # branch addr -> label
    rows: list = field(default_factory=list)


class Attacker:
    """Probes a chosen set of victim branches at every interrupt."""

    def __init__(self, victim: Program, channel: str = LBR_FLAG,
                 timing: TimingChannelModel | None = None,
                 kinds: Iterable[str] | None = None, repeats: int = 25,
                 threshold: Threshold | None = None, record_rows: bool = True):
        if kinds is None:
            kinds = (CONDITIONAL, INDIRECT) if channel == LBR_FLAG else \
                (CONDITIONAL, UNCONDITIONAL, INDIRECT)
        self.kinds = tuple(kinds)
        if channel == LBR_FLAG and UNCONDITIONAL in self.kinds:
            raise ValueError("unconditional branches need a cycles channel")
        self.victim = victim
        self.channel = channel
        self.timing = timing
        if channel in TIMING_CHANNELS and threshold is None:
            threshold = derive_threshold(timing, channel)
        self.threshold = threshold
        self.repeats = repeats
        self.record_rows = record_rows
        image = (victim.base, victim.end)
        self.probes = [make_shadow(TargetBranch(a, k, t), k, channel, image,
                                   occupied=[image])
                       for a, k, t in victim.branches() if k in self.kinds]

    @property
    def observed(self) -> set[int]:
        return {p.target.addr for p in self.probes}

    def __call__(self, ctx) -> WindowObservation:
        uarch, lbr, timing, th, rep = ctx.uarch, ctx.lbr, self.timing, self.threshold, self.repeats
        labels = {}
        rows = []
        for sp in self.probes:
            res = probe(sp, uarch, lbr, timing, th, rep)
            labels[sp.target.addr] = res.label
            if self.record_rows:
                rows.append((sp.probe_kind, sp.target.addr, res.reading, res.label))
        return WindowObservation(labels, rows)


def window_truth(program: Program, events: list, windows: list) -> list[dict]:
    """Per-window ground truth labels from the architectural trace."""
    kinds = program.branch_kinds()
    out = []
    for start, end in windows:
        lab = {}
        for addr, taken, _nxt in events[start:end]:
            if taken is None:
                continue
            if kinds[addr] == CONDITIONAL:
                lab[addr] = TAKEN if taken else NOT_TAKEN
            else:
                lab[addr] = EXECUTED
        out.append(lab)
    return out


# --------------------------------------------------------------------------
# control-flow reconstruction
# --------------------------------------------------------------------------

@dataclass
class Reconstruction:
    events: list        # (addr, taken, next_addr) per branch on the path
    windows: list       # window index per event (None for unobserved branches)
    steps: int


def reconstruct_control_flow(program: Program, observations: Sequence[Mapping[int, str]],
                             observed: Iterable[int], window_max: int,
                             budget: int = 2_000_000) -> Reconstruction:
    """Find a victim path explaining every per-interrupt observation.

    ``observations[w]`` maps each probed branch to its label after window
    ``w``; ``observed`` lists the probed branches (the rest are free).
    Window lengths are unknown, each in ``[1, window_max]`` instructions;
    a probed branch runs at most once per window.  Branches are assigned to
    the current window first, then to later ones; the first consistent path
    is returned.
    """
    code = program.compiled()
    n = len(code)
    base = program.base
    nwin = len(observations)
    if nwin == 0:
        raise InconsistentObservations("no observations")
    L = window_max
    obs_set = set(observed)
    bit = {a: 1 << i for i, a in enumerate(sorted(obs_set))}
    positives = []
    for lab in observations:
        m = 0
        for a, l in lab.items():
            if l in POSITIVE and a in bit:
                m |= bit[a]
        positives.append(m)
    # suffix: does any window in (w, nwin) have positives -> first such window
    next_pos = [nwin] * (nwin + 1)
    for w in range(nwin - 1, -1, -1):
        next_pos[w] = w if positives[w] else next_pos[w + 1]

    # straight-line skip table: index of next branch/halt and distance
    nxt_ctl = [0] * n
    follow = n
    for i in range(n - 1, -1, -1):
        op = code[i][0]
        if op in (OP_BR, OP_JMP, OP_IJMP, OP_HALT):
            follow = i
        nxt_ctl[i] = follow
    candidates = {}
    for i, ins in enumerate(program.instructions):
        if isinstance(ins, IndirectJump):
            candidates[i] = [(c - base) // STRIDE for c in ins.candidates]

    failed: set = set()
    deepest = [(-1, None, None)]
    steps = 0

    def window_options(w, lo, hi, last, executed, p):
        """Yield (w', lo', hi', executed') placing position p in window w' >= w."""
        # stay in w
        nlo, nhi = max(lo, p - L + 1), min(hi, p)
        if nlo <= nhi:
            yield w, nlo, nhi, executed, True
        if positives[w] & ~executed:
            return
        clo, chi = max(lo + 1, last + 1), hi + L
        w2 = w + 1
        while w2 < nwin and clo <= p:
            nlo, nhi = max(clo, p - L + 1), min(chi, p)
            if nlo <= nhi:
                yield w2, nlo, nhi, 0, False
            if positives[w2]:
                break
            clo, chi = clo + 1, chi + L
            w2 += 1

    # iterative DFS; a frame holds its successor iterator
    def successors(state):
        pc_i, p, w, lo, hi, last, executed = state
        j = nxt_ctl[pc_i]
        if j >= n:
            return
        p += j - pc_i
        op, a, b, c = code[j]
        addr = base + j * STRIDE
        if op == OP_HALT:
            for w2, nlo, nhi, ex, same in window_options(w, lo, hi, last, executed, p):
                if w2 == nwin - 1 and not (positives[w2] & ~ex):
                    yield None, (addr, None, None), w2
            return
        if addr not in obs_set:
            if op == OP_BR:
                for tk, to in ((False, j + 1), (True, (b - base) // STRIDE)):
                    yield (to, p + 1, w, lo, hi, last, executed), (addr, tk, base + to * STRIDE), None
            elif op == OP_JMP:
                to = (b - base) // STRIDE
                yield (to, p + 1, w, lo, hi, last, executed), (addr, True, b), None
            else:
                for to in candidates.get(j, ()):
                    yield (to, p + 1, w, lo, hi, last, executed), (addr, True, base + to * STRIDE), None
            return
        mb = bit[addr]
        for w2, nlo, nhi, ex, same in window_options(w, lo, hi, last, executed, p):
            if ex & mb:
                continue
            positive = bool(positives[w2] & mb)
            ex2 = ex | mb
            if op == OP_BR:
                if positive:
                    to = (b - base) // STRIDE
                    yield (to, p + 1, w2, nlo, nhi, p, ex2), (addr, True, b), w2
                else:
                    yield (j + 1, p + 1, w2, nlo, nhi, p, ex2), (addr, False, addr + STRIDE), w2
            elif positive:
                if op == OP_JMP:
                    to = (b - base) // STRIDE
                    yield (to, p + 1, w2, nlo, nhi, p, ex2), (addr, True, b), w2
                else:
                    for to in candidates.get(j, ()):
                        yield (to, p + 1, w2, nlo, nhi, p, ex2), (addr, True, base + to * STRIDE), w2

    start = ((program.entry_addr - base) // STRIDE, 0, 0, 0, 0, -1, 0)
    path_events: list = []
    path_windows: list = []
    stack = [(start, successors(start))]
    while stack:
        state, it = stack[-1]
        steps += 1
        if steps > budget:
            raise InconsistentObservations(f"search budget of {budget} steps exhausted")
        nxt = next(it, StopIteration)
        if nxt is StopIteration:
            stack.pop()
            key = state
            failed.add(key)
            if path_events:
                path_events.pop()
                path_windows.pop()
            continue
        child, ev, w2 = nxt
        if child is None:
            # reached Halt consistently
            return Reconstruction(path_events, path_windows, steps)
        if child in failed:
            continue
        if child[1] > deepest[0][0]:
            deepest[0] = (child[1], ev[0], w2 if w2 is not None else child[2])
        # prune: remaining positions cannot exceed the last window's end
        if child[1] > child[4] + (nwin - child[2]) * L:
            continue
        path_events.append(ev)
        path_windows.append(w2)
        stack.append((child, successors(child)))
    _, br, win = deepest[0]
    where = f"branch {br:#x} in window {win}" if br is not None else "program entry"
    raise InconsistentObservations(f"no control-flow path explains the observations; "
                                   f"deepest conflict at {where}", br, win)

"""Zigzagger: replace direct branches with jumps through a shared trampoline.

Each converted site computes its real successor into the reserved register
``rt`` (a SetReg default plus a CondMove for conditionals) and jumps into the
trampoline.  The trampoline bounces back through every later site of the
same group and finally jumps indirectly through ``rt``.  So whichever site
is entered first, every later site's jump executes too.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .harness import run_with_interrupts
from .ir import (RESERVED_REG, STRIDE, CondBranch, CondMove, Expr, IndirectJump, Jump, Program,
                 SetReg, interpret)
from .uarch import ALIAS_OFFSET, Microarchitecture

ALL = "all"


class ZigzagError(Exception):
    pass


@dataclass(frozen=True)
class ZigzaggerConfig:
    k: int | str = ALL   # branches per trampoline
    seed: int = 0

    def __post_init__(self):
        if self.k != ALL and (not isinstance(self.k, int) or self.k < 2):
            raise ValueError("branches per trampoline must be >= 2 or 'all'")


@dataclass
class TransformReport:
    trampolines: int = 0
    converted: int = 0
    fanout: list = field(default_factory=list)        # static target count per trampoline
    reserved_register: str = "rt"
    seed: int = 0
    k: int | str = ALL
    groups: list = field(default_factory=list)        # source addresses per trampoline
    sites: list = field(default_factory=list)         # new addresses of the site jumps
    hops: list = field(default_factory=list)          # new addresses of trampoline slots
    back_edges: list = field(default_factory=list)    # source addresses of backward branches
    passthrough: list = field(default_factory=list)   # indirect source branches left alone
    site_source: dict = field(default_factory=dict)   # site jump addr -> source branch addr
    addr_map: dict = field(default_factory=dict)      # source addr -> new addr

    @property
    def region(self) -> set[int]:
        """Addresses of the direct branches the transformation introduced."""
        return set(self.sites) | set(self.hops)

    def to_dict(self) -> dict:
        return {
            "trampolines": self.trampolines,
            "converted": self.converted,
            "fanout": self.fanout,
            "reserved_register": self.reserved_register,
            "seed": self.seed,
            "k": self.k,
            "groups": [[hex(a) for a in g] for g in self.groups],
            "back_edges": [hex(a) for a in self.back_edges],
            "passthrough_indirect": [hex(a) for a in self.passthrough],
        }


def _groups(n: int, k, seed: int, targets: Sequence[set] | None = None) -> list[list[int]]:
    """Randomly partition site indices 0..n-1 into groups of size k (seeded).

    A group whose sites all share one target would give its trampoline a
    single-target jump, so such groups are merged into a neighbour.
    """
    if n == 0:
        return []
    if k == ALL or k >= n:
        return [list(range(n))]
    order = list(range(n))
    random.Random(seed).shuffle(order)
    groups = [sorted(order[i:i + k]) for i in range(0, n, k)]
    if len(groups) > 1 and len(groups[-1]) < 2:
        last = groups.pop()
        groups[-1] = sorted(groups[-1] + last)
    if targets is not None:
        i = 0
        while i < len(groups) and len(groups) > 1:
            if len(set().union(*(targets[s] for s in groups[i]))) < 2:
                j = i - 1 if i > 0 else 1
                merged = sorted(groups[i] + groups[j])
                groups[min(i, j)] = merged
                del groups[max(i, j)]
                i = 0
                continue
            i += 1
    return groups


def transform(program: Program, cfg: ZigzaggerConfig = ZigzaggerConfig()
              ) -> tuple[Program, TransformReport]:
    if program.uses_register(RESERVED_REG):
        raise ZigzagError("reserved-register conflict: source program uses rt")
    src = program.instructions
    sites = [i for i, ins in enumerate(src) if isinstance(ins, (CondBranch, Jump))]
    report = TransformReport(seed=cfg.seed, k=cfg.k)
    report.passthrough = [program.addr(i) for i, ins in enumerate(src)
                          if isinstance(ins, IndirectJump)]
    if not sites:
        return program, report

    site_targets = [{program.addr(i + 1), src[i].target} if isinstance(src[i], CondBranch)
                    else {src[i].target} for i in sites]
    groups = _groups(len(sites), cfg.k, cfg.seed, site_targets)
    # new index of each source instruction
    new_index = []
    pos = 0
    site_set = set(sites)
    for i, ins in enumerate(src):
        new_index.append(pos)
        if i in site_set:
            pos += 3 if isinstance(ins, CondBranch) else 2
        else:
            pos += 1
    body_len = pos
    n_total = body_len + len(sites)
    base = program.base
    if base // ALIAS_OFFSET != (base + STRIDE * n_total - 1) // ALIAS_OFFSET:
        raise ZigzagError("trampoline placement overflow: image would cross an alias boundary")

    def naddr(old_addr: int) -> int:
        return base + STRIDE * new_index[(old_addr - base) // STRIDE]

    labels: dict[str, int] = {}
    for name, idx in program.labels.items():
        labels[name] = new_index[idx] if idx < len(src) else n_total

    def label_for(new_idx: int) -> str:
        name = f"zz_t{new_idx}"
        labels.setdefault(name, new_idx)
        return name

    # trampoline slot per site: sites are chained lexically within a group
    slot_of = {}
    chain_next = {}
    slot = body_len
    for g in groups:
        for j, s in enumerate(g):
            slot_of[sites[s]] = slot + j
            chain_next[sites[s]] = sites[g[j + 1]] if j + 1 < len(g) else None
        slot += len(g)

    out: list = []
    site_jump_addr = {}
    targets_per_group: list[set] = [set() for _ in groups]
    group_of = {sites[s]: gi for gi, g in enumerate(groups) for s in g}
    for i, ins in enumerate(src):
        if i not in site_set:
            if isinstance(ins, IndirectJump):
                out.append(IndirectJump(ins.reg, tuple(naddr(c) for c in ins.candidates)))
            elif isinstance(ins, CondMove):
                out.append(CondMove(ins.pred, ins.dest, naddr(ins.value)))
            else:
                out.append(ins)
            continue
        tgt = naddr(ins.target)
        zz = base + STRIDE * slot_of[i]
        if ins.target <= program.addr(i):
            report.back_edges.append(program.addr(i))
        if isinstance(ins, CondBranch):
            nxt = new_index[i] + 3
            out.append(SetReg(RESERVED_REG, Expr("@" + label_for(nxt))))
            out.append(CondMove(ins.pred, RESERVED_REG, tgt))
            targets_per_group[group_of[i]].update({base + STRIDE * nxt, tgt})
        else:
            out.append(SetReg(RESERVED_REG, Expr("@" + label_for((tgt - base) // STRIDE))))
            targets_per_group[group_of[i]].add(tgt)
        out.append(Jump(zz))
        site_jump_addr[i] = base + STRIDE * (len(out) - 1)

    for gi, g in enumerate(groups):
        for s in g:
            nxt_site = chain_next[sites[s]]
            if nxt_site is None:
                cands = tuple(sorted(targets_per_group[gi]))
                out.append(IndirectJump(RESERVED_REG, cands))
            else:
                out.append(Jump(site_jump_addr[nxt_site]))
    assert len(out) == n_total

    entry = program.entry
    new = Program(base, out, labels, entry, program.name)
    report.trampolines = len(groups)
    report.converted = len(sites)
    report.fanout = [len(t) for t in targets_per_group]
    report.groups = [[program.addr(sites[s]) for s in g] for g in groups]
    report.sites = sorted(site_jump_addr.values())
    report.hops = [base + STRIDE * (body_len + j) for j in range(len(sites))]
    report.site_source = {a: program.addr(i) for i, a in site_jump_addr.items()}
    report.addr_map = {program.addr(i): base + STRIDE * new_index[i] for i in range(len(src))}
    report.addr_map[program.end] = base + STRIDE * n_total
    return new, report


def source_events(original: Program, transformed: Program, report: TransformReport,
                  events) -> list:
    """Translate transformed-program branch events back into source branch events.

    A trampoline visit starts at the first site jump after the previous
    final indirect jump; that site is the source branch that was executed,
    and the final jump's target says where it went.
    """
    if not report.converted:
        return [e for e in events if e[1] is not None]
    inv = {new: old for old, new in report.addr_map.items()}
    finals = {a for a in report.hops if isinstance(transformed.at(a), IndirectJump)}
    passthrough = {report.addr_map[a] for a in report.passthrough}
    out = []
    entered = None
    for addr, taken, nxt in events:
        if taken is None:
            continue
        if addr in report.site_source:
            if entered is None:
                entered = report.site_source[addr]
        elif addr in finals:
            if entered is not None:
                dest = inv.get(nxt, nxt)
                ins = original.at(entered)
                tk = dest == ins.target if isinstance(ins, CondBranch) else True
                out.append((entered, tk, dest))
            entered = None
        elif addr in passthrough:
            out.append((inv[addr], True, inv.get(nxt, nxt)))
    return out


def runtime_fanout(transformed: Program, report: TransformReport,
                   inputs: Iterable[Mapping]) -> list[set[int]]:
    """Distinct targets each trampoline's final indirect jump took over ``inputs``."""
    finals = [a for a in report.hops if isinstance(transformed.at(a), IndirectJump)]
    seen = {a: set() for a in finals}
    for x in inputs:
        for addr, taken, nxt in interpret(transformed, x).branch_events():
            if addr in seen:
                seen[addr].add(nxt)
    return [seen[a] for a in finals]


# --------------------------------------------------------------------------
# overhead and leakage
# --------------------------------------------------------------------------

@dataclass
class OverheadReport:
    instr_ratios: list
    cycle_ratios: list

    @staticmethod
    def _geomean(xs: Sequence[float]) -> float:
        return math.exp(sum(math.log(x) for x in xs) / len(xs)) if xs else 1.0

    @property
    def instr_geomean(self) -> float:
        return self._geomean(self.instr_ratios)

    @property
    def cycle_geomean(self) -> float:
        return self._geomean(self.cycle_ratios)


def measure_overhead(original: Program, transformed: Program,
                     inputs: Iterable[Mapping]) -> OverheadReport:
    """Dynamic instruction and cycle ratios, transformed over original."""
    ir_, cr = [], []
    for x in inputs:
        a = run_with_interrupts(original, x, None, uarch=Microarchitecture())
        b = run_with_interrupts(transformed, x, None, uarch=Microarchitecture())
        ir_.append(b.instructions / a.instructions)
        cr.append(b.cycles / a.cycles)
    return OverheadReport(ir_, cr)


def direct_branch_sources(program: Program, inputs: Mapping, region: set[int] | None = None,
                          fuel: int = 1_000_000) -> list[int]:
    """Executed direct-branch source addresses, in order (optionally within ``region``)."""
    kinds = program.branch_kinds()
    out = []
    for addr, _taken, _nxt in interpret(program, inputs, fuel).branch_events():
        if kinds[addr] != "indirect" and (region is None or addr in region):
            out.append(addr)
    return out


def first_touch(seq: Iterable[int]) -> list[int]:
    seen = set()
    out = []
    for a in seq:
        if a not in seen:
            seen.add(a)
            out.append(a)
    return out


def leakage_check(program: Program, secret_a: Mapping, secret_b: Mapping,
                  report: TransformReport | None = None) -> bool:
    """True when the two secrets give the same attacker-visible direct-branch trace.

    The observable is the order in which distinct direct-branch sources are
    first executed inside the transformed region (the whole program for an
    untransformed one).  A later re-entry into a chain only revisits sources
    already seen, so this is what a shadowing attacker can tell apart.
    """
    region = report.region if report is not None and report.converted else None
    ta = first_touch(direct_branch_sources(program, secret_a, region))
    tb = first_touch(direct_branch_sources(program, secret_b, region))
    return ta == tb

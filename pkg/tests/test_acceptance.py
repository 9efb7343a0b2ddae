"""Acceptance checks, one test per criterion.

Each test prints a single ``criterion N PASS|FAIL`` line (visible with or
without ``-s``) and then asserts at the stated tolerance.  Run just these
with ``pytest tests/test_acceptance.py -v``.
"""
import random
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, Phase, given, settings, strategies as st

from branchshadow import victims
from branchshadow.attacker import (EXECUTED, Attacker, NOT_EXECUTED, NOT_TAKEN, TAKEN, TargetBranch,
                                   bayes_single_probe_accuracy, derive_threshold, make_shadow,
                                   monte_carlo_accuracy, probe)
from branchshadow.campaign import ExperimentConfig, run_campaign, sweep_flush
from branchshadow.cli import timing_table
from branchshadow.harness import CACHE_DISABLED, NORMAL, run_with_interrupts
from branchshadow.ir import CONDITIONAL, INDIRECT, UNCONDITIONAL, assemble, interpret
from branchshadow.uarch import (ALIAS_OFFSET, ATTACKER, ENCLAVE, GSHARE, LBR_CYCLES, LBR_FLAG,
                                PT_CYC, RDTSCP, Lbr, LbrRecord, Microarchitecture,
                                TimingChannelModel, btb_index)
from branchshadow.zigzagger import (ALL, ZigzaggerConfig, leakage_check, measure_overhead,
                                    runtime_fanout, source_events, transform)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n} {'PASS' if ok else 'FAIL'}: {detail}")
        return ok
    return emit


# 1. deterministic-channel correctness -----------------------------------------

def test_criterion_1_lbr_flag_recovers_every_secret(verdict):
    t0 = time.perf_counter()
    acc = {}
    for name in victims.VICTIMS:
        rep = run_campaign(ExperimentConfig(victim=name, trials=1000, seed=0))
        acc[name] = rep.accuracy
    elapsed = time.perf_counter() - t0
    ok = all(a == 1.0 for a in acc.values()) and elapsed < 60
    detail = ", ".join(f"{k}={v:.3f}" for k, v in acc.items())
    verdict(1, ok, f"1000 trials each, {detail}; {elapsed:.1f}s total (limit 60s)")
    assert ok


# 2. the six inferable states ----------------------------------------------------

COND = assemble("""
.base 0x10000000
    set r1, p
c:  br r1, t
    nop
t:  halt
""")

UNC = assemble("""
.base 0x10000000
    set r1, p
    br r1, skip
u:  jmp t
    nop
t:  halt
skip:
    halt
""")

IND = assemble("""
.base 0x10000000
    set r1, p
    set r2, @t
    br r1, skip
i:  ijmp r2 [t]
    nop
t:  halt
skip:
    halt
""")


def _shadow(prog, label, channel):
    t = TargetBranch.of(prog, prog.label_addr(label))
    return make_shadow(t, t.kind, channel, (prog.base, prog.end))


def _probe_after(prog, x, sp, **kw):
    u, lbr = Microarchitecture(), Lbr()
    run_with_interrupts(prog, x, None, uarch=u, lbr=lbr)
    return probe(sp, u, lbr, **kw)


def test_criterion_2_table_rows(verdict):
    const = TimingChannelModel.constant()
    th = derive_threshold(const, LBR_CYCLES)
    rows = [
        ("conditional taken", COND, "c", LBR_FLAG, {"p": 1}, (TAKEN, "correct")),
        ("conditional not-taken", COND, "c", LBR_FLAG, {"p": 0}, (NOT_TAKEN, "mispredict")),
        ("unconditional executed", UNC, "u", LBR_CYCLES, {"p": 0}, (EXECUTED, "mispredict")),
        ("unconditional not-executed", UNC, "u", LBR_CYCLES, {"p": 1},
         (NOT_EXECUTED, "correct")),
        ("indirect executed", IND, "i", LBR_FLAG, {"p": 0}, (EXECUTED, "mispredict")),
        ("indirect not-executed", IND, "i", LBR_FLAG, {"p": 1},
         (NOT_EXECUTED, "correct")),
    ]
    bad = []
    for name, prog, label, ch, x, expect in rows:
        kw = {"timing": const, "threshold": th} if ch == LBR_CYCLES else {}
        r = _probe_after(prog, x, _shadow(prog, label, ch), **kw)
        if (r.label, r.classified) != expect:
            bad.append(f"{name}: got {r.label}/{r.classified}")
    ok = not bad
    verdict(2, ok, "all six rows match" if ok else "; ".join(bad))
    assert ok


# 3. timing-channel fidelity ------------------------------------------------------

def test_criterion_3_timing_table(verdict):
    rows = timing_table(1_000_000, 0)
    worst_mu = max(r[7] for r in rows)
    worst_sd = max(r[8] for r in rows)
    ok = len(rows) == 6 and worst_mu <= 0.01 and worst_sd <= 0.02
    verdict(3, ok, f"10^6 samples per cell, worst mean error {worst_mu:.4%} (limit 1%), "
                   f"worst sigma error {worst_sd:.4%} (limit 2%)")
    assert ok


# 4. noisy unconditional inference ------------------------------------------------

def test_criterion_4_lbr_cycles_inference(verdict):
    closed = bayes_single_probe_accuracy(TimingChannelModel(), LBR_CYCLES)
    mc = monte_carlo_accuracy(TimingChannelModel(seed=0), LBR_CYCLES, 1_000_000)

    # campaign: one 25-vote probe per trial, half the trials execute the jump
    timing = TimingChannelModel(seed=1)
    th = derive_threshold(timing, LBR_CYCLES)
    sp = _shadow(UNC, "u", LBR_CYCLES)
    rng = random.Random(0)
    trials, hits = 2000, 0
    for _ in range(trials):
        executed = rng.random() < 0.5
        r = _probe_after(UNC, {"p": 0 if executed else 1}, sp, timing=timing, threshold=th,
                         repeats=25)
        hits += r.label == (EXECUTED if executed else NOT_EXECUTED)
    campaign = hits / trials
    ok = abs(mc - closed) <= 0.01 and campaign >= 0.95
    verdict(4, ok, f"closed form {closed:.4f}, Monte Carlo {mc:.4f} (tolerance 1pp); "
                   f"25-vote campaign {campaign:.4f} over {trials} trials (need >= 0.95)")
    assert ok


# 5. channel ordering ------------------------------------------------------------

def test_criterion_5_channel_ordering(verdict):
    m = TimingChannelModel()
    acc = {ch: bayes_single_probe_accuracy(m, ch) for ch in (LBR_CYCLES, PT_CYC, RDTSCP)}
    ok = acc[LBR_CYCLES] > acc[PT_CYC] > acc[RDTSCP]
    verdict(5, ok, "single-probe accuracy " + ", ".join(f"{k}={v:.4f}" for k, v in acc.items())
            + " (need lbr-cycles > pt-cyc > rdtscp)")
    assert ok


# 6. flush countermeasure --------------------------------------------------------

PERIODS = [100, 1_000, 10_000, 100_000, 1_000_000]


def _nondecreasing(xs, tol=1e-12):
    return all(b >= a - tol for a, b in zip(xs, xs[1:]))


def test_criterion_6_flush(verdict):
    # on-switch flush: per-branch balanced accuracy over all victims
    per_branch, probes = [], 0
    for name in victims.VICTIMS:
        rep = run_campaign(ExperimentConfig(victim=name, flush="on-switch", trials=200, seed=0))
        per_branch += list(rep.branch_accuracy().values())
        probes += rep.conditional_probes
    on_switch = float(np.mean(per_branch))

    # periodic sweep, averaged over the corpus
    acc = np.zeros(len(PERIODS))
    ipc = np.zeros(len(PERIODS))
    base_ipc = 0.0
    for name in victims.VICTIMS:
        cfg = ExperimentConfig(victim=name, trials=100, seed=0)
        base_ipc += run_campaign(cfg).mean_ipc / len(victims.VICTIMS)
        for i, (_, rep) in enumerate(sweep_flush(cfg, PERIODS)):
            acc[i] += rep.accuracy / len(victims.VICTIMS)
            ipc[i] += rep.mean_ipc / len(victims.VICTIMS)
    ratio = ipc[-1] / base_ipc

    ok = (abs(on_switch - 0.5) <= 0.05 and probes >= 10_000 and _nondecreasing(acc)
          and _nondecreasing(ipc) and abs(1 - ratio) <= 0.02)
    verdict(6, ok, f"on-switch balanced accuracy {on_switch:.4f} over {probes} conditional "
                   f"probes; sweep accuracy {np.round(acc, 4).tolist()}, "
                   f"ipc {np.round(ipc, 4).tolist()}; 1M-cycle ipc / no-flush ipc {ratio:.4f}")
    assert ok


# 7. zigzagger security property --------------------------------------------------

def test_criterion_7_zigzag_leakage(verdict, select3):
    notes, ok = [], True
    for name in victims.VICTIMS:
        v = victims.build(name)
        new, rep = transform(v.program, ZigzaggerConfig(ALL, seed=0))
        rng = random.Random(7)
        pairs = [(v.random_input(rng), v.random_input(rng)) for _ in range(100)]
        hidden = sum(leakage_check(new, a, b, rep) for a, b in pairs)
        exposed = sum(not leakage_check(v.program, a, b) for a, b in pairs)
        ok &= hidden == 100 and exposed >= 1
        notes.append(f"{name} {hidden}/100 equal after, {exposed} differ before")
    new, rep = transform(select3, ZigzaggerConfig(ALL))
    inputs = [{"a": a, "b": b} for a in (0, 1) for b in (0, 1)]
    fan = [len(s) for s in runtime_fanout(new, rep, inputs)]
    ok &= rep.fanout == [5] and fan == [5]
    verdict(7, ok, "; ".join(notes) + f"; select3 fan-out {rep.fanout} (runtime {fan})")
    assert ok


# 8. zigzagger semantics and cost -------------------------------------------------

def _equivalent(v, new, rep, x):
    ref, got = interpret(v.program, x), interpret(new, x)
    back = {b: a for a, b in rep.addr_map.items()}
    return (ref.registers[:16] == [back.get(r, r) for r in got.registers[:16]]
            and source_events(v.program, new, rep, got.branch_events()) == ref.branch_events())


def test_criterion_8_zigzag_semantics_and_cost(verdict):
    notes, ok = [], True
    for name in victims.VICTIMS:
        v = victims.build(name)
        rng = random.Random(8)
        inputs = [v.random_input(rng) for _ in range(1000)]
        geo = {}
        for k in (3, ALL):
            new, rep = transform(v.program, ZigzaggerConfig(k, seed=0))
            same = sum(_equivalent(v, new, rep, x) for x in inputs)
            ok &= same == len(inputs)
            geo[k] = measure_overhead(v.program, new, inputs).instr_geomean
        ok &= geo[3] <= geo[ALL]
        notes.append(f"{name} k=3 {geo[3]:.3f}x, k=all {geo[ALL]:.3f}x")
    verdict(8, ok, "1000 inputs equivalent per victim; instruction geomean " + "; ".join(notes))
    assert ok


# 9. microarchitectural laws --------------------------------------------------------

PROPERTY = settings(max_examples=10_000, deadline=None, database=None, derandomize=True,
                    phases=[Phase.generate], suppress_health_check=list(HealthCheck))
LOW31 = (1 << 31) - 1


def _set_of(addr):
    low = addr & 0xFFFF
    return (low ^ (low >> 6)) & 1023


@st.composite
def address_pairs(draw):
    a = draw(st.integers(0, (1 << 40) - 1))
    how = draw(st.sampled_from(["random", "low16", "low31", "tagbit"]))
    if how == "random":
        b = draw(st.integers(0, (1 << 40) - 1))
    elif how == "low16":
        b = (a & 0xFFFF) | (draw(st.integers(0, (1 << 24) - 1)) << 16)
    elif how == "low31":
        b = (a & LOW31) | (draw(st.integers(0, (1 << 9) - 1)) << 31)
    else:
        b = a ^ (1 << draw(st.integers(16, 30)))
    return a, b


def law_collision(count):
    @PROPERTY
    @given(pair=address_pairs(), target=st.integers(0, (1 << 40) - 1))
    def prop(pair, target):
        count[0] += 1
        a, b = pair
        u = Microarchitecture()
        u.btb_insert(a, target)
        if a & 0xFFFF == b & 0xFFFF:
            assert btb_index(a) == btb_index(b)
        same_entry = _set_of(a) == _set_of(b) and (a >> 16) & 0x7FFF == (b >> 16) & 0x7FFF
        if a & LOW31 == b & LOW31:
            assert same_entry
        assert (u.btb_peek(b) is not None) == same_entry
        p = u.predict_branch(UNCONDITIONAL, b, b + 64)
        want = (b & ~LOW31) | (target & LOW31) if same_entry else b + 64
        assert p.predicted_target == want
    prop()


def law_lru(count):
    base = 0x1234  # every tag below maps to the same set

    @PROPERTY
    @given(ops=st.lists(st.tuples(st.booleans(), st.integers(0, 7)), max_size=40))
    def prop(ops):
        count[0] += 1
        u = Microarchitecture()
        lru = []  # oldest first
        for insert, tag in ops:
            addr = base | (tag << 16)
            if insert:
                u.btb_insert(addr, tag)
                if tag in lru:
                    lru.remove(tag)
                elif len(lru) == 4:
                    lru.pop(0)
                lru.append(tag)
            else:
                hit = u.btb_lookup(addr) is not None
                assert hit == (tag in lru)
                if hit:
                    lru.remove(tag)
                    lru.append(tag)
        assert [t for t, _ in u.set_entries(btb_index(base))] == lru
    prop()


def law_gshare(count):
    @PROPERTY
    @given(ops=st.lists(st.tuples(st.integers(0, 15), st.booleans()), max_size=60))
    def prop(ops):
        count[0] += 1
        u = Microarchitecture(mode=GSHARE)
        pht, hist = {}, 0
        for slot, taken in ops:
            addr = 0x1000_0000 + 4 * slot
            i = (hist ^ (addr >> 2)) & 0xFFFF
            c = pht.get(i, 1)
            p = u.predict_branch(CONDITIONAL, addr, addr + 64)
            assert p.predicted_taken == (c >= 2)
            u.resolve_and_train(CONDITIONAL, addr, p, taken, addr + 64 if taken else addr + 4)
            pht[i] = min(3, c + 1) if taken else max(0, c - 1)
            hist = ((hist << 1) | taken) & 0xFFFF
            assert u.pht_counter(i) == pht[i] and 0 <= pht[i] <= 3
            assert u.history == hist
    prop()


branch_op = st.tuples(st.sampled_from([CONDITIONAL, UNCONDITIONAL, INDIRECT]),
                      st.integers(0, 63), st.booleans(), st.integers(1, 4), st.booleans())


def law_flush(count):
    @PROPERTY
    @given(ops=st.lists(branch_op, max_size=40), mode=st.sampled_from(["btb-only", GSHARE]),
           queries=st.lists(st.integers(0, 63), min_size=1, max_size=8))
    def prop(ops, mode, queries):
        count[0] += 1
        u = Microarchitecture(mode=mode)
        for kind, slot, alias, d, taken in ops:
            addr = 0x1000_0000 + slot * 0x4004 + (ALIAS_OFFSET if alias else 0)
            taken = taken or kind == UNCONDITIONAL
            target = addr + 4 * d if taken else addr + 4
            p = u.predict_branch(kind, addr, addr + 4 * d if kind != INDIRECT else None)
            u.resolve_and_train(kind, addr, p, taken, target)
        u.flush()
        fresh = Microarchitecture(mode=mode)
        assert u.state_key() == fresh.state_key()
        u.flush()
        assert u.state_key() == fresh.state_key()
        for slot in queries:
            addr = 0x1000_0000 + slot * 0x4004
            for kind in (CONDITIONAL, UNCONDITIONAL, INDIRECT):
                st_t = None if kind == INDIRECT else addr + 16
                got = u.predict_branch(kind, addr, st_t)
                want = fresh.predict_branch(kind, addr, st_t)
                assert (got.predicted_taken, got.predicted_target) == \
                       (want.predicted_taken, want.predicted_target)
                # no history: conditional and indirect fall through, jumps go direct
                assert got.predicted_taken == (kind == UNCONDITIONAL)
    prop()


record = st.builds(LbrRecord, st.integers(0, 1 << 32), st.integers(0, 1 << 32), st.booleans(),
                   st.floats(1, 1000), st.sampled_from([ATTACKER, ENCLAVE]),
                   st.sampled_from([CONDITIONAL, UNCONDITIONAL, INDIRECT]))


def law_lbr(count):
    @PROPERTY
    @given(recs=st.lists(record, max_size=80))
    def prop(recs):
        count[0] += 1
        lbr = Lbr()
        for r in recs:
            lbr.append(r)
        kept = recs[-32:]
        got = lbr.read(filtering=False)
        assert len(got) == len(kept) <= 32
        for g, r in zip(got, kept):
            assert (g.from_addr, g.to_addr, g.context, g.kind) == \
                   (r.from_addr, r.to_addr, r.context, r.kind)
            assert g.predicted == (r.predicted or r.kind == UNCONDITIONAL)
        assert lbr.read() == [g for g in got if g.context == ATTACKER]
    prop()


def _fuzzed_unconditional_masking(runs=200):
    """Attacker probes after fuzzed victim runs never log a mispredicted jump."""
    rng = random.Random(9)
    n = 0
    for name in victims.VICTIMS:
        v = victims.build(name)
        for _ in range(runs // len(victims.VICTIMS)):
            att = Attacker(v.program)
            lbr = Lbr()
            run_with_interrupts(v.program, v.random_input(rng), CACHE_DISABLED, att,
                                seed=rng.randrange(1 << 30), lbr=lbr)
            for r in lbr.read(filtering=False):
                assert r.kind != UNCONDITIONAL or r.predicted
                n += 1
    return n


def test_criterion_9_microarchitectural_laws(verdict):
    laws = {"collision": law_collision, "lru": law_lru, "gshare": law_gshare,
            "flush": law_flush, "lbr": law_lbr}
    notes, ok = [], True
    for name, law in laws.items():
        count = [0]
        try:
            law(count)
            good = count[0] >= 10_000
        except Exception as exc:  # report every law before failing
            good = False
            name += f" ({type(exc).__name__})"
        ok &= good
        notes.append(f"{name} {count[0]} cases {'ok' if good else 'FAILED'}")
    try:
        recs = _fuzzed_unconditional_masking()
        notes.append(f"masking over fuzzed runs ok ({recs} records)")
    except AssertionError:
        ok = False
        notes.append("masking over fuzzed runs FAILED")
    verdict(9, ok, "; ".join(notes))
    assert ok


# 10. interrupt model --------------------------------------------------------------

def test_criterion_10_interrupt_windows(verdict):
    rng = np.random.default_rng(0)
    means = {m.name: float(m.sample(rng, 100_000).mean()) for m in (NORMAL, CACHE_DISABLED)}
    errs = {NORMAL.name: abs(means["normal"] - 48.76) / 48.76,
            CACHE_DISABLED.name: abs(means["cache-disabled"] - 4.71) / 4.71}
    ok = all(e <= 0.01 for e in errs.values())
    verdict(10, ok, ", ".join(f"{k} mean {means[k]:.3f} (error {errs[k]:.3%})" for k in means)
            + " over 10^5 windows")
    assert ok

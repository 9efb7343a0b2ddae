import random

import pytest
from hypothesis import given, settings, strategies as st

from branchshadow import victims
from branchshadow.attacker import (EXECUTED, NOT_EXECUTED, NOT_TAKEN, TAKEN, Attacker,
                                   InconsistentObservations, ProbeError, ShadowError,
                                   TargetBranch, bayes_single_probe_accuracy, derive_threshold,
                                   gaussian_crossings, infer_indirect_target,
                                   locate_active_function, make_eviction_monitor, make_shadow,
                                   monte_carlo_accuracy, probe, probe_conditional,
                                   probe_indirect, probe_set_eviction, probe_unconditional,
                                   reconstruct_control_flow, threshold_accuracy, window_truth)
from branchshadow.harness import CACHE_DISABLED, run_with_interrupts
from branchshadow.ir import CONDITIONAL, INDIRECT, UNCONDITIONAL, assemble, interpret
from branchshadow.uarch import (ALIAS_OFFSET, LBR_CYCLES, LBR_FLAG, PT_CYC, RDTSCP,
                                TIMING_CHANNELS, Lbr, Microarchitecture, TimingChannelModel,
                                btb_index, btb_tag)

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
    set r2, @t if q == 0 else @n
    br r1, skip
i:  ijmp r2 [t, n]
n:  nop
t:  halt
skip:
    halt
""")


def victim_then(prog, x, sp, **kw):
    u, lbr = Microarchitecture(), Lbr()
    run_with_interrupts(prog, x, None, uarch=u, lbr=lbr)
    return probe(sp, u, lbr, **kw)


def shadow(prog, label, channel=LBR_FLAG):
    t = TargetBranch.of(prog, prog.label_addr(label))
    return make_shadow(t, t.kind, channel, (prog.base, prog.end))


# shadow synthesis ------------------------------------------------------------

def test_conditional_shadow_aliases():
    sp = shadow(COND, "c")
    assert sp.shadow_addr == COND.label_addr("c") + ALIAS_OFFSET
    assert sp.script[0][4] is True  # always taken
    assert btb_index(sp.shadow_addr) == btb_index(sp.target.addr)
    assert btb_tag(sp.shadow_addr) == btb_tag(sp.target.addr)


def test_unconditional_shadow_target_differs():
    sp = shadow(UNC, "u", LBR_CYCLES)
    kind, addr, static, _ft, taken, target = sp.script[0]
    assert taken and target != UNC.label_addr("t") + ALIAS_OFFSET


def test_indirect_shadow_targets_next():
    sp = shadow(IND, "i")
    assert sp.registers[0] == sp.shadow_addr + 4


def test_shadow_errors():
    t = TargetBranch.of(COND, COND.label_addr("c"))
    with pytest.raises(ShadowError):
        make_shadow(t, UNCONDITIONAL)
    image = (COND.base, COND.end)
    with pytest.raises(ShadowError, match="collides"):
        make_shadow(t, CONDITIONAL, LBR_FLAG, image,
                    occupied=[(COND.base + ALIAS_OFFSET, COND.base + ALIAS_OFFSET + 64)])


@pytest.mark.parametrize("name", victims.VICTIMS)
def test_alias_correctness(name):
    att = Attacker(victims.build(name).program)
    for sp in att.probes:
        assert btb_index(sp.shadow_addr) == btb_index(sp.target.addr)
        assert btb_tag(sp.shadow_addr) == btb_tag(sp.target.addr)


# the six inferable states ----------------------------------------------------

def test_conditional_states():
    sp = shadow(COND, "c")
    assert victim_then(COND, {"p": 1}, sp).label == TAKEN
    assert victim_then(COND, {"p": 0}, sp).label == NOT_TAKEN
    u, lbr = Microarchitecture(), Lbr()
    assert probe_conditional(sp, u, lbr).label == NOT_TAKEN  # never ran


def test_unconditional_states():
    model = TimingChannelModel.constant()
    th = derive_threshold(model, LBR_CYCLES)
    sp = shadow(UNC, "u", LBR_CYCLES)
    r = victim_then(UNC, {"p": 0}, sp, timing=model, threshold=th)
    assert r.label == EXECUTED
    r = victim_then(UNC, {"p": 1}, sp, timing=model, threshold=th)
    assert r.label == NOT_EXECUTED and r.confidence == 1.0
    with pytest.raises(ProbeError):
        probe_unconditional(shadow(UNC, "u"), Microarchitecture(), Lbr(), model, th)


def test_indirect_states():
    sp = shadow(IND, "i")
    assert victim_then(IND, {"p": 0, "q": 0}, sp).label == EXECUTED
    assert victim_then(IND, {"p": 1, "q": 0}, sp).label == NOT_EXECUTED
    # jumping to its own next instruction looks like not executed
    assert victim_then(IND, {"p": 0, "q": 1}, sp).label == NOT_EXECUTED


def test_probe_kind_checks():
    with pytest.raises(ProbeError):
        probe_indirect(shadow(COND, "c"), Microarchitecture(), Lbr())
    sp = shadow(COND, "c")
    with pytest.raises(ProbeError):  # LBR without attacker records
        from branchshadow.attacker import _read
        _read(sp, [0], Lbr(), None)


# thresholds --------------------------------------------------------------------

def test_threshold_examples():
    m = TimingChannelModel()
    th = derive_threshold(m, LBR_CYCLES)
    assert 25.69 < th.boundary < 35.04 and th.between_means
    eq = TimingChannelModel({LBR_CYCLES: (10.0, 3.0, 20.0, 3.0)})
    assert derive_threshold(eq, LBR_CYCLES).boundary == 15.0
    with pytest.raises(ValueError):
        derive_threshold(TimingChannelModel({RDTSCP: (5.0, 1.0, 5.0, 2.0)}), RDTSCP)
    for ch in (RDTSCP, PT_CYC):
        assert derive_threshold(m, ch).boundary in gaussian_crossings(*m.channel_params(ch))


@pytest.mark.parametrize("ch", TIMING_CHANNELS)
def test_threshold_is_a_density_crossing_and_optimal(ch):
    m = TimingChannelModel()
    p = m.channel_params(ch)
    b = derive_threshold(m, ch).boundary
    acc = threshold_accuracy(p, b)
    for d in (-5.0, -0.5, 0.5, 5.0):
        assert threshold_accuracy(p, b + d) <= acc + 1e-12


def test_single_probe_lbr_accuracy_closed_form():
    m = TimingChannelModel()
    assert abs(bayes_single_probe_accuracy(m, LBR_CYCLES) - 0.68) < 0.01
    assert abs(monte_carlo_accuracy(TimingChannelModel(seed=5), LBR_CYCLES, 200_000)
               - bayes_single_probe_accuracy(m, LBR_CYCLES)) < 0.01


# target inference, eviction, function location --------------------------------

def test_infer_indirect_target():
    v = victims.build_libsvm_kernel()
    sw = v.addr("sw")
    t = TargetBranch.of(v.program, sw)
    cands = [v.addr(k) for k in ("k_lin", "k_poly", "k_rbf", "k_sig", "k_pre")]
    x = victims.libsvm_inputs("RBF", 3)

    def rerun():
        u = Microarchitecture()
        run_with_interrupts(v.program, x, None, uarch=u)
        return u

    image = (v.program.base, v.program.end)
    assert infer_indirect_target(t, rerun, cands, image) == cands[2]
    assert infer_indirect_target(t, rerun, [cands[2]], image) == cands[2]
    assert infer_indirect_target(t, rerun, [], image) is None


def test_set_eviction():
    addr = COND.label_addr("c")
    mon = make_eviction_monitor(btb_index(addr))
    for ran, expect in ((True, True), (False, False)):
        u, lbr = Microarchitecture(), Lbr()
        mon.prime(u, lbr)
        run_with_interrupts(COND, {"p": int(ran)}, None, uarch=u, lbr=lbr)
        assert probe_set_eviction(mon, u, lbr) is expect
    other = make_eviction_monitor((btb_index(addr) + 7) % 1024)
    u, lbr = Microarchitecture(), Lbr()
    other.prime(u, lbr)
    run_with_interrupts(COND, {"p": 1}, None, uarch=u, lbr=lbr)
    assert probe_set_eviction(other, u, lbr) is False


FUNCS = assemble("""
.base 0x10000000
    set r9, 1
    set r1, f == 1
    set r2, f == 2
    br r1, fb
fa: br r9, fa_body
    halt
fa_body:
    br r2, fb
    halt
fb: br r9, fb_body
    halt
fb_body:
    halt
""")


def test_locate_active_function():
    prologues = {"A": shadow(FUNCS, "fa"), "B": shadow(FUNCS, "fb")}
    for f, expect in ((0, "A"), (1, "B"), (2, None)):
        u, lbr = Microarchitecture(), Lbr()
        run_with_interrupts(FUNCS, {"f": f}, None, uarch=u, lbr=lbr)
        assert locate_active_function(prologues, u, lbr) == expect
    assert locate_active_function(prologues, Microarchitecture(), Lbr()) is None


# reconstruction ----------------------------------------------------------------

def attack(v, x, seed=0):
    att = Attacker(v.program)
    rep = run_with_interrupts(v.program, x, CACHE_DISABLED, att, seed=seed)
    obs = [o.labels for o in rep.observations]
    return rep, obs, att


def test_modexp_recovery():
    v = victims.build_modexp_montmul()
    x = victims.modexp_inputs(7, 0b1011, 0xF123_4567_89AB_CDEF, 4)
    rep, obs, att = attack(v, x)
    rec = reconstruct_control_flow(v.program, obs, att.observed, CACHE_DISABLED.max_window())
    assert v.leak_from_events(rec.events) == "1011"
    assert victims.montmul_labels(v, rec.events) == victims.reference_montmul_labels(x)


def test_strtol_recovery():
    v = victims.build_strtol()
    rep, obs, att = attack(v, victims.strtol_inputs("-42"))
    rec = reconstruct_control_flow(v.program, obs, att.observed, CACHE_DISABLED.max_window())
    sign, length, _ = v.leak_from_events(rec.events)
    assert (sign, length) == ("neg", 2)


def test_inconsistent_observations():
    v = victims.build_strtol()
    rep, obs, att = attack(v, victims.strtol_inputs("12"))
    bad = [dict(o) for o in obs]
    bad[0][v.addr("negbr")] = TAKEN
    bad[-1][v.addr("posbr")] = TAKEN
    with pytest.raises(InconsistentObservations) as e:
        reconstruct_control_flow(v.program, bad, att.observed, CACHE_DISABLED.max_window())
    assert "conflict" in str(e.value)
    with pytest.raises(InconsistentObservations):
        reconstruct_control_flow(v.program, [], att.observed, 4)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_probe_neutrality_and_flag_determinism(seed):
    v = victims.build_vfprintf()
    x = v.random_input(random.Random(seed))
    r1, o1, _ = attack(v, x, seed)
    r2, o2, _ = attack(v, x, seed)
    assert o1 == o2
    assert r1.trace.events == interpret(v.program, x).events
    truth = window_truth(v.program, r1.trace.events, r1.windows)
    for lab, tru in zip(o1, truth):
        for a, l in lab.items():
            assert (l in (TAKEN, EXECUTED)) == (tru.get(a) in (TAKEN, EXECUTED))

import pytest
from hypothesis import given, settings, strategies as st

from branchshadow import victims
from branchshadow.ir import (CONDITIONAL, UNCONDITIONAL, CondBranch, CondMove, ExecutionError,
                             IRError, Jump, assemble, interpret)


def test_single_halt():
    p = assemble("halt", base=0x4000)
    assert len(p) == 1 and p.base == 0x4000 and p.entry_addr == 0x4000
    t = interpret(p)
    assert len(t) == 1 and t.halted and not t.fuel_exhausted


def test_select3_shape(select3):
    kinds = list(select3.branch_kinds().values())
    assert kinds.count(CONDITIONAL) == 2 and kinds.count(UNCONDITIONAL) == 2
    assert sum(isinstance(i, CondBranch) for i in select3.instructions) == 2
    assert sum(isinstance(i, Jump) for i in select3.instructions) == 2


def test_select3_paths(select3):
    t = interpret(select3, {"a": 5, "b": 0})
    addrs = set(t.addresses())
    assert t.registers[0] == 1
    assert select3.label_addr("test_b") not in addrs
    assert select3.label_addr("block3") not in addrs
    assert interpret(select3, {"a": 0, "b": 1}).registers[0] == 2
    assert interpret(select3, {"a": 0, "b": 0}).registers[0] == 3


@pytest.mark.parametrize("src, msg", [
    ("jmp nowhere\nhalt", "unresolved label"),
    ("x: halt\nx: halt", "duplicate label"),
    (".base 0x1000\njmp 0x0\nhalt", "outside image"),
    ("set r0, @missing\nhalt", "unresolved label"),
])
def test_assemble_errors(src, msg):
    with pytest.raises(IRError, match=msg):
        assemble(src)


def test_fuel_exhaustion_is_flagged():
    t = interpret(assemble("top: jmp top"), fuel=50)
    assert t.fuel_exhausted and not t.halted and len(t) == 50


def test_bad_indirect_target():
    with pytest.raises(ExecutionError):
        interpret(assemble("set r1, 3\nijmp r1\nhalt"))
    with pytest.raises(ValueError):
        interpret(assemble("halt"), fuel=0)


def test_modexp_bits_follow_exponent():
    v = victims.build_modexp_montmul()
    x = victims.modexp_inputs(7, 0b1011, 0xF123_4567_89AB_CDEF, 4)
    bit = v.addr("bitbr")
    outs = [t for a, t, _ in interpret(v.program, x).branch_events() if a == bit]
    assert outs == [True, False, True, True]
    assert interpret(v.program, x).registers[0] == pow(7, 0b1011, 0xF123_4567_89AB_CDEF)


@pytest.mark.parametrize("name", victims.VICTIMS)
def test_round_trip(name):
    p = victims.build(name).program
    q = assemble(p.to_text())
    assert q.instructions == p.instructions and q.base == p.base
    assert assemble(q.to_text()).to_text() == q.to_text()


@given(a=st.integers(-3, 3), b=st.integers(-3, 3))
def test_determinism(select3, a, b):
    x = {"a": a, "b": b}
    t1, t2 = interpret(select3, x), interpret(select3, x)
    assert t1.events == t2.events and t1.registers == t2.registers


@settings(max_examples=200)
@given(new_base=st.integers(0, 1 << 40).map(lambda v: v * 4),
       text=st.sampled_from(["", "-", "+"]), digits=st.text("0123456789abc", max_size=5))
def test_relocation(new_base, text, digits):
    v = victims.build_strtol()
    x = victims.strtol_inputs(text + digits, 16)
    p = v.program
    q = p.relocate(new_base)
    a, b = interpret(p, x), interpret(q, x)
    delta = new_base - p.base
    assert [e[0] + delta for e in a.events] == [e[0] for e in b.events]
    assert [e[1] for e in a.events] == [e[1] for e in b.events]
    assert a.registers[0] == b.registers[0]


CMOV = """
    set r1, p
    set r2, 10
    cmov r1, r2, @other
    set r0, r2
    halt
other:
    halt
"""

DIAMOND = """
    set r1, p
    set r2, 10
    br r1, yes
    jmp join
yes:
    set r2, @other
join:
    set r0, r2
    halt
other:
    halt
"""


@given(p=st.integers(-2, 2))
def test_condmove_matches_if_diamond(p):
    a = assemble(CMOV)
    b = assemble(DIAMOND)
    ra, rb = interpret(a, {"p": p}).registers[0], interpret(b, {"p": p}).registers[0]
    if p:
        assert ra == a.label_addr("other") and rb == b.label_addr("other")
    else:
        assert ra == rb == 10
    assert any(isinstance(i, CondMove) for i in a.instructions)

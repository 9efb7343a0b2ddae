"""Branch-centric toy IR: instructions, programs, text format and the
architectural interpreter that defines ground truth.

Addresses advance by a fixed 4-byte stride from the program base.  A branch
target is always an absolute address inside the same image.
"""
from __future__ import annotations

import ast
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping

STRIDE = 4
NUM_GENERAL_REGS = 16
RESERVED_REG = NUM_GENERAL_REGS  # "rt", the trampoline register
NUM_REGS = NUM_GENERAL_REGS + 1
ADDR_MASK = (1 << 64) - 1


class IRError(Exception):
    """Malformed program text or an invalid program image."""


class ExecutionError(Exception):
    """Raised by the interpreter for an architecturally invalid execution."""


# branch kinds
CONDITIONAL = "conditional"
UNCONDITIONAL = "unconditional"
INDIRECT = "indirect"


def reg_name(r: int) -> str:
    return "rt" if r == RESERVED_REG else f"r{r}"


def parse_reg(tok: str) -> int:
    tok = tok.strip()
    if tok == "rt":
        return RESERVED_REG
    m = re.fullmatch(r"r(\d+)", tok)
    if not m or int(m.group(1)) >= NUM_GENERAL_REGS:
        raise IRError(f"bad register {tok!r}")
    return int(m.group(1))


# --------------------------------------------------------------------------
# value expressions
# --------------------------------------------------------------------------

_BINOPS = {
    ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.FloorDiv: "//", ast.Mod: "%",
    ast.BitAnd: "&", ast.BitOr: "|", ast.BitXor: "^", ast.LShift: "<<", ast.RShift: ">>",
}
_CMPOPS = {ast.Eq: "==", ast.NotEq: "!=", ast.Lt: "<", ast.LtE: "<=", ast.Gt: ">", ast.GtE: ">="}
_LABEL_RE = re.compile(r"@([A-Za-z_][A-Za-z0-9_.]*)")


@dataclass(frozen=True)
class Expr:
    """An integer expression over registers, inputs and label addresses.

    Python operator syntax is used; ``@name`` denotes the address of a label,
    ``r0``..``r15``/``rt`` are registers and any other identifier is an input.
    Comparisons and ``not`` yield 0/1; ``a if c else b`` is allowed, as is
    subscripting an input (``s[r1]``).
    """

    text: str

    def _tree(self) -> ast.expr:
        src = _LABEL_RE.sub(lambda m: "__L_" + m.group(1).replace(".", "__dot__"), self.text)
        try:
            tree = ast.parse(src.strip(), mode="eval").body
        except SyntaxError as exc:
            raise IRError(f"bad expression {self.text!r}: {exc.msg}") from None
        return tree

    def labels(self) -> set[str]:
        return {m.group(1) for m in _LABEL_RE.finditer(self.text)}

    def registers(self) -> set[int]:
        out = set()
        for node in ast.walk(self._tree()):
            if isinstance(node, ast.Name) and _is_reg_name(node.id):
                out.add(parse_reg(node.id))
        return out

    def compile(self, label_addr: Mapping[str, int]) -> Callable[[list, Mapping], int]:
        body = _emit(self._tree(), label_addr, self.text)
        return eval(f"lambda R, I: {body}", {"__builtins__": {}, "int": int, "bool": bool})  # noqa: S307 - AST whitelisted


def _is_reg_name(name: str) -> bool:
    return name == "rt" or re.fullmatch(r"r\d+", name) is not None


def _emit(node: ast.expr, labels: Mapping[str, int], text: str) -> str:
    def go(n: ast.expr) -> str:
        if isinstance(n, ast.Constant) and isinstance(n.value, int) and not isinstance(n.value, bool):
            return repr(n.value)
        if isinstance(n, ast.Name):
            if n.id.startswith("__L_"):
                name = n.id[4:].replace("__dot__", ".")
                if name not in labels:
                    raise IRError(f"unresolved label {name!r} in expression {text!r}")
                return repr(labels[name])
            if _is_reg_name(n.id):
                return f"R[{parse_reg(n.id)}]"
            return f"I[{n.id!r}]"
        if isinstance(n, ast.BinOp) and type(n.op) in _BINOPS:
            return f"({go(n.left)} {_BINOPS[type(n.op)]} {go(n.right)})"
        if isinstance(n, ast.UnaryOp):
            if isinstance(n.op, ast.USub):
                return f"(-{go(n.operand)})"
            if isinstance(n.op, ast.Not):
                return f"int(not {go(n.operand)})"
            if isinstance(n.op, ast.Invert):
                return f"(~{go(n.operand)})"
        if isinstance(n, ast.Compare) and all(type(o) in _CMPOPS for o in n.ops):
            parts = [go(n.left)]
            for op, right in zip(n.ops, n.comparators):
                parts.append(_CMPOPS[type(op)])
                parts.append(go(right))
            return f"int({' '.join(parts)})"
        if isinstance(n, ast.BoolOp):
            op = " and " if isinstance(n.op, ast.And) else " or "
            return "int(" + op.join(f"bool({go(v)})" for v in n.values) + ")"
        if isinstance(n, ast.IfExp):
            return f"({go(n.body)} if {go(n.test)} else {go(n.orelse)})"
        if isinstance(n, ast.Subscript) and isinstance(n.value, ast.Name) and not _is_reg_name(n.value.id):
            return f"I[{n.value.id!r}][{go(n.slice)}]"
        raise IRError(f"unsupported construct in expression {text!r}")

    return go(node)


# --------------------------------------------------------------------------
# instructions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Compute:
    cost: int = 1

    def __post_init__(self):
        if self.cost < 1:
            raise IRError("compute cost must be positive")


@dataclass(frozen=True)
class SetReg:
    dest: int
    expr: Expr


@dataclass(frozen=True)
class CondBranch:
    pred: int
    target: int


@dataclass(frozen=True)
class Jump:
    target: int


@dataclass(frozen=True)
class IndirectJump:
    reg: int
    # static hint for attackers/analyses, never used by the interpreter
    candidates: tuple[int, ...] = ()


@dataclass(frozen=True)
class CondMove:
    pred: int
    dest: int
    value: int


@dataclass(frozen=True)
class Halt:
    pass


Instruction = Compute | SetReg | CondBranch | Jump | IndirectJump | CondMove | Halt


def branch_kind(ins: Instruction) -> str | None:
    if isinstance(ins, CondBranch):
        return CONDITIONAL
    if isinstance(ins, Jump):
        return UNCONDITIONAL
    if isinstance(ins, IndirectJump):
        return INDIRECT
    return None


def _with_targets(ins: Instruction, fn: Callable[[int], int]) -> Instruction:
    if isinstance(ins, CondBranch):
        return CondBranch(ins.pred, fn(ins.target))
    if isinstance(ins, Jump):
        return Jump(fn(ins.target))
    if isinstance(ins, CondMove):
        return CondMove(ins.pred, ins.dest, fn(ins.value))
    if isinstance(ins, IndirectJump) and ins.candidates:
        return IndirectJump(ins.reg, tuple(fn(c) for c in ins.candidates))
    return ins


# --------------------------------------------------------------------------
# programs
# --------------------------------------------------------------------------

@dataclass
class Program:
    """An assembled program image placed at ``base``."""

    base: int
    instructions: tuple
    labels: dict[str, int] = field(default_factory=dict)  # name -> instruction index
    entry: str | None = None
    name: str = ""

    def __post_init__(self):
        self.instructions = tuple(self.instructions)
        if self.base % STRIDE or self.base < 0:
            raise IRError("base must be a non-negative multiple of the stride")
        if not self.instructions:
            raise IRError("program has no instructions")
        for name, idx in self.labels.items():
            if not 0 <= idx <= len(self.instructions):
                raise IRError(f"label {name!r} outside image")
        if self.entry is not None and self.entry not in self.labels:
            raise IRError(f"unresolved label {self.entry!r}")
        lo, hi = self.base, self.end
        for i, ins in enumerate(self.instructions):
            for t in _targets_of(ins):
                if not (lo <= t < hi) or (t - lo) % STRIDE:
                    raise IRError(f"target {t:#x} of instruction {i} outside image")
        self._compiled = None

    # addresses -----------------------------------------------------------
    @property
    def end(self) -> int:
        return self.base + STRIDE * len(self.instructions)

    def addr(self, index: int) -> int:
        return self.base + STRIDE * index

    def index(self, addr: int) -> int:
        off = addr - self.base
        if off % STRIDE or not 0 <= off < STRIDE * len(self.instructions):
            raise IRError(f"address {addr:#x} not in image")
        return off // STRIDE

    def label_addr(self, name: str) -> int:
        return self.addr(self.labels[name])

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.end and (addr - self.base) % STRIDE == 0

    @property
    def entry_addr(self) -> int:
        return self.label_addr(self.entry) if self.entry else self.base

    def __len__(self) -> int:
        return len(self.instructions)

    def at(self, addr: int) -> Instruction:
        return self.instructions[self.index(addr)]

    # metadata --------------------------------------------------------------
    def branch_kinds(self) -> dict[int, str]:
        """Per-branch kind tags keyed by address."""
        return {self.addr(i): k for i, ins in enumerate(self.instructions)
                if (k := branch_kind(ins)) is not None}

    def branches(self) -> list[tuple[int, str, int | None]]:
        """(address, kind, static target) for every branch in the image."""
        out = []
        for i, ins in enumerate(self.instructions):
            k = branch_kind(ins)
            if k is not None:
                out.append((self.addr(i), k, getattr(ins, "target", None)))
        return out

    def addr_labels(self) -> dict[int, str]:
        out: dict[int, str] = {}
        for name, idx in sorted(self.labels.items(), key=lambda kv: (kv[1], kv[0])):
            out.setdefault(self.addr(idx), name)
        return out

    def uses_register(self, reg: int) -> bool:
        for ins in self.instructions:
            if isinstance(ins, SetReg) and (ins.dest == reg or reg in ins.expr.registers()):
                return True
            if isinstance(ins, CondBranch) and ins.pred == reg:
                return True
            if isinstance(ins, IndirectJump) and ins.reg == reg:
                return True
            if isinstance(ins, CondMove) and reg in (ins.pred, ins.dest):
                return True
        return False

    def relocate(self, new_base: int) -> "Program":
        delta = new_base - self.base
        moved = tuple(_with_targets(ins, lambda t: t + delta) for ins in self.instructions)
        return Program(new_base, moved, dict(self.labels), self.entry, self.name)

    # execution support -------------------------------------------------------
    def compiled(self):
        """Decoded form used by the interpreter: list of (op, a, b, c) tuples."""
        if self._compiled is None:
            label_addr = {n: self.addr(i) for n, i in self.labels.items()}
            code = []
            for i, ins in enumerate(self.instructions):
                if isinstance(ins, Compute):
                    code.append((OP_COMPUTE, ins.cost, 0, 0))
                elif isinstance(ins, SetReg):
                    code.append((OP_SET, ins.dest, ins.expr.compile(label_addr), 0))
                elif isinstance(ins, CondBranch):
                    code.append((OP_BR, ins.pred, ins.target, 0))
                elif isinstance(ins, Jump):
                    code.append((OP_JMP, 0, ins.target, 0))
                elif isinstance(ins, IndirectJump):
                    code.append((OP_IJMP, ins.reg, 0, 0))
                elif isinstance(ins, CondMove):
                    code.append((OP_CMOV, ins.pred, ins.dest, ins.value))
                else:
                    code.append((OP_HALT, 0, 0, 0))
            self._compiled = code
        return self._compiled

    def to_text(self) -> str:
        return print_program(self)


def _targets_of(ins: Instruction) -> list[int]:
    if isinstance(ins, (CondBranch, Jump)):
        return [ins.target]
    if isinstance(ins, CondMove):
        return [ins.value]
    if isinstance(ins, IndirectJump):
        return list(ins.candidates)
    return []


OP_COMPUTE, OP_SET, OP_BR, OP_JMP, OP_IJMP, OP_CMOV, OP_HALT = range(7)
OP_KIND = {OP_BR: CONDITIONAL, OP_JMP: UNCONDITIONAL, OP_IJMP: INDIRECT}


# --------------------------------------------------------------------------
# text format
# --------------------------------------------------------------------------

_LABEL_DEF = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_.]*)\s*:(?!=)")


def assemble(text: str, base: int | None = None, name: str = "") -> Program:
    """Assemble IR source text into a :class:`Program`.

    ``base`` overrides a ``.base`` directive.  Raises :class:`IRError` on
    duplicate or unresolved labels and on targets outside the image.
    """
    src_base = 0
    entry = None
    labels: dict[str, int] = {}
    pending: list[tuple[int, str, list[str]]] = []  # (lineno, mnemonic, operands)

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        while True:
            m = _LABEL_DEF.match(line)
            if not m:
                break
            lab = m.group(1)
            if lab in labels:
                raise IRError(f"line {lineno}: duplicate label {lab!r}")
            labels[lab] = len(pending)
            line = line[m.end():].strip()
        if not line:
            continue
        if line.startswith("."):
            key, _, val = line.partition(" ")
            val = val.strip()
            if key == ".base":
                src_base = int(val, 0)
            elif key == ".entry":
                entry = val
            elif key == ".name":
                name = name or val
            else:
                raise IRError(f"line {lineno}: unknown directive {key}")
            continue
        mnem, _, rest = line.partition(" ")
        pending.append((lineno, mnem.lower(), _split_operands(rest)))

    base = src_base if base is None else base
    addr_of = {lab: base + STRIDE * idx for lab, idx in labels.items()}

    def target(tok: str, lineno: int) -> int:
        tok = tok.strip()
        if tok.startswith("@"):
            tok = tok[1:]
        if tok in addr_of:
            return addr_of[tok]
        try:
            return int(tok, 0)
        except ValueError:
            raise IRError(f"line {lineno}: unresolved label {tok!r}") from None

    instrs = []
    for lineno, mnem, ops in pending:
        try:
            instrs.append(_build(mnem, ops, lambda t: target(t, lineno)))
        except IRError as exc:
            if str(exc).startswith("line"):
                raise
            raise IRError(f"line {lineno}: {exc}") from None
        except (ValueError, IndexError):
            raise IRError(f"line {lineno}: malformed {mnem!r}") from None
    for (lineno, _m, _ops), ins in zip(pending, instrs):
        if isinstance(ins, SetReg):
            missing = ins.expr.labels() - labels.keys()
            if missing:
                raise IRError(f"line {lineno}: unresolved label {sorted(missing)[0]!r}")
            ins.expr._tree()
    if not instrs:
        raise IRError("program has no instructions")
    if entry is not None and entry not in labels:
        raise IRError(f"unresolved label {entry!r}")
    return Program(base, instrs, labels, entry, name)


def _split_operands(rest: str) -> list[str]:
    rest = rest.strip()
    if not rest:
        return []
    # the expression of `set` may contain commas inside brackets
    out, depth, cur = [], 0, ""
    for ch in rest:
        if ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    out.append(cur.strip())
    return out


def _build(mnem: str, ops: list[str], target) -> Instruction:
    def arity(n):
        if len(ops) != n:
            raise IRError(f"{mnem} expects {n} operand(s)")

    if mnem == "compute":
        arity(1)
        return Compute(int(ops[0], 0))
    if mnem == "nop":
        arity(0)
        return Compute(1)
    if mnem == "set":
        arity(2)
        return SetReg(parse_reg(ops[0]), Expr(ops[1]))
    if mnem == "br":
        arity(2)
        return CondBranch(parse_reg(ops[0]), target(ops[1]))
    if mnem == "jmp":
        arity(1)
        return Jump(target(ops[0]))
    if mnem == "ijmp":
        if not ops:
            raise IRError("ijmp expects a register")
        reg_tok = ops[0]
        cands: tuple[int, ...] = ()
        if "[" in reg_tok:
            reg_tok, _, first = reg_tok.partition("[")
            rest = [first] + ops[1:]
            joined = ",".join(rest).rstrip()
            if not joined.endswith("]"):
                raise IRError("unterminated candidate list")
            names = [t.strip() for t in joined[:-1].split(",") if t.strip()]
            cands = tuple(target(t) for t in names)
        elif len(ops) != 1:
            raise IRError("ijmp expects a register")
        return IndirectJump(parse_reg(reg_tok), cands)
    if mnem == "cmov":
        arity(3)
        return CondMove(parse_reg(ops[0]), parse_reg(ops[1]), target(ops[2]))
    if mnem == "halt":
        arity(0)
        return Halt()
    raise IRError(f"unknown mnemonic {mnem!r}")


def print_program(prog: Program) -> str:
    """Render a program in the canonical text form accepted by :func:`assemble`."""
    names = prog.addr_labels()
    # invent labels for targets that have none
    for ins in prog.instructions:
        for t in _targets_of(ins):
            names.setdefault(t, f"L_{t - prog.base:x}")
    by_index: dict[int, list[str]] = {}
    for name, idx in prog.labels.items():
        by_index.setdefault(idx, []).append(name)
    for addr, name in names.items():
        idx = (addr - prog.base) // STRIDE
        if name not in prog.labels:
            by_index.setdefault(idx, []).append(name)

    lines = []
    if prog.name:
        lines.append(f".name {prog.name}")
    lines.append(f".base {prog.base:#x}")
    if prog.entry:
        lines.append(f".entry {prog.entry}")
    for i, ins in enumerate(prog.instructions):
        for lab in sorted(by_index.get(i, [])):
            lines.append(f"{lab}:")
        lines.append("    " + _format(ins, names))
    for lab in sorted(by_index.get(len(prog.instructions), [])):
        lines.append(f"{lab}:")
    return "\n".join(lines) + "\n"


def _format(ins: Instruction, names: Mapping[int, str]) -> str:
    if isinstance(ins, Compute):
        return f"compute {ins.cost}"
    if isinstance(ins, SetReg):
        return f"set {reg_name(ins.dest)}, {ins.expr.text}"
    if isinstance(ins, CondBranch):
        return f"br {reg_name(ins.pred)}, {names[ins.target]}"
    if isinstance(ins, Jump):
        return f"jmp {names[ins.target]}"
    if isinstance(ins, IndirectJump):
        if ins.candidates:
            return f"ijmp {reg_name(ins.reg)} [{', '.join(names[c] for c in ins.candidates)}]"
        return f"ijmp {reg_name(ins.reg)}"
    if isinstance(ins, CondMove):
        return f"cmov {reg_name(ins.pred)}, {reg_name(ins.dest)}, @{names[ins.value]}"
    return "halt"


# --------------------------------------------------------------------------
# interpreter
# --------------------------------------------------------------------------

@dataclass
class ArchTrace:
    """Architectural ground truth of one execution.

    ``events`` holds one tuple per executed instruction: ``(addr, None, None)``
    for non-branches and ``(addr, taken, target)`` for branches, where
    ``target`` is the resolved next address.
    """

    events: list
    registers: list
    halted: bool
    fuel_exhausted: bool

    def branch_events(self) -> list[tuple[int, bool, int]]:
        return [e for e in self.events if e[1] is not None]

    def addresses(self) -> list[int]:
        return [e[0] for e in self.events]

    def __len__(self) -> int:
        return len(self.events)


class Machine:
    """Single-stepping architectural state for one program run."""

    __slots__ = ("program", "code", "base", "end", "inputs", "regs", "pc", "halted", "count")

    def __init__(self, program: Program, inputs: Mapping | None = None,
                 registers: Mapping[int, int] | None = None, entry: int | None = None):
        self.program = program
        self.code = program.compiled()
        self.base = program.base
        self.end = program.end
        self.inputs = dict(inputs or {})
        self.regs = [0] * NUM_REGS
        for r, v in (registers or {}).items():
            self.regs[r] = v
        self.pc = program.entry_addr if entry is None else entry
        self.halted = False
        self.count = 0

    def step(self):
        """Execute one instruction.

        Returns ``(addr, op, cost, taken, next_pc)``; ``taken`` is None for
        non-branch instructions.
        """
        pc = self.pc
        op, a, b, c = self.code[(pc - self.base) >> 2]
        regs = self.regs
        nxt = pc + STRIDE
        taken = None
        cost = 1
        if op == OP_COMPUTE:
            cost = a
        elif op == OP_SET:
            regs[a] = b(regs, self.inputs)
        elif op == OP_BR:
            taken = regs[a] != 0
            if taken:
                nxt = b
        elif op == OP_JMP:
            taken = True
            nxt = b
        elif op == OP_IJMP:
            taken = True
            nxt = regs[a]
            if not (self.base <= nxt < self.end) or (nxt - self.base) % STRIDE:
                raise ExecutionError(f"indirect jump at {pc:#x} through {reg_name(a)} "
                                     f"to invalid address {nxt!r}")
        elif op == OP_CMOV:
            if regs[a] != 0:
                regs[b] = c
        else:
            self.halted = True
            nxt = pc
        self.pc = nxt
        self.count += 1
        return pc, op, cost, taken, nxt


def interpret(program: Program, inputs: Mapping | None = None, fuel: int = 1_000_000,
              registers: Mapping[int, int] | None = None) -> ArchTrace:
    """Run ``program`` to Halt or until ``fuel`` instructions have executed."""
    if fuel <= 0:
        raise ValueError("fuel must be positive")
    m = Machine(program, inputs, registers)
    events = []
    append = events.append
    step = m.step
    while not m.halted and m.count < fuel:
        pc, _op, _cost, taken, nxt = step()
        append((pc, taken, nxt) if taken is not None else (pc, None, None))
    return ArchTrace(events, list(m.regs), m.halted, not m.halted)


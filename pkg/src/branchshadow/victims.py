"""Victim corpus: IR programs plus reference oracles for what each one leaks.

Every victim supplies
  * a random input generator,
  * ``ground_truth(inputs)``: the leak computed by an independent reference
    implementation (no IR involved),
  * ``leak_from_events(events)``: the same leak read off a branch-event
    sequence, which is how the attacker turns a reconstructed path into a
    secret.

Memory-dependent conditions (string comparisons, table lookups) are
pre-lowered into predicate or character-code inputs.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Mapping

from .ir import Program, assemble

CORPUS_VERSION = "v1"


def _load(name: str) -> str:
    return resources.files(__package__).joinpath("corpus", CORPUS_VERSION, f"{name}.ir").read_text()


@dataclass
class VictimSpec:
    name: str
    program: Program
    secret_name: str
    secret_schema: dict
    leak_description: str
    make_input: Callable[[random.Random], dict]
    ground_truth: Callable[[Mapping], object]
    _leak: Callable[["VictimSpec", list], object]
    examples: list = field(default_factory=list)

    def random_input(self, rng: random.Random) -> dict:
        return self.make_input(rng)

    def leak_from_events(self, events) -> object:
        """Leak from (addr, taken, next_addr) branch events."""
        return self._leak(self, [e for e in events if e[1] is not None])

    def addr(self, label: str) -> int:
        return self.program.label_addr(label)

    def metadata(self) -> dict:
        return {
            "name": self.name,
            "secret_name": self.secret_name,
            "secret_schema": self.secret_schema,
            "leak_description": self.leak_description,
            "instructions": len(self.program),
            "examples": [{"input": _jsonable(x), "ground_truth": _jsonable(self.ground_truth(x))}
                         for x in self.examples],
        }


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


# --------------------------------------------------------------------------
# modexp with Montgomery multiplication
# --------------------------------------------------------------------------

def modexp_inputs(m: int, e: int, n: int, nbits: int | None = None) -> dict:
    if n % 2 == 0 or n < 3:
        raise ValueError("modulus must be odd and > 2")
    nbits = e.bit_length() if nbits is None else nbits
    if e >> nbits:
        raise ValueError("exponent wider than nbits")
    R = 1 << n.bit_length()
    return {"m": m % n, "e": e, "nbits": nbits, "n": n, "R": R,
            "np": (-pow(n, -1, R)) % R, "rinv": pow(R, -1, n)}


def _modexp_truth(x: Mapping) -> str:
    return format(x["e"], f"0{x['nbits']}b") if x["nbits"] else ""


def _modexp_leak(v: VictimSpec, events) -> str:
    bit = v.addr("bitbr")
    return "".join("1" if t else "0" for a, t, _ in events if a == bit)


def montmul_labels(v: VictimSpec, events) -> list[str]:
    """Per-montmul subtraction kind ("dummy" or "real"), in call order."""
    sub = {v.addr("sqbr"), v.addr("mulbr")}
    return ["dummy" if t else "real" for a, t, _ in events if a in sub]


def reference_montmul_labels(x: Mapping) -> list[str]:
    """Square-and-multiply with Montgomery products, done in plain Python."""
    n, R, np_ = x["n"], x["R"], x["np"]
    out = []

    def mont(a, b):
        t = (a * b + ((a * b * np_) % R) * n) // R
        out.append("dummy" if t < n else "real")
        return t if t < n else t - n

    acc, base = R % n, (x["m"] * R) % n
    for i in range(x["nbits"] - 1, -1, -1):
        acc = mont(acc, acc)
        if (x["e"] >> i) & 1:
            acc = mont(acc, base)
    return out


def build_modexp_montmul(nbits: int = 16) -> VictimSpec:
    def make(rng: random.Random) -> dict:
        n = rng.getrandbits(64) | (1 << 63) | 1
        return modexp_inputs(rng.randrange(2, n), rng.getrandbits(nbits), n, nbits)

    ex = [modexp_inputs(7, 0b1011, 0xF123_4567_89AB_CDEF, 4),
          modexp_inputs(7, 0, 0xF123_4567_89AB_CDEF, 8)]
    return VictimSpec("modexp", assemble(_load("modexp")), "exponent_bits",
                      {"exponent_bits": f"bit string, MSB first, nbits={nbits} by default"},
                      "square-and-multiply bit branch and per-montmul dummy subtraction",
                      make, _modexp_truth, _modexp_leak, ex)


# --------------------------------------------------------------------------
# strtol
# --------------------------------------------------------------------------

def strtol_inputs(text: str, base: int = 10) -> dict:
    return {"s": tuple(ord(c) for c in text), "n": len(text), "base": base, "text": text}


def _digit_value(c: str) -> int | None:
    if "0" <= c <= "9":
        return ord(c) - 48
    if c.isascii() and c.isalpha():
        return ord(c.lower()) - 87
    return None


def _strtol_truth(x: Mapping):
    text, base = x["text"], x["base"]
    i, sign = 0, "pos"
    if text[:1] == "-":
        sign, i = "neg", 1
    elif text[:1] == "+":
        i = 1
    alpha = []
    while i < len(text):
        d = _digit_value(text[i])
        if d is None or d >= base:
            break
        alpha.append(text[i].isalpha())
        i += 1
    return [sign, len(alpha), alpha]


def _strtol_leak(v: VictimSpec, events):
    neg, isdig, isalp, geb = (v.addr(k) for k in ("negbr", "isdig", "isalp", "geb"))
    sign = "pos"
    alpha = []
    last_alpha = False
    for a, t, _ in events:
        if a == neg and t:
            sign = "neg"
        elif a == isdig and t:
            last_alpha = False
        elif a == isalp and t:
            last_alpha = True
        elif a == geb and not t:
            alpha.append(last_alpha)
    return [sign, len(alpha), alpha]


def build_strtol() -> VictimSpec:
    def make(rng: random.Random) -> dict:
        base = rng.choice((10, 16))
        alphabet = "0123456789" if base == 10 else "0123456789abcdefABCDEF"
        text = rng.choice(("", "-", "+")) + "".join(rng.choice(alphabet)
                                                  for _ in range(rng.randint(0, 6)))
        text += rng.choice(("", "", " ", "z", "g", ".", "Q"))
        return strtol_inputs(text, base)

    ex = [strtol_inputs("-42"), strtol_inputs("+0"), strtol_inputs("1A", 16)]
    return VictimSpec("strtol", assemble(_load("strtol")), "sign_length",
                      {"sign": "pos|neg", "length": "digits consumed",
                       "alpha": "per digit: written as a letter"},
                      "sign branches and the digit loop",
                      make, _strtol_truth, _strtol_leak, ex)


# --------------------------------------------------------------------------
# vfprintf
# --------------------------------------------------------------------------

CONV_TYPE = {"d": "T_INT", "c": "T_INT", "u": "T_UNSIGNED", "x": "T_UNSIGNED",
             "s": "T_STR", "p": "T_PTR", "f": "T_DOUBLE"}
MAX_ARGS = 10


def vfprintf_inputs(fmt: str) -> dict:
    return {"f": tuple(ord(c) for c in fmt), "n": len(fmt), "text": fmt}


def _vfprintf_truth(x: Mapping):
    fmt = x["text"]
    convs, types = [], []
    i = 0
    while i < len(fmt):
        if fmt[i] != "%":
            i += 1
            continue
        c = fmt[i + 1] if i + 1 < len(fmt) else ""
        i += 2
        if c in CONV_TYPE:
            convs.append(c)
            if len(types) < MAX_ARGS:
                types.append(CONV_TYPE[c])
        elif c == "%":
            convs.append("%")
        else:
            convs.append("?")
    return [convs, types]


_CASES = {"c_d": "d", "c_u": "u", "c_x": "x", "c_c": "c", "c_s": "s", "c_p": "p",
          "c_f": "f", "c_pct": "%", "c_bad": "?"}


def _vfprintf_leak(v: VictimSpec, events):
    sw = v.addr("sw")
    case_of = {v.addr(lbl): c for lbl, c in _CASES.items()}
    convs = [case_of[nxt] for a, _t, nxt in events if a == sw]
    types = [CONV_TYPE[c] for c in convs if c in CONV_TYPE][:MAX_ARGS]
    return [convs, types]


def build_vfprintf() -> VictimSpec:
    def make(rng: random.Random) -> dict:
        parts = []
        for _ in range(rng.randint(0, 6)):
            if rng.random() < 0.3:
                parts.append(rng.choice("abc XY:="))
            else:
                parts.append("%" + rng.choice("duxcspf%"))
        return vfprintf_inputs("".join(parts))

    ex = [vfprintf_inputs("%d%x"), vfprintf_inputs(""), vfprintf_inputs("%d%f")]
    return VictimSpec("vfprintf", assemble(_load("vfprintf")), "conversions",
                      {"conversions": "conversion characters in order",
                       "types": "argument type table"},
                      "conversion switch and argument-fetch switch",
                      make, _vfprintf_truth, _vfprintf_leak, ex)


# --------------------------------------------------------------------------
# LIBSVM kernel dispatch
# --------------------------------------------------------------------------

KERNELS = ("LINEAR", "POLY", "RBF", "SIGMOID", "PRECOMPUTED")


def libsvm_inputs(kernel: str, nfeat: int = 0, rng: random.Random | None = None) -> dict:
    rng = rng or random.Random(0)
    x = tuple(rng.randint(-5, 5) for _ in range(nfeat))
    y = tuple(rng.randint(-5, 5) for _ in range(nfeat))
    return {"ktype": KERNELS.index(kernel) if kernel in KERNELS else -1,
            "nfeat": nfeat, "x": x, "y": y, "dot": sum(a * b for a, b in zip(x, y)),
            "gamma": 2, "coef0": 1, "pre": 7}


def _libsvm_truth(x: Mapping):
    k = x["ktype"]
    if not 0 <= k < len(KERNELS):
        return ["INVALID", None]
    return [KERNELS[k], x["nfeat"] if KERNELS[k] == "RBF" else None]


def _libsvm_leak(v: VictimSpec, events):
    rng, sw, rz, rback = (v.addr(k) for k in ("rng", "sw", "rz", "rback"))
    case_of = {v.addr(lbl): k for lbl, k in zip(("k_lin", "k_poly", "k_rbf", "k_sig", "k_pre"),
                                                 KERNELS)}
    kernel = None
    count = 0
    for a, t, nxt in events:
        if a == rng and t:
            return ["INVALID", None]
        if a == sw:
            kernel = case_of[nxt]
        elif a == rz and not t:
            count = 1
        elif a == rback and t:
            count += 1
    return [kernel, count if kernel == "RBF" else None]


def build_libsvm_kernel() -> VictimSpec:
    def make(rng: random.Random) -> dict:
        k = rng.choice(KERNELS)
        return libsvm_inputs(k, rng.randint(0, 12) if k == "RBF" else rng.randint(0, 4), rng)

    ex = [libsvm_inputs("RBF", 8), libsvm_inputs("LINEAR", 3)]
    return VictimSpec("libsvm", assemble(_load("libsvm")), "kernel",
                      {"kernel": "|".join(KERNELS), "nfeat": "RBF loop trip count"},
                      "kernel-type switch and RBF feature loop",
                      make, _libsvm_truth, _libsvm_leak, ex)


# --------------------------------------------------------------------------
# Apache method lookup
# --------------------------------------------------------------------------

METHODS = ("PUT", "GET", "HEAD", "POST", "COPY", "LOCK", "MOVE", "MERGE", "MKCOL", "PATCH",
           "TRACE", "DELETE", "UNLOCK", "OPTIONS", "CONNECT", "PROPFIND", "PROPPATCH")


def apache_inputs(method: str) -> dict:
    x = {"method": method, "mlen": len(method), "c0": ord(method[0]) if method else 0}
    for m in METHODS:
        x["eq_" + m] = int(method == m)
    return x


def _apache_truth(x: Mapping) -> str:
    return "M_" + x["method"] if x["method"] in METHODS else "M_UNKNOWN"


def _apache_leak(v: VictimSpec, events) -> str:
    found = {v.addr(m.lower()): m for m in METHODS}
    for a, t, _ in events:
        if t and a in found:
            return "M_" + found[a]
    return "M_UNKNOWN"


def build_apache_lookup() -> VictimSpec:
    def make(rng: random.Random) -> dict:
        if rng.random() < 0.7:
            return apache_inputs(rng.choice(METHODS))
        letters = "ACDEGHKLMNOPRSTU"
        return apache_inputs("".join(rng.choice(letters) for _ in range(rng.randint(1, 10))))

    ex = [apache_inputs("GET"), apache_inputs("PUT"), apache_inputs("MERGE")]
    return VictimSpec("apache", assemble(_load("apache")), "method",
                      {"method": "M_<NAME> or M_UNKNOWN"},
                      "length switch, first-character switch and string compare",
                      make, _apache_truth, _apache_leak, ex)


BUILDERS = {
    "modexp": build_modexp_montmul,
    "strtol": build_strtol,
    "vfprintf": build_vfprintf,
    "libsvm": build_libsvm_kernel,
    "apache": build_apache_lookup,
}
VICTIMS = tuple(BUILDERS)


def build(name: str, **kw) -> VictimSpec:
    try:
        return BUILDERS[name](**kw)
    except KeyError:
        raise KeyError(f"unknown victim {name!r}") from None


def corpus_json(name: str) -> str:
    return json.dumps(build(name).metadata(), indent=2, sort_keys=True) + "\n"


def load_corpus_json(name: str) -> dict:
    path = resources.files(__package__).joinpath("corpus", CORPUS_VERSION, f"{name}.json")
    return json.loads(path.read_text())

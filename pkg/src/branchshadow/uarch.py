"""Shared branch-prediction state: BTB, direction predictor, LBR and timing noise.

The BTB/predictor kernel comes from the compiled ``_kernels`` extension when
it is importable, otherwise from ``_kernels_py``.  Set ``BRANCHSHADOW_PURE=1``
to force the pure-Python kernel.
"""
from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .ir import CONDITIONAL, INDIRECT, STRIDE, UNCONDITIONAL

if os.environ.get("BRANCHSHADOW_PURE") == "1":
    from . import _kernels_py as _k
else:
    try:
        from . import _kernels as _k
    except ImportError:  # extension not built
        from . import _kernels_py as _k

KERNEL = "compiled" if _k.__name__.endswith("._kernels") else "python"
BranchUnit = _k.BranchUnit

COND, UNCOND, IND = _k.COND, _k.UNCOND, _k.INDIRECT
CORRECT, DIRECTION, TARGET = _k.CORRECT, _k.DIRECTION, _k.TARGET
KIND_CODE = {CONDITIONAL: COND, UNCONDITIONAL: UNCOND, INDIRECT: IND}
KIND_NAME = {v: k for k, v in KIND_CODE.items()}
MISPREDICT_KIND = {CORRECT: "none", DIRECTION: "direction", TARGET: "target"}

ALIAS_OFFSET = 1 << 31
DEFAULT_PENALTY = 20
LBR_SIZE = 32

BTB_ONLY = "btb-only"
GSHARE = "gshare"
PREDICTOR_MODES = (BTB_ONLY, GSHARE)


@dataclass(frozen=True)
class BtbConfig:
    ways: int = 4
    sets: int = 1024

    def __post_init__(self):
        if self.ways <= 0 or self.sets <= 0 or self.sets & (self.sets - 1):
            raise ValueError("ways must be positive and sets a power of two")

    @property
    def entries(self) -> int:
        return self.ways * self.sets

    def index(self, addr: int) -> int:
        return btb_index(addr, self.sets)

    def tag(self, addr: int) -> int:
        return btb_tag(addr)


def btb_index(addr: int, sets: int = 1024) -> int:
    """Set index: bits[9:0] XOR bits[15:6] (for 1024 sets)."""
    low = addr & 0xFFFF
    return (low ^ (low >> 6)) & (sets - 1)


def btb_tag(addr: int) -> int:
    """Partial tag: address bits [30:16]."""
    return (addr >> 16) & 0x7FFF


def alias(addr: int) -> int:
    return addr + ALIAS_OFFSET


@dataclass
class PredictionResult:
    predicted_taken: bool
    predicted_target: int | None
    correct: bool | None = None
    mispredict_kind: str | None = None


class Microarchitecture:
    """BTB plus direction predictor with a fixed misprediction penalty."""

    def __init__(self, config: BtbConfig | None = None, mode: str = BTB_ONLY,
                 penalty: int = DEFAULT_PENALTY, history_bits: int = 16):
        if mode not in PREDICTOR_MODES:
            raise ValueError(f"unknown predictor mode {mode!r}")
        if penalty < 0:
            raise ValueError("penalty must be non-negative")
        self.config = config or BtbConfig()
        self.mode = mode
        self.penalty = penalty
        self.unit = BranchUnit(self.config.ways, self.config.sets, mode == GSHARE, history_bits)

    # BTB --------------------------------------------------------------
    def btb_index(self, addr: int) -> int:
        return btb_index(addr, self.config.sets)

    def btb_lookup(self, addr: int) -> int | None:
        t = self.unit.lookup(addr)
        return None if t < 0 else t

    def btb_peek(self, addr: int) -> int | None:
        """Like btb_lookup but leaves LRU order untouched."""
        t = self.unit.peek(addr)
        return None if t < 0 else t

    def btb_insert(self, addr: int, target: int) -> None:
        self.unit.insert(addr, target)

    def btb_invalidate(self, addr: int) -> bool:
        return self.unit.invalidate(addr)

    def set_entries(self, index: int) -> list[tuple[int, int]]:
        """(tag, stored target) of the valid ways of one set, LRU first."""
        return [(t, tgt) for t, tgt, _ in self.unit.set_entries(index)]

    # direction predictor ----------------------------------------------
    @property
    def history(self) -> int:
        return self.unit.history

    def pht_index(self, addr: int) -> int:
        return self.unit.pht_index(addr)

    def pht_counter(self, index: int) -> int:
        return self.unit.pht_counter(index)

    def set_pht_counter(self, index: int, value: int) -> None:
        self.unit.set_pht_counter(index, value)

    # prediction ---------------------------------------------------------
    def predict_branch(self, kind: str, addr: int, static_target: int | None,
                       fallthrough: int | None = None) -> PredictionResult:
        ft = addr + STRIDE if fallthrough is None else fallthrough
        st = ft if static_target is None else static_target
        taken, target = self.unit.predict(KIND_CODE[kind], addr, st, ft)
        return PredictionResult(bool(taken), target)

    def resolve_and_train(self, kind: str, addr: int, prediction: PredictionResult,
                          taken: bool, target: int) -> int:
        """Fill in the prediction's verdict, train, and return the penalty."""
        fetch = prediction.predicted_target if prediction.predicted_taken else addr + STRIDE
        if kind == CONDITIONAL and prediction.predicted_taken != taken:
            mk = "direction"
        elif fetch != (target if taken else addr + STRIDE):
            mk = "target"
        else:
            mk = "none"
        prediction.correct = mk == "none"
        prediction.mispredict_kind = mk
        self.unit.train(KIND_CODE[kind], addr, taken, target)
        return 0 if prediction.correct else self.penalty

    def execute(self, kind_code: int, addr: int, static_target: int, fallthrough: int,
                taken: bool, target: int) -> int:
        """Fast path: predict, resolve and train; returns an outcome code."""
        return self.unit.execute(kind_code, addr, static_target, fallthrough, taken, target)

    def flush(self) -> None:
        self.unit.flush()

    def copy(self) -> "Microarchitecture":
        other = Microarchitecture.__new__(Microarchitecture)
        other.config, other.mode, other.penalty = self.config, self.mode, self.penalty
        other.unit = self.unit.copy()
        return other

    def state_key(self):
        return self.unit.state_key()


# --------------------------------------------------------------------------
# last branch record
# --------------------------------------------------------------------------

ENCLAVE = "enclave"
ATTACKER = "attacker"


@dataclass(frozen=True, slots=True)
class LbrRecord:
    from_addr: int
    to_addr: int
    predicted: bool
    elapsed_cycles: float
    context: str = ATTACKER
    kind: str = CONDITIONAL


class Lbr:
    """Rolling buffer of the last 32 taken branches."""

    def __init__(self, size: int = LBR_SIZE, filtering: bool = True):
        self.size = size
        self.filtering = filtering
        self._buf: deque = deque(maxlen=size)

    def append(self, record: LbrRecord) -> None:
        if record.kind == UNCONDITIONAL and not record.predicted:
            # hardware never reports a target misprediction for direct jumps
            record = LbrRecord(record.from_addr, record.to_addr, True,
                               record.elapsed_cycles, record.context, record.kind)
        self._buf.append(record)

    def read(self, filtering: bool | None = None) -> list[LbrRecord]:
        f = self.filtering if filtering is None else filtering
        if f:
            return [r for r in self._buf if r.context == ATTACKER]
        return list(self._buf)

    def clear(self) -> None:
        self._buf.clear()

    def __len__(self) -> int:
        return len(self._buf)


# --------------------------------------------------------------------------
# timing channels
# --------------------------------------------------------------------------

RDTSCP = "rdtscp"
PT_CYC = "pt-cyc"
LBR_CYCLES = "lbr-cycles"
LBR_FLAG = "lbr-flag"
TIMING_CHANNELS = (RDTSCP, PT_CYC, LBR_CYCLES)
CHANNELS = TIMING_CHANNELS + (LBR_FLAG,)

# (mean correct, sigma correct, mean mispredict, sigma mispredict), cycles
TABLE1 = {
    RDTSCP: (94.21, 13.10, 120.61, 806.56),
    PT_CYC: (59.59, 14.44, 90.64, 191.48),
    LBR_CYCLES: (25.69, 9.72, 35.04, 10.52),
}


@dataclass
class TimingChannelModel:
    """Gaussian elapsed-cycle model per channel and outcome, clamped to >= 1."""

    params: dict = field(default_factory=lambda: dict(TABLE1))
    seed: int = 0

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        self._z = np.empty(0)
        self._zi = 0

    def channel_params(self, channel: str) -> tuple[float, float, float, float]:
        try:
            return self.params[channel]
        except KeyError:
            raise ValueError(f"unknown channel {channel!r}") from None

    def _mean_sigma(self, channel: str, mispredict: bool) -> tuple[float, float]:
        mc, sc, mm, sm = self.channel_params(channel)
        return (mm, sm) if mispredict else (mc, sc)

    def _normal(self) -> float:
        if self._zi >= len(self._z):
            self._z = self.rng.standard_normal(4096)
            self._zi = 0
        z = self._z[self._zi]
        self._zi += 1
        return float(z)

    def sample(self, channel: str, mispredict: bool) -> float:
        mu, sigma = self._mean_sigma(channel, mispredict)
        if sigma == 0:
            return max(1.0, mu)
        return max(1.0, mu + sigma * self._normal())

    def sample_many(self, channel: str, mispredict: bool, n: int, clamp: bool = True) -> np.ndarray:
        mu, sigma = self._mean_sigma(channel, mispredict)
        x = mu + sigma * self.rng.standard_normal(n)
        return np.maximum(x, 1.0) if clamp else x

    @classmethod
    def constant(cls, seed: int = 0) -> "TimingChannelModel":
        """Debug model with sigma = 0 everywhere."""
        return cls({c: (p[0], 0.0, p[2], 0.0) for c, p in TABLE1.items()}, seed)

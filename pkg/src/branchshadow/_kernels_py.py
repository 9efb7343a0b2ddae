"""Pure-Python branch unit, used when the compiled extension is unavailable.

Must stay behaviourally identical to ``_kernels.pyx``; the test suite runs
both against the same cases.
"""

COND, UNCOND, INDIRECT = 0, 1, 2
CORRECT, DIRECTION, TARGET = 0, 1, 2

LOW31 = (1 << 31) - 1
TAG_MASK = 0x7FFF  # address bits [30:16]


def btb_index(addr, sets=1024):
    low = addr & 0xFFFF
    return (low ^ (low >> 6)) & (sets - 1)


def btb_tag(addr):
    return (addr >> 16) & TAG_MASK


class BranchUnit:
    """Set-associative BTB with true-LRU replacement plus an optional gshare
    direction predictor."""

    def __init__(self, ways=4, sets=1024, gshare=False, history_bits=16):
        if sets & (sets - 1) or sets <= 0 or ways <= 0:
            raise ValueError("sets must be a power of two and ways positive")
        self.ways = ways
        self.sets = sets
        self.gshare = bool(gshare)
        self.history_bits = history_bits
        self._hmask = (1 << history_bits) - 1
        n = ways * sets
        self._tag = [0] * n
        self._target = [0] * n
        self._valid = [False] * n
        self._stamp = [0] * n
        self._clock = 0
        self.history = 0
        self._pht = [1] * (1 << history_bits)

    # -- BTB ---------------------------------------------------------------
    def _find(self, addr):
        s = btb_index(addr, self.sets) * self.ways
        tag = (addr >> 16) & TAG_MASK
        valid, tags = self._valid, self._tag
        for w in range(s, s + self.ways):
            if valid[w] and tags[w] == tag:
                return w
        return -1

    def lookup(self, addr):
        w = self._find(addr)
        if w < 0:
            return -1
        self._clock += 1
        self._stamp[w] = self._clock
        return self._target[w]

    def peek(self, addr):
        w = self._find(addr)
        return -1 if w < 0 else self._target[w]

    def insert(self, addr, target):
        w = self._find(addr)
        if w < 0:
            s = btb_index(addr, self.sets) * self.ways
            valid, stamp = self._valid, self._stamp
            w = -1
            for i in range(s, s + self.ways):
                if not valid[i]:
                    w = i
                    break
            if w < 0:
                w = s
                for i in range(s + 1, s + self.ways):
                    if stamp[i] < stamp[w]:
                        w = i
            self._tag[w] = (addr >> 16) & TAG_MASK
            self._valid[w] = True
        self._target[w] = target
        self._clock += 1
        self._stamp[w] = self._clock

    def invalidate(self, addr):
        w = self._find(addr)
        if w >= 0:
            self._valid[w] = False
            return True
        return False

    def set_entries(self, index):
        """Valid entries of one set as (tag, target, stamp), oldest first."""
        s = index * self.ways
        out = [(self._tag[w], self._target[w], self._stamp[w])
               for w in range(s, s + self.ways) if self._valid[w]]
        out.sort(key=lambda e: e[2])
        return out

    def valid_count(self):
        return sum(self._valid)

    # -- direction predictor -----------------------------------------------
    def pht_index(self, addr):
        return (self.history ^ (addr >> 2)) & self._hmask

    def pht_counter(self, index):
        return self._pht[index]

    def set_pht_counter(self, index, value):
        if not 0 <= value <= 3:
            raise ValueError("counter out of range")
        self._pht[index] = value

    # -- prediction ------------------------------------------------------------
    def predict(self, kind, addr, static_target, fallthrough):
        """Return (predicted_taken, predicted_target)."""
        stored = self.lookup(addr)
        hit_target = -1 if stored < 0 else (addr & ~LOW31) | (stored & LOW31)
        if kind == COND:
            if self.gshare:
                if self._pht[(self.history ^ (addr >> 2)) & self._hmask] >= 2:
                    return True, hit_target if stored >= 0 else static_target
                return False, fallthrough
            if stored >= 0:
                return True, hit_target
            return False, fallthrough
        if kind == UNCOND:
            return True, hit_target if stored >= 0 else static_target
        if stored >= 0:
            return True, hit_target
        return False, fallthrough

    def train(self, kind, addr, taken, target):
        if taken:
            self.insert(addr, target)
        elif kind == COND:
            self.invalidate(addr)
        if self.gshare and kind == COND:
            i = (self.history ^ (addr >> 2)) & self._hmask
            c = self._pht[i]
            if taken:
                if c < 3:
                    self._pht[i] = c + 1
            elif c > 0:
                self._pht[i] = c - 1
            self.history = ((self.history << 1) | (1 if taken else 0)) & self._hmask

    def execute(self, kind, addr, static_target, fallthrough, taken, target):
        """Predict, resolve and train one dynamic branch; return the outcome code."""
        p_taken, p_target = self.predict(kind, addr, static_target, fallthrough)
        # judged on the next fetch address; an indirect miss falls through
        if kind == COND and p_taken != taken:
            outcome = DIRECTION
        elif (p_target if p_taken else fallthrough) != (target if taken else fallthrough):
            outcome = TARGET
        else:
            outcome = CORRECT
        self.train(kind, addr, taken, target)
        return outcome

    def flush(self):
        n = self.ways * self.sets
        self._valid = [False] * n
        self._stamp = [0] * n
        self._clock = 0
        self.history = 0
        self._pht = [1] * (1 << self.history_bits)

    def copy(self):
        other = BranchUnit.__new__(BranchUnit)
        other.__dict__.update(self.__dict__)
        for name in ("_tag", "_target", "_valid", "_stamp", "_pht"):
            setattr(other, name, list(getattr(self, name)))
        return other

    def state_key(self):
        """Hashable summary of everything that can influence a prediction."""
        btb = tuple(
            (w, self._tag[w], self._target[w]) for w in range(self.ways * self.sets) if self._valid[w]
        )
        lru = tuple(tuple(e[:2] for e in self.set_entries(i)) for i in range(self.sets)
                    if any(self._valid[i * self.ways:(i + 1) * self.ways]))
        return btb, lru, self.history, tuple(self._pht) if self.gshare else ()

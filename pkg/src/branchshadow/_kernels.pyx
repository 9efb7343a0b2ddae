# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled branch unit: BTB with true LRU and optional gshare predictor.

Mirrors ``_kernels_py.BranchUnit`` exactly; addresses must be < 2**63.
"""
from libc.stdlib cimport malloc, free
from libc.string cimport memcpy, memset

DEF LOW31 = 0x7FFFFFFF
DEF TAG_MASK = 0x7FFF

COND, UNCOND, INDIRECT = 0, 1, 2
CORRECT, DIRECTION, TARGET = 0, 1, 2


cdef inline long long _index(long long addr, long long sets) nogil:
    cdef long long low = addr & 0xFFFF
    return (low ^ (low >> 6)) & (sets - 1)


def btb_index(long long addr, long long sets=1024):
    return _index(addr, sets)


def btb_tag(long long addr):
    return (addr >> 16) & TAG_MASK


cdef class BranchUnit:
    cdef readonly int ways
    cdef readonly int sets
    cdef readonly bint gshare
    cdef readonly int history_bits
    cdef public long long history
    cdef long long _hmask
    cdef long long _clock
    cdef long long *_tag
    cdef long long *_target
    cdef long long *_stamp
    cdef unsigned char *_valid
    cdef unsigned char *_pht

    def __cinit__(self, int ways=4, int sets=1024, gshare=False, int history_bits=16):
        self._tag = NULL
        self._target = NULL
        self._stamp = NULL
        self._valid = NULL
        self._pht = NULL

    def __init__(self, int ways=4, int sets=1024, gshare=False, int history_bits=16):
        if sets <= 0 or (sets & (sets - 1)) or ways <= 0:
            raise ValueError("sets must be a power of two and ways positive")
        self.ways = ways
        self.sets = sets
        self.gshare = bool(gshare)
        self.history_bits = history_bits
        self._hmask = (1 << history_bits) - 1
        self._alloc()
        self.flush()

    cdef _alloc(self):
        cdef size_t n = <size_t>self.ways * self.sets
        self._tag = <long long *>malloc(n * sizeof(long long))
        self._target = <long long *>malloc(n * sizeof(long long))
        self._stamp = <long long *>malloc(n * sizeof(long long))
        self._valid = <unsigned char *>malloc(n)
        self._pht = <unsigned char *>malloc(<size_t>1 << self.history_bits)
        if not (self._tag and self._target and self._stamp and self._valid and self._pht):
            raise MemoryError()
        memset(self._tag, 0, n * sizeof(long long))
        memset(self._target, 0, n * sizeof(long long))

    def __dealloc__(self):
        free(self._tag)
        free(self._target)
        free(self._stamp)
        free(self._valid)
        free(self._pht)

    # -- BTB ---------------------------------------------------------------
    cdef inline int _find(self, long long addr):
        cdef int s = <int>_index(addr, self.sets) * self.ways
        cdef long long tag = (addr >> 16) & TAG_MASK
        cdef int w
        for w in range(s, s + self.ways):
            if self._valid[w] and self._tag[w] == tag:
                return w
        return -1

    cdef inline long long _lookup(self, long long addr):
        cdef int w = self._find(addr)
        if w < 0:
            return -1
        self._clock += 1
        self._stamp[w] = self._clock
        return self._target[w]

    cdef void _insert(self, long long addr, long long target):
        cdef int w = self._find(addr)
        cdef int s, i
        if w < 0:
            s = <int>_index(addr, self.sets) * self.ways
            for i in range(s, s + self.ways):
                if not self._valid[i]:
                    w = i
                    break
            if w < 0:
                w = s
                for i in range(s + 1, s + self.ways):
                    if self._stamp[i] < self._stamp[w]:
                        w = i
            self._tag[w] = (addr >> 16) & TAG_MASK
            self._valid[w] = 1
        self._target[w] = target
        self._clock += 1
        self._stamp[w] = self._clock

    cdef bint _invalidate(self, long long addr):
        cdef int w = self._find(addr)
        if w >= 0:
            self._valid[w] = 0
            return True
        return False

    def lookup(self, long long addr):
        return self._lookup(addr)

    def peek(self, long long addr):
        cdef int w = self._find(addr)
        return -1 if w < 0 else self._target[w]

    def insert(self, long long addr, long long target):
        self._insert(addr, target)

    def invalidate(self, long long addr):
        return self._invalidate(addr)

    def set_entries(self, int index):
        cdef int s = index * self.ways
        cdef int w
        out = [(self._tag[w], self._target[w], self._stamp[w])
               for w in range(s, s + self.ways) if self._valid[w]]
        out.sort(key=lambda e: e[2])
        return out

    def valid_count(self):
        cdef int w, n = 0
        for w in range(self.ways * self.sets):
            n += self._valid[w]
        return n

    # -- direction predictor -----------------------------------------------
    def pht_index(self, long long addr):
        return (self.history ^ (addr >> 2)) & self._hmask

    def pht_counter(self, long long index):
        return self._pht[index]

    def set_pht_counter(self, long long index, int value):
        if not 0 <= value <= 3:
            raise ValueError("counter out of range")
        self._pht[index] = value

    # -- prediction ------------------------------------------------------------
    cdef inline int _predict(self, int kind, long long addr, long long static_target,
                             long long fallthrough, long long *p_target):
        cdef long long stored = self._lookup(addr)
        cdef long long hit = -1
        if stored >= 0:
            hit = (addr & ~(<long long>LOW31)) | (stored & LOW31)
        if kind == 0:
            if self.gshare:
                if self._pht[(self.history ^ (addr >> 2)) & self._hmask] >= 2:
                    p_target[0] = hit if stored >= 0 else static_target
                    return 1
                p_target[0] = fallthrough
                return 0
            if stored >= 0:
                p_target[0] = hit
                return 1
            p_target[0] = fallthrough
            return 0
        if kind == 1:
            p_target[0] = hit if stored >= 0 else static_target
            return 1
        if stored >= 0:
            p_target[0] = hit
            return 1
        p_target[0] = fallthrough
        return 0

    cdef inline void _train(self, int kind, long long addr, bint taken, long long target):
        cdef long long i
        cdef unsigned char c
        if taken:
            self._insert(addr, target)
        elif kind == 0:
            self._invalidate(addr)
        if self.gshare and kind == 0:
            i = (self.history ^ (addr >> 2)) & self._hmask
            c = self._pht[i]
            if taken:
                if c < 3:
                    self._pht[i] = c + 1
            elif c > 0:
                self._pht[i] = c - 1
            self.history = ((self.history << 1) | (1 if taken else 0)) & self._hmask

    def predict(self, int kind, long long addr, long long static_target, long long fallthrough):
        cdef long long t = 0
        cdef int taken = self._predict(kind, addr, static_target, fallthrough, &t)
        return bool(taken), t

    def train(self, int kind, long long addr, bint taken, long long target):
        self._train(kind, addr, taken, target)

    cpdef int execute(self, int kind, long long addr, long long static_target,
                      long long fallthrough, bint taken, long long target):
        cdef long long p_target = 0
        cdef int p_taken = self._predict(kind, addr, static_target, fallthrough, &p_target)
        cdef int outcome
        # judged on the next fetch address; an indirect miss falls through
        if kind == 0 and p_taken != taken:
            outcome = 1
        elif (p_target if p_taken else fallthrough) != (target if taken else fallthrough):
            outcome = 2
        else:
            outcome = 0
        self._train(kind, addr, taken, target)
        return outcome

    def flush(self):
        cdef size_t n = <size_t>self.ways * self.sets
        memset(self._valid, 0, n)
        memset(self._stamp, 0, n * sizeof(long long))
        memset(self._pht, 1, <size_t>1 << self.history_bits)
        self._clock = 0
        self.history = 0

    def copy(self):
        cdef BranchUnit other = BranchUnit.__new__(BranchUnit)
        cdef size_t n = <size_t>self.ways * self.sets
        other.ways = self.ways
        other.sets = self.sets
        other.gshare = self.gshare
        other.history_bits = self.history_bits
        other._hmask = self._hmask
        other._alloc()
        memcpy(other._tag, self._tag, n * sizeof(long long))
        memcpy(other._target, self._target, n * sizeof(long long))
        memcpy(other._stamp, self._stamp, n * sizeof(long long))
        memcpy(other._valid, self._valid, n)
        memcpy(other._pht, self._pht, <size_t>1 << self.history_bits)
        other._clock = self._clock
        other.history = self.history
        return other

    def state_key(self):
        cdef int w, i
        btb = tuple((w, self._tag[w], self._target[w])
                    for w in range(self.ways * self.sets) if self._valid[w])
        lru = tuple(tuple(e[:2] for e in self.set_entries(i)) for i in range(self.sets)
                    if any(self._valid[i * self.ways + w] for w in range(self.ways)))
        pht = tuple(self._pht[i] for i in range(1 << self.history_bits)) if self.gshare else ()
        return btb, lru, self.history, pht

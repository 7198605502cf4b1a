"""Kernel-size planning for omni-scale blocks.

An OS block has three stride-1 convolution layers. The first two use the
kernel sizes ``[1] + primes <= M`` and the third uses ``[1, 2]``. Every
path through the block picks one kernel per layer, and a path with kernel
sizes ``k1, k2, k3`` sees ``1 + (k1-1) + (k2-1) + (k3-1)`` input steps.
``select_M`` picks the smallest prime ``M`` whose block reaches every
receptive field from 1 to ``ceil(N/2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import InfeasibleBudgetError, InvalidArgumentError

# Goldbach's conjecture has been checked numerically up to this bound.
GOLDBACH_VERIFIED_LIMIT = 4 * 10**14
LAST_LAYER_KERNELS = (1, 2)


@dataclass(frozen=True)
class OSBlockSpec:
    layer_kernel_lists: tuple[tuple[int, ...], ...]
    branch_channels: int = 1
    in_channels: int = 1

    def __post_init__(self):
        lists = tuple(tuple(int(k) for k in layer) for layer in self.layer_kernel_lists)
        object.__setattr__(self, "layer_kernel_lists", lists)
        if not lists:
            raise InvalidArgumentError("an OS block needs at least one layer")
        for i, layer in enumerate(lists):
            if not layer:
                raise InvalidArgumentError(f"layer {i} has no kernels")
            if any(k < 1 for k in layer):
                raise InvalidArgumentError(f"layer {i} has a kernel size < 1: {layer}")
            if any(a >= b for a, b in zip(layer, layer[1:])):
                raise InvalidArgumentError(f"layer {i} kernel sizes must be strictly increasing: {layer}")
        if self.branch_channels < 1 or self.in_channels < 1:
            raise InvalidArgumentError("channel counts must be positive")

    @classmethod
    def canonical(cls, M: int, in_channels: int = 1, branch_channels: int = 1) -> "OSBlockSpec":
        """Three-layer block: ``[1] + primes <= M`` twice, then ``[1, 2]``."""
        first = tuple([1] + primes_up_to(M))
        return cls((first, first, LAST_LAYER_KERNELS), branch_channels, in_channels)

    @property
    def n_layers(self) -> int:
        return len(self.layer_kernel_lists)

    @property
    def out_channels(self) -> int:
        return self.branch_channels * len(self.layer_kernel_lists[-1])

    def with_channels(self, branch_channels=None, in_channels=None) -> "OSBlockSpec":
        return OSBlockSpec(
            self.layer_kernel_lists,
            self.branch_channels if branch_channels is None else branch_channels,
            self.in_channels if in_channels is None else in_channels,
        )

    def is_canonical(self) -> bool:
        lists = self.layer_kernel_lists
        if len(lists) != 3 or lists[0] != lists[1] or lists[2] != LAST_LAYER_KERNELS:
            return False
        return lists[0][0] == 1 and all(is_prime(k) for k in lists[0][1:])

    def to_dict(self) -> dict:
        return {
            "layer_kernel_lists": [list(layer) for layer in self.layer_kernel_lists],
            "branch_channels": self.branch_channels,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OSBlockSpec":
        return cls(tuple(tuple(x) for x in d["layer_kernel_lists"]), d["branch_channels"], d["in_channels"])


@dataclass(frozen=True)
class CostBreakdown:
    per_layer_weights: list[int] = field(default_factory=list)
    total_weights: int = 0
    max_rf: int = 1


@dataclass(frozen=True)
class SequenceComparison:
    R: int
    prime_sum: int
    arithmetic_sum: int
    geometric_layers_needed: int

    def to_dict(self) -> dict:
        return {
            "R": self.R,
            "prime_sum": self.prime_sum,
            "arithmetic_sum": self.arithmetic_sum,
            "geometric_layers_needed": self.geometric_layers_needed,
        }


# -- primes -----------------------------------------------------------------

@lru_cache(maxsize=8)
def _sieve(limit: int) -> np.ndarray:
    flags = np.ones(limit + 1, dtype=bool)
    flags[:2] = False
    for p in range(2, math.isqrt(limit) + 1):
        if flags[p]:
            flags[p * p :: p] = False
    return flags


def _sieve_at_least(n: int) -> np.ndarray:
    # round up so nearby calls share one cached sieve
    size = 1 << max(10, (n - 1).bit_length())
    return _sieve(size)


def primes_up_to(m: int) -> list[int]:
    if m < 2:
        raise InvalidArgumentError(f"primes_up_to needs m >= 2, got {m}")
    flags = _sieve_at_least(m)
    return np.flatnonzero(flags[: m + 1]).tolist()


_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_prime(n: int) -> bool:
    """Deterministic for n < 3.3e24 (Miller-Rabin with the first 12 prime bases)."""
    n = int(n)
    if n < 2:
        return False
    if n < (1 << 20):
        return bool(_sieve_at_least(n)[n])
    for p in _MR_BASES:
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def goldbach_decompose(e: int) -> tuple[int, int]:
    """Split an even number into two primes, returning the pair with the smallest first part."""
    if e % 2 or e < 4:
        raise InvalidArgumentError(f"expected an even integer >= 4, got {e}")
    if e > GOLDBACH_VERIFIED_LIMIT:
        raise InvalidArgumentError(f"{e} exceeds the numerically verified Goldbach range")
    if e <= (1 << 22):
        flags = _sieve_at_least(e)
        for p in _primes_of(len(flags) - 1):
            if p > e // 2:
                break
            if flags[e - p]:
                return p, e - p
    else:
        p = 2
        while p <= e // 2:
            if is_prime(e - p):
                return p, e - p
            p = _next_prime(p)
    raise AssertionError(f"no Goldbach split found for {e}")  # pragma: no cover


@lru_cache(maxsize=8)
def _primes_of(limit: int) -> tuple[int, ...]:
    return tuple(np.flatnonzero(_sieve(limit)).tolist())


def _next_prime(p: int) -> int:
    q = p + 1
    while not is_prime(q):
        q += 1
    return q


# -- receptive fields -------------------------------------------------------

def coverage_set(layer_kernel_lists: Sequence[Iterable[int]]) -> set[int]:
    """Receptive fields reachable by choosing one kernel per layer (stride 1)."""
    lists = [list(layer) for layer in layer_kernel_lists]
    if not lists or any(not layer for layer in lists):
        raise InvalidArgumentError("coverage_set needs nonempty kernel lists")
    # sumset of (k - 1) over layers, tracked as an indicator vector
    reach = np.ones(1, dtype=np.int64)
    for layer in lists:
        step = np.zeros(max(layer), dtype=np.int64)
        step[np.asarray(layer) - 1] = 1
        reach = (np.convolve(reach, step) > 0).astype(np.int64)
    return set((np.flatnonzero(reach) + 1).tolist())


def covers(layer_kernel_lists, upto: int) -> bool:
    reachable = coverage_set(layer_kernel_lists)
    return all(r in reachable for r in range(1, upto + 1))


def required_rf(N: int) -> int:
    return max(1, (N + 1) // 2)


def select_M_for_rf(rf: int) -> int:
    """Smallest prime M whose canonical block reaches every receptive field in 1..rf."""
    if rf < 1:
        raise InvalidArgumentError(f"receptive field must be >= 1, got {rf}")
    # the canonical block tops out at RF 2M
    M = 2 if rf <= 4 else _next_prime(max(2, math.ceil(rf / 2) - 1))
    while not covers(OSBlockSpec.canonical(M).layer_kernel_lists, rf):
        M = _next_prime(M)
    return M


def select_M(N: int) -> int:
    if N < 1:
        raise InvalidArgumentError(f"series length must be positive, got {N}")
    if N > GOLDBACH_VERIFIED_LIMIT:
        raise InvalidArgumentError(f"series length {N} exceeds the supported range")
    return select_M_for_rf(required_rf(N))


# -- cost accounting --------------------------------------------------------

def param_count_eq1(C: int, R: int, Z: int, S: int) -> int:
    """Weights needed to cover receptive field R with Z layers of C channels and stride S."""
    if min(C, R, Z, S) < 1:
        raise InvalidArgumentError("C, R, Z and S must all be positive")
    return C * (R + (Z - 1) * S)


def count_block_weights(spec: OSBlockSpec) -> CostBreakdown:
    """Convolution weights only; BatchNorm and bias terms are not counted."""
    per_layer = []
    in_ch = spec.in_channels
    for layer in spec.layer_kernel_lists:
        per_layer.append(in_ch * spec.branch_channels * sum(layer))
        in_ch = spec.branch_channels * len(layer)
    max_rf = 1 + sum(max(layer) - 1 for layer in spec.layer_kernel_lists)
    return CostBreakdown(per_layer, sum(per_layer), max_rf)


def largest_channels(weight_budget: int, weight_fn) -> int:
    """Largest c >= 1 with ``weight_fn(c) <= weight_budget``; weight_fn must be increasing."""
    if weight_fn(1) > weight_budget:
        raise InfeasibleBudgetError(f"budget {weight_budget} is below the single-channel cost {weight_fn(1)}")
    lo, hi = 1, 2
    while weight_fn(hi) <= weight_budget:
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if weight_fn(mid) <= weight_budget:
            lo = mid
        else:
            hi = mid
    return lo


def allocate_channels(weight_budget: int, layer_kernel_lists, in_channels: int = 1) -> int:
    lists = tuple(tuple(layer) for layer in layer_kernel_lists)

    def weights(c):
        return count_block_weights(OSBlockSpec(lists, c, in_channels)).total_weights

    return largest_channels(weight_budget, weights)


def compare_sequences(R: int) -> SequenceComparison:
    """Cost of reaching RF ``R`` with prime, arithmetic and geometric kernel lists."""
    if R < 2:
        raise InvalidArgumentError(f"R must be >= 2, got {R}")
    return SequenceComparison(
        R=R,
        prime_sum=1 + sum(primes_up_to(R)),
        arithmetic_sum=R * (R + 1) // 2,
        geometric_layers_needed=bin(R).count("1"),
    )


def analyze(N: int, in_channels: int = 1, weight_budget: int | None = None, branch_channels: int | None = None) -> dict:
    """Summary record used by the ``analyze`` command."""
    M = select_M(N)
    spec = OSBlockSpec.canonical(M, in_channels=in_channels)
    if branch_channels is None:
        branch_channels = 1 if weight_budget is None else allocate_channels(weight_budget, spec.layer_kernel_lists, in_channels)
    spec = spec.with_channels(branch_channels=branch_channels)
    cost = count_block_weights(spec)
    return {
        "N": N,
        "M": M,
        "required_rf": required_rf(N),
        "kernel_lists": [list(layer) for layer in spec.layer_kernel_lists],
        "coverage_ok": covers(spec.layer_kernel_lists, required_rf(N)),
        "branch_channels": branch_channels,
        "in_channels": in_channels,
        "per_layer_weights": cost.per_layer_weights,
        "total_weights": cost.total_weights,
        "max_rf": cost.max_rf,
        "comparison": compare_sequences(max(2, required_rf(N))).to_dict(),
    }

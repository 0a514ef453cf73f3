"""Latency-diversifying co-processor.

One functional unit computes each custom instruction exactly like the base
ISA; a PRNG picks how many cycles the core stalls for it, uniformly over
``1 .. 2**dl``.
"""

from __future__ import annotations

from dataclasses import dataclass

from diversim.errors import ExecutionError
from diversim.ir import MASK64

XORSHIFT_MULTIPLIER = 2685821657736338717
MAX_DL = 16
# substitute for a zero seed, which would lock xorshift at zero forever
ZERO_SEED_SUBSTITUTE = 0x9E3779B97F4A7C15


def prng_next(state: int) -> tuple[int, int]:
    """One xorshift64* step; returns ``(output, new_state)``."""
    if state == 0:
        raise ValueError("xorshift64* state must be nonzero")
    x = state
    x ^= x >> 12
    x ^= (x << 25) & MASK64
    x ^= x >> 27
    return (x * XORSHIFT_MULTIPLIER) & MASK64, x


class PrngState:
    """Mutable xorshift64* generator."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        seed &= MASK64
        self.state = seed or ZERO_SEED_SUBSTITUTE

    def next(self) -> int:
        value, self.state = prng_next(self.state)
        return value

    def copy(self) -> "PrngState":
        return PrngState(self.state)


@dataclass(frozen=True)
class DiversityConfig:
    dl: int = 0
    seed: int = 1

    def __post_init__(self):
        if not 0 <= self.dl <= MAX_DL:
            raise ValueError(f"diversification level must be in 0..{MAX_DL}, got {self.dl}")

    @property
    def n(self) -> int:
        """Number of emulated variants per custom instruction."""
        return 1 << self.dl


def ci_latency(config: DiversityConfig, prng: PrngState) -> int:
    # always draw, so the stream position does not depend on dl
    return 1 + (prng.next() & (config.n - 1))


def _div(a: int, b: int) -> int:
    if b == 0:
        raise ExecutionError("division by zero")
    return a // b


def _rem(a: int, b: int) -> int:
    if b == 0:
        raise ExecutionError("division by zero")
    return a % b


FUNCT_TABLE = {
    "ci.add": lambda a, b: (a + b) & MASK64,
    "ci.sub": lambda a, b: (a - b) & MASK64,
    "ci.mul": lambda a, b: (a * b) & MASK64,
    "ci.div": _div,
    "ci.rem": _rem,
    "ci.and": lambda a, b: a & b,
    "ci.or": lambda a, b: a | b,
    "ci.xor": lambda a, b: a ^ b,
}


class CoProcessor:
    """Diversifying ALU with its own PRNG; one instance per program run."""

    def __init__(self, config: DiversityConfig, funct_table: dict | None = None):
        self.config = config
        self.prng = PrngState(config.seed)
        self.funct_table = dict(FUNCT_TABLE if funct_table is None else funct_table)
        self.calls = 0
        self.stall_cycles = 0

    def exec_ci(self, op: str, a: int, b: int) -> tuple[int, int]:
        try:
            fn = self.funct_table[op]
        except KeyError:
            raise ValueError(f"unknown custom instruction {op!r}") from None
        # draw before computing so a faulting op still consumes its latency slot
        stall = ci_latency(self.config, self.prng)
        result = fn(a, b)
        self.calls += 1
        self.stall_cycles += stall
        return result, stall


class FixedLatencyCoProcessor(CoProcessor):
    """Stub that always stalls one cycle; removes every random source."""

    def __init__(self, funct_table: dict | None = None):
        super().__init__(DiversityConfig(0, 1), funct_table)

    def exec_ci(self, op: str, a: int, b: int) -> tuple[int, int]:
        try:
            fn = self.funct_table[op]
        except KeyError:
            raise ValueError(f"unknown custom instruction {op!r}") from None
        self.calls += 1
        self.stall_cycles += 1
        return fn(a, b), 1

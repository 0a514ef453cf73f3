"""Benchmark kernels in every evaluated variant, plus reference oracles.

Variants:

* ``BL``   baseline, hand-written IR
* ``Cc``   cross-copying applied to BL (snapshot shipped in ``benchmarks/``)
* ``Ca``   conditional assignment applied to BL (snapshot)
* ``LR``   left-to-right sliding window, window 3 (modexp only, hand-written)
* ``PrBL`` / ``PrLR``  custom-instruction diversification of BL / LR
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from diversim.ir import Program, parse_program, print_program
from diversim.transforms import cond_assign, cross_copy, diversify

KEY_BITS = 16

VARIANTS = {
    "modexp": ("BL", "Cc", "Ca", "LR", "PrBL", "PrLR"),
    "mulmod16": ("BL", "Cc", "Ca", "PrBL"),
}

DEFAULT_OPS = {
    "modexp": ("mul", "rem"),
    "mulmod16": ("mul", "rem", "add", "sub"),
}


# -- oracles ----------------------------------------------------------------


def modexp_oracle(y: int, k: int, n: int) -> int:
    """Right-to-left square-and-multiply, one exponent bit per step."""
    if n == 0:
        raise ValueError("modulus must be nonzero")
    r = 1
    while k:
        if k & 1:
            r = r * y % n
        y = y * y % n
        k >>= 1
    return r % n


def lr_window_modexp_oracle(y: int, k: int, n: int, w: int = 3) -> int:
    """Left-to-right sliding-window exponentiation with odd-power table."""
    if n == 0:
        raise ValueError("modulus must be nonzero")
    if not 1 <= w <= 8:
        raise ValueError("window size must be in 1..8")
    y %= n
    y2 = y * y % n
    table = {1: y}
    for odd in range(3, 1 << w, 2):
        table[odd] = table[odd - 2] * y2 % n
    r = 1
    i = k.bit_length() - 1
    while i >= 0:
        if not (k >> i) & 1:
            r = r * r % n
            i -= 1
            continue
        low = max(i - w + 1, 0)
        while not (k >> low) & 1:
            low += 1
        value = (k >> low) & ((1 << (i - low + 1)) - 1)
        for _ in range(i - low + 1):
            r = r * r % n
        r = r * table[value] % n
        i = low - 1
    return r % n


def mulmod16_oracle(a: int, b: int) -> int:
    """IDEA multiplication: modulo 65537 with 0 standing for 65536."""
    if not (0 <= a <= 0xFFFF and 0 <= b <= 0xFFFF):
        raise ValueError("operands must be 16-bit")
    a = a or 0x10000
    b = b or 0x10000
    return (a * b % 0x10001) & 0xFFFF


MULMOD16_BLOCK = 16


def mulmod16_block_oracle(x: int, key: int, words: int = MULMOD16_BLOCK) -> int:
    """Xor-fold of ``mulmod16_oracle(x_i, key)`` over the LCG-generated block."""
    acc = 0
    for _ in range(words):
        acc ^= mulmod16_oracle(x, key)
        x = (x * 25173 + 13849) & 0xFFFF
    return acc


# -- benchmark programs -------------------------------------------------------


@dataclass
class BenchmarkSpec:
    name: str
    variant: str
    program: Program
    secret_param_index: int
    public_args: list[int]
    default_keys: tuple[int, int]
    ops_filter: tuple[str, ...] = ()
    notes: list[str] = field(default_factory=list)

    def args_for(self, key: int, public_args: list[int] | None = None) -> list[int]:
        args = list(self.public_args if public_args is None else public_args)
        args.insert(self.secret_param_index, key)
        return args

    def oracle(self, key: int, public_args: list[int] | None = None) -> int:
        args = self.args_for(key, public_args)
        if self.name == "modexp":
            return modexp_oracle(*args)
        return mulmod16_block_oracle(*args)


# Public inputs and key pairs used when an experiment does not override
# them.  Both key pairs have distinct Hamming weight (9 vs 4, 12 vs 3).
_DEFAULTS = {
    "modexp": dict(secret_param_index=1, public_args=[2027, 65521], default_keys=(0x9D2B, 0x1111)),
    "mulmod16": dict(secret_param_index=1, public_args=[0x7A3F], default_keys=(0xF7B3, 0x0051)),
}


def benchmarks_dir() -> Path:
    return Path(str(resources.files("diversim") / "benchmarks"))


def _load(filename: str) -> Program:
    return parse_program((benchmarks_dir() / filename).read_text(encoding="utf-8"))


def derive_variant(name: str, variant: str) -> Program:
    """Build a countermeasure variant from its source (BL for Cc/Ca)."""
    if variant == "Cc":
        return cross_copy(_load(f"{name}_BL.ir"))[0]
    if variant == "Ca":
        return cond_assign(_load(f"{name}_BL.ir"))[0]
    raise ValueError(f"{variant} is not a derived variant")


def regenerate_snapshots(directory: Path | None = None) -> list[Path]:
    """Rewrite the Cc/Ca snapshot files from the current passes."""
    directory = directory or benchmarks_dir()
    written = []
    for name in VARIANTS:
        for variant in ("Cc", "Ca"):
            path = directory / f"{name}_{variant}.ir"
            header = f"# Generated from {name}_BL.ir by the {variant} pass; do not edit.\n"
            path.write_text(header + print_program(derive_variant(name, variant)), encoding="utf-8")
            written.append(path)
    return written


def get_benchmark(name: str, variant: str, ops_filter=None) -> BenchmarkSpec:
    if name not in VARIANTS or variant not in VARIANTS[name]:
        raise KeyError(f"unknown benchmark/variant combination {name}/{variant}")
    source = variant[2:] if variant.startswith("Pr") else variant
    program = _load(f"{name}_{source}.ir")
    ops: tuple[str, ...] = ()
    if variant.startswith("Pr"):
        ops = tuple(sorted(ops_filter if ops_filter is not None else DEFAULT_OPS[name]))
        program = diversify(program, ops)[0]
    return BenchmarkSpec(name, variant, program, ops_filter=ops, **_DEFAULTS[name])

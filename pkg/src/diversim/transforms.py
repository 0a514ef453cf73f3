"""IR-to-IR hardening passes over ``critical`` functions.

All passes look for the same shape, an if-without-else ("triangle")::

        bXX a, b, Ljoin      # taken: skip the body
        <straight-line body>
    Ljoin:

``diversify`` swaps arithmetic for co-processor custom instructions,
``cross_copy`` adds a dummy else-arm that mirrors the body, and
``cond_assign`` flattens the triangle into mask/select arithmetic.
Regions a pass cannot handle are reported, never silently dropped.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field

from diversim.ir import (
    ALU_OPS,
    CI_OPS,
    COND_BRANCHES,
    Function,
    Imm,
    Instruction,
    LabelRef,
    Operand,
    Program,
    Reg,
    validate,
)

DIVERSIFIABLE = frozenset({"add", "sub", "mul", "div", "rem", "and", "or", "xor"})
_SCRATCH_RE = re.compile(r"^s(\d+)$")
_STRAIGHT_LINE = frozenset(("li", "mov", "call") + ALU_OPS + CI_OPS)
ALL_ONES = (1 << 64) - 1


@dataclass(frozen=True)
class TriangleRegion:
    branch_index: int
    body: range
    join_index: int


@dataclass
class PassReport:
    pass_name: str
    functions_visited: list[str] = field(default_factory=list)
    replaced: int = 0
    added: int = 0
    regions_matched: int = 0
    regions_skipped: list[tuple[str, int, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "pass": self.pass_name,
            "functions_visited": list(self.functions_visited),
            "replaced": self.replaced,
            "added": self.added,
            "regions_matched": self.regions_matched,
            "regions_skipped": [
                {"function": f, "branch_index": i, "reason": why} for f, i, why in self.regions_skipped
            ],
        }


def detect_triangles(f: Function) -> list[TriangleRegion]:
    """Find every conditional branch that jumps forward over a straight-line body."""
    targeted = {ins.target for ins in f.body if ins.target is not None}
    regions = []
    for i, ins in enumerate(f.body):
        if ins.opcode not in COND_BRANCHES:
            continue
        join = f.labels[ins.target]
        if join <= i + 1:
            continue
        body = range(i + 1, join)
        if any(f.body[j].opcode not in _STRAIGHT_LINE for j in body):
            continue
        # a label inside the body that something jumps to is a second entry
        inner = {name for name, idx in f.labels.items() if i < idx < join}
        if inner & targeted:
            continue
        regions.append(TriangleRegion(i, body, join))
    return regions


# -- helpers ----------------------------------------------------------------


class _Fresh:
    """Hands out unused scratch registers (``sN``) and labels for one function."""

    def __init__(self, f: Function, prefix: str):
        used = [int(m.group(1)) for r in f.registers() if (m := _SCRATCH_RE.match(r))]
        self.next_reg = max(used, default=-1) + 1
        self.labels = set(f.labels)
        self.prefix = prefix
        self.next_label = 0

    def reg(self) -> Reg:
        r = Reg(f"s{self.next_reg}")
        self.next_reg += 1
        return r

    def label(self, suffix: str) -> str:
        while True:
            name = f"L{self.prefix}{self.next_label}_{suffix}"
            if name not in self.labels:
                self.labels.add(name)
                return name
            self.next_label += 1

    def bump(self) -> None:
        self.next_label += 1


def _splice(f: Function, start: int, stop: int, new: list[Instruction], labels_at: dict[int, list[str]]):
    """Replace ``f.body[start:stop]`` by ``new``; labels keep their positions.

    ``labels_at`` maps offsets within ``new`` to fresh label names.
    """
    delta = len(new) - (stop - start)
    relabeled = {}
    for name, idx in f.labels.items():
        if idx <= start:
            relabeled[name] = idx
        elif idx >= stop:
            relabeled[name] = idx + delta
        else:
            raise ValueError(f"label {name} inside spliced range")
    for offset, names in labels_at.items():
        for name in names:
            relabeled[name] = start + offset
    f.body[start:stop] = new
    f.labels = relabeled


def _rename(ins: Instruction, mapping: dict[str, Reg], dest: Reg | None) -> Instruction:
    """Rewrite source registers through ``mapping`` and the destination to ``dest``."""
    ops = list(ins.operands)
    src_positions = range(1, len(ops)) if ins.opcode != "call" else range(2, len(ops))
    for j in src_positions:
        o = ops[j]
        if isinstance(o, Reg) and o.name in mapping:
            ops[j] = mapping[o.name]
    if dest is not None:
        ops[0] = dest
    return Instruction(ins.opcode, tuple(ops), ins.source_line)


def _written_anywhere(f: Function, name: str) -> bool:
    return any((d := ins.dest) is not None and d.name == name for ins in f.body)


def _unsafe_division(f: Function, region: TriangleRegion) -> str | None:
    """Reason the body cannot run unconditionally because of a division, or None.

    A divisor is safe when it is a nonzero immediate, or an unmodified
    register that the function also divides by outside the region (so a zero
    value would fault on every path anyway).
    """
    outside = set()
    for j, ins in enumerate(f.body):
        if j not in region.body and ins.opcode in ("div", "rem", "ci.div", "ci.rem"):
            divisor = ins.operands[2]
            if isinstance(divisor, Reg):
                outside.add(divisor.name)
    for j in region.body:
        ins = f.body[j]
        if ins.opcode not in ("div", "rem", "ci.div", "ci.rem"):
            continue
        divisor = ins.operands[2]
        if isinstance(divisor, Imm):
            if divisor.value == 0:
                return f"division by constant zero at line {ins.source_line}"
            continue
        if _written_anywhere(f, divisor.name) or divisor.name not in outside:
            return f"divisor {divisor.name} at line {ins.source_line} may be zero when the branch is removed"
    return None


def _drop_inner_labels(f: Function, region: TriangleRegion) -> None:
    # detect_triangles guarantees nothing jumps to these
    for name in [n for n, idx in f.labels.items() if region.branch_index < idx < region.join_index]:
        del f.labels[name]


def _critical_functions(p: Program):
    for f in p.functions:
        if f.critical:
            yield f


# -- passes -----------------------------------------------------------------


def diversify(p: Program, ops_filter) -> tuple[Program, PassReport]:
    """Rewrite filter-matching arithmetic in critical functions to ``ci.*``."""
    ops_filter = frozenset(ops_filter)
    bad = ops_filter - DIVERSIFIABLE
    if bad:
        raise ValueError(f"no custom instruction for {sorted(bad)}")
    out = copy.deepcopy(p)
    report = PassReport("diversify")
    for f in _critical_functions(out):
        report.functions_visited.append(f.name)
        for i, ins in enumerate(f.body):
            if ins.opcode in ops_filter:
                f.body[i] = Instruction("ci." + ins.opcode, ins.operands, ins.source_line)
                report.replaced += 1
    _check(out)
    return out, report


def cross_copy(p: Program) -> tuple[Program, PassReport]:
    """Balance every triangle with a dummy else-arm.

    The true path gains an unconditional jump and the false path gains a
    never-taken branch, so both paths pay one taken and one not-taken branch
    plus a join jump, whatever the cost model's branch costs are.
    """
    out = copy.deepcopy(p)
    report = PassReport("cross_copy")
    for f in _critical_functions(out):
        report.functions_visited.append(f.name)
        fresh = _Fresh(f, "cc")
        # back to front so earlier indices stay valid
        for region in reversed(detect_triangles(f)):
            body = [f.body[j] for j in region.body]
            if any(ins.opcode == "call" for ins in body):
                report.regions_skipped.append((f.name, region.branch_index, "call in body cannot be mirrored"))
                continue
            why = _unsafe_division(f, region)
            if why:
                report.regions_skipped.append((f.name, region.branch_index, why))
                continue
            branch = f.body[region.branch_index]
            join_label = branch.target
            then_label, else_label = fresh.label("then"), fresh.label("else")
            fresh.bump()

            mapping: dict[str, Reg] = {}
            mirror = []
            for ins in body:
                dst = fresh.reg()
                mirror.append(_rename(ins, mapping, dst))
                mapping[ins.dest.name] = dst  # type: ignore[union-attr]

            a = branch.operands[0]
            line = branch.source_line
            new = [
                Instruction(branch.opcode, (branch.operands[0], branch.operands[1], LabelRef(else_label)), line),
                Instruction("jmp", (LabelRef(then_label),), line),
                *body,
                Instruction("jmp", (LabelRef(join_label),), line),
                Instruction("bne", (a, a, LabelRef(join_label)), line),
                *mirror,
                Instruction("jmp", (LabelRef(join_label),), line),
            ]
            labels = {2: [then_label], 3 + len(body): [else_label]}
            _drop_inner_labels(f, region)
            _splice(f, region.branch_index, region.join_index, new, labels)
            report.regions_matched += 1
            report.replaced += 1  # the retargeted branch
            report.added += len(new) - (1 + len(body))
    _check(out)
    return out, report


def _condition_bit(branch: Instruction, prev: Instruction | None, fresh: _Fresh) -> tuple[list[Instruction], Operand] | None:
    """Branch-free code computing 1 when the body would run (branch not taken)."""
    op, a, b = branch.opcode, branch.operands[0], branch.operands[1]
    line = branch.source_line
    code: list[Instruction] = []

    def emit(opcode, *ops) -> None:
        code.append(Instruction(opcode, tuple(ops), line))

    if op in ("beq", "bne"):
        if isinstance(a, Imm) and isinstance(b, Reg):
            a, b = b, a
        if (
            isinstance(b, Imm)
            and b.value == 0
            and isinstance(a, Reg)
            and prev is not None
            and prev.opcode == "and"
            and prev.dest == a
            and Imm(1) in prev.operands[1:]
        ):
            # the compared register is already a single bit
            if op == "beq":
                return code, a
            bit = fresh.reg()
            emit("xor", bit, a, Imm(1))
            return code, bit
        x = a
        if not (isinstance(b, Imm) and b.value == 0):
            x = fresh.reg()
            emit("xor", x, a, b)
        neg, nz = fresh.reg(), fresh.reg()
        emit("sub", neg, Imm(0), x)
        emit("or", neg, neg, x)
        emit("shr", nz, neg, Imm(63))  # 1 iff x != 0
        if op == "beq":
            return code, nz
        emit("xor", nz, nz, Imm(1))
        return code, nz
    # unsigned a < b without branches:
    # ((~a & b) | (~(a ^ b) & (a - b))) >> 63
    na, t1, t2, t3, lt = (fresh.reg() for _ in range(5))
    emit("xor", na, a, Imm(ALL_ONES))
    emit("and", t1, na, b)
    emit("xor", t2, a, b)
    emit("xor", t2, t2, Imm(ALL_ONES))
    emit("sub", t3, a, b)
    emit("and", t2, t2, t3)
    emit("or", t1, t1, t2)
    emit("shr", lt, t1, Imm(63))
    if op == "bge":  # body runs when a < b
        return code, lt
    emit("xor", lt, lt, Imm(1))  # blt: body runs when a >= b
    return code, lt


def cond_assign(p: Program) -> tuple[Program, PassReport]:
    """Flatten each triangle into an unconditional body plus masked selects."""
    out = copy.deepcopy(p)
    report = PassReport("cond_assign")
    for f in _critical_functions(out):
        report.functions_visited.append(f.name)
        fresh = _Fresh(f, "ca")
        for region in reversed(detect_triangles(f)):
            body = [f.body[j] for j in region.body]
            if any(ins.opcode == "call" for ins in body):
                report.regions_skipped.append((f.name, region.branch_index, "call in body cannot be flattened"))
                continue
            why = _unsafe_division(f, region)
            if why:
                report.regions_skipped.append((f.name, region.branch_index, why))
                continue
            branch = f.body[region.branch_index]
            prev = None
            if region.branch_index > 0 and not f.labels_at(region.branch_index):
                prev = f.body[region.branch_index - 1]
            line = branch.source_line
            code, bit = _condition_bit(branch, prev, fresh)
            mask, inv = fresh.reg(), fresh.reg()
            code.append(Instruction("sub", (mask, Imm(0), bit), line))
            code.append(Instruction("xor", (inv, mask, Imm(ALL_ONES)), line))

            mapping: dict[str, Reg] = {}
            order: list[str] = []
            for ins in body:
                dst = fresh.reg()
                code.append(_rename(ins, mapping, dst))
                name = ins.dest.name  # type: ignore[union-attr]
                if name not in mapping:
                    order.append(name)
                mapping[name] = dst
            for name in order:
                keep, take = fresh.reg(), fresh.reg()
                code.append(Instruction("and", (take, mapping[name], mask), line))
                code.append(Instruction("and", (keep, Reg(name), inv), line))
                code.append(Instruction("or", (Reg(name), take, keep), line))
            _drop_inner_labels(f, region)
            _splice(f, region.branch_index, region.join_index, code, {})
            report.regions_matched += 1
            report.replaced += 1 + len(body)
            report.added += len(code) - (1 + len(body))
    _check(out)
    return out, report


PASSES = {
    "diversify": diversify,
    "cross-copy": cross_copy,
    "cond-assign": cond_assign,
}


def _check(p: Program) -> None:
    diags = validate(p)
    if diags:  # pragma: no cover - indicates a pass bug
        raise AssertionError("pass produced invalid IR: " + "; ".join(map(str, diags)))

"""Cycle-counting executor for the IR.

Every instruction is charged by :func:`cost_of`.  Custom ``ci.*`` instructions
are dispatched to a co-processor which returns a result and a stall count; the
stall is added to the cycle counter before the next instruction issues, so the
drawn latency is the whole cost of a custom instruction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

from diversim.errors import ExecutionError, StepBudgetExceeded
from diversim.ir import ALU_OPS, CI_OPS, COND_BRANCHES, MASK64, Function, Instruction, Program, Reg

DEFAULT_STEP_BUDGET = 10**7

DEFAULT_BASE_COSTS: dict[str, int] = {
    "li": 1,
    "mov": 1,
    "add": 1,
    "sub": 1,
    "and": 1,
    "or": 1,
    "xor": 1,
    "shl": 1,
    "shr": 1,
    "mul": 3,
    "div": 5,
    "rem": 5,
    "call": 2,
    "ret": 2,
    "halt": 1,
}


@dataclass(frozen=True)
class CostModel:
    base_costs: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_BASE_COSTS))
    branch_taken: int = 3
    branch_not_taken: int = 1
    mul_operand_dependent: bool = True
    div_operand_dependent: bool = True

    def __post_init__(self):
        missing = set(DEFAULT_BASE_COSTS) - set(self.base_costs)
        if missing:
            raise ValueError(f"cost model lacks entries for {sorted(missing)}")
        for name, cycles in list(self.base_costs.items()) + [
            ("branch_taken", self.branch_taken),
            ("branch_not_taken", self.branch_not_taken),
        ]:
            if cycles < 1:
                raise ValueError(f"cost for {name} must be >= 1, got {cycles}")

    @classmethod
    def constant(cls, **overrides: int) -> "CostModel":
        """Model with operand-dependent mul/div disabled."""
        costs = dict(DEFAULT_BASE_COSTS)
        costs.update(overrides)
        return cls(base_costs=costs, mul_operand_dependent=False, div_operand_dependent=False)

    def to_dict(self) -> dict:
        return {
            "base_costs": dict(sorted(self.base_costs.items())),
            "branch_taken": self.branch_taken,
            "branch_not_taken": self.branch_not_taken,
            "mul_operand_dependent": self.mul_operand_dependent,
            "div_operand_dependent": self.div_operand_dependent,
        }


def _bytes_of(value: int) -> int:
    return (value.bit_length() + 7) // 8


def branch_taken(opcode: str, a: int, b: int) -> bool:
    if opcode == "beq":
        return a == b
    if opcode == "bne":
        return a != b
    if opcode == "blt":
        return a < b
    if opcode == "bge":
        return a >= b
    if opcode == "jmp":
        return True
    raise ValueError(f"{opcode} is not a branch")


def cost_of(instr: Instruction, operand_values: Sequence[int], cost: CostModel) -> int:
    """Cycles charged for ``instr`` given the runtime values it consumed.

    ``ci.*`` instructions are charged 0 here; their full cost is the stall
    reported by the co-processor.
    """
    op = instr.opcode
    if op in COND_BRANCHES or op == "jmp":
        taken = op == "jmp" or branch_taken(op, operand_values[0], operand_values[1])
        return cost.branch_taken if taken else cost.branch_not_taken
    if op == "mul" and cost.mul_operand_dependent:
        return 2 + _bytes_of(operand_values[1])
    if op in ("div", "rem") and cost.div_operand_dependent:
        return 4 + _bytes_of(operand_values[0])
    if op in CI_OPS:
        return 0
    return cost.base_costs[op]


@dataclass(frozen=True)
class RunResult:
    return_value: int
    total_cycles: int
    instruction_count: int


@dataclass(frozen=True)
class TraceStep:
    function: str
    pc: int
    opcode: str
    cycles: int
    values: tuple[int, ...] = ()


class CoprocessorHandle(Protocol):
    def exec_ci(self, op: str, a: int, b: int) -> tuple[int, int]: ...


# -- compiled form ----------------------------------------------------------
# Each function becomes a list of tuples (op, dst, a, b, target, cost) whose
# operand fields index one flat slot list per frame: registers first, then
# the function's immediates as constant slots.

(
    _MOV, _ADD, _SUB, _MUL, _DIV, _REM, _AND, _OR, _XOR, _SHL, _SHR,
    _BEQ, _BNE, _BLT, _BGE, _JMP, _CALL, _RET, _HALT, _CI,
) = range(20)

_OPNUM = {
    "li": _MOV, "mov": _MOV, "add": _ADD, "sub": _SUB, "mul": _MUL, "div": _DIV,
    "rem": _REM, "and": _AND, "or": _OR, "xor": _XOR, "shl": _SHL, "shr": _SHR,
    "beq": _BEQ, "bne": _BNE, "blt": _BLT, "bge": _BGE, "jmp": _JMP,
    "call": _CALL, "ret": _RET, "halt": _HALT,
}


@dataclass
class _CompiledFunction:
    name: str
    code: list[tuple]
    template: list[int]
    param_slots: list[int]
    source: list[Instruction]


def _compile_function(f: Function, cost: CostModel, index: dict[str, int]) -> _CompiledFunction:
    slots: dict[object, int] = {}
    template: list[int] = []

    def slot(o) -> int:
        key = ("r", o.name) if isinstance(o, Reg) else ("i", o.value)
        if key not in slots:
            slots[key] = len(template)
            template.append(0 if isinstance(o, Reg) else o.value)
        return slots[key]

    param_slots = [slot(Reg(p)) for p in f.params]
    code = []
    for ins in f.body:
        op, ops = ins.opcode, ins.operands
        if op in CI_OPS:
            code.append((_CI, slot(ops[0]), slot(ops[1]), slot(ops[2]), op, 0))
        elif op in ALU_OPS:
            code.append((_OPNUM[op], slot(ops[0]), slot(ops[1]), slot(ops[2]), None, cost.base_costs[op]))
        elif op in ("li", "mov"):
            code.append((_MOV, slot(ops[0]), slot(ops[1]), 0, None, cost.base_costs[op]))
        elif op in COND_BRANCHES:
            code.append((_OPNUM[op], 0, slot(ops[0]), slot(ops[1]), f.labels[ops[2].name], 0))
        elif op == "jmp":
            code.append((_JMP, 0, 0, 0, f.labels[ops[0].name], cost.branch_taken))
        elif op == "call":
            args = tuple(slot(o) for o in ops[2:])
            code.append((_CALL, slot(ops[0]), index[ops[1].name], args, None, cost.base_costs["call"]))
        elif op == "ret":
            code.append((_RET, 0, slot(ops[0]), 0, None, cost.base_costs["ret"]))
        elif op == "halt":
            code.append((_HALT, 0, 0, 0, None, cost.base_costs["halt"]))
        else:  # pragma: no cover - parser rejects unknown opcodes
            raise ExecutionError(f"cannot compile opcode {op!r}")
    return _CompiledFunction(f.name, code, template, param_slots, list(f.body))


class Machine:
    """A program bound to a cost model, ready to run many times."""

    def __init__(self, program: Program, cost: CostModel | None = None, step_budget: int = DEFAULT_STEP_BUDGET):
        self.program = program
        self.cost = cost or CostModel()
        self.step_budget = step_budget
        index = {f.name: i for i, f in enumerate(program.functions)}
        self._funcs = [_compile_function(f, self.cost, index) for f in program.functions]
        self._entry = index[program.entry]
        self.has_ci = any(ins.opcode in CI_OPS for f in program.functions for ins in f.body)

    @property
    def arity(self) -> int:
        return len(self._funcs[self._entry].param_slots)

    def run(
        self,
        args: Sequence[int],
        coproc: CoprocessorHandle | None = None,
        trace: list[TraceStep] | None = None,
    ) -> RunResult:
        if len(args) != self.arity:
            raise ExecutionError(f"entry @{self.program.entry} takes {self.arity} argument(s), got {len(args)}")
        if self.has_ci and coproc is None:
            raise ExecutionError("program uses ci.* instructions but no co-processor was supplied")

        M = MASK64
        cost = self.cost
        bt, bnt = cost.branch_taken, cost.branch_not_taken
        mul_dep, div_dep = cost.mul_operand_dependent, cost.div_operand_dependent
        budget = self.step_budget
        funcs = self._funcs

        fn = funcs[self._entry]
        code = fn.code
        regs = list(fn.template)
        for s, v in zip(fn.param_slots, args):
            regs[s] = v & M
        stack: list[tuple] = []
        pc = 0
        cycles = 0
        steps = 0
        ncode = len(code)

        while True:
            if pc >= ncode:
                raise ExecutionError(f"fell off the end of @{fn.name}")
            steps += 1
            if steps > budget:
                raise StepBudgetExceeded(f"step budget of {budget} instructions exceeded in @{fn.name}")
            cur = pc
            op, d, a, b, t, c = code[pc]
            before = cycles
            if trace is not None:
                if op == _MOV or op == _RET:
                    vals: tuple[int, ...] = (regs[a],)
                elif op < _JMP or op == _CI:
                    vals = (regs[a], regs[b])
                else:
                    vals = ()
            if op == _MOV:
                regs[d] = regs[a]
                cycles += c
                pc += 1
            elif op == _ADD:
                regs[d] = (regs[a] + regs[b]) & M
                cycles += c
                pc += 1
            elif op == _AND:
                regs[d] = regs[a] & regs[b]
                cycles += c
                pc += 1
            elif op == _SHR:
                sh = regs[b]
                regs[d] = regs[a] >> sh if sh < 64 else 0
                cycles += c
                pc += 1
            elif op == _SUB:
                regs[d] = (regs[a] - regs[b]) & M
                cycles += c
                pc += 1
            elif op == _MUL:
                rhs = regs[b]
                regs[d] = (regs[a] * rhs) & M
                cycles += 2 + (rhs.bit_length() + 7) // 8 if mul_dep else c
                pc += 1
            elif op == _REM or op == _DIV:
                x, y = regs[a], regs[b]
                if y == 0:
                    raise ExecutionError(self._where(fn, pc, "division by zero"))
                regs[d] = x % y if op == _REM else x // y
                cycles += 4 + (x.bit_length() + 7) // 8 if div_dep else c
                pc += 1
            elif op <= _BGE and op >= _BEQ:
                x, y = regs[a], regs[b]
                if op == _BEQ:
                    taken = x == y
                elif op == _BNE:
                    taken = x != y
                elif op == _BLT:
                    taken = x < y
                else:
                    taken = x >= y
                if taken:
                    cycles += bt
                    pc = t
                else:
                    cycles += bnt
                    pc += 1
            elif op == _JMP:
                cycles += c
                pc = t
            elif op == _CI:
                try:
                    res, stall = coproc.exec_ci(t, regs[a], regs[b])  # type: ignore[union-attr]
                except ExecutionError as exc:
                    raise ExecutionError(self._where(fn, pc, str(exc))) from None
                regs[d] = res
                cycles += stall
                pc += 1
            elif op == _OR:
                regs[d] = regs[a] | regs[b]
                cycles += c
                pc += 1
            elif op == _XOR:
                regs[d] = regs[a] ^ regs[b]
                cycles += c
                pc += 1
            elif op == _SHL:
                sh = regs[b]
                regs[d] = (regs[a] << sh) & M if sh < 64 else 0
                cycles += c
                pc += 1
            elif op == _CALL:
                cycles += c
                callee = funcs[a]
                frame = list(callee.template)
                for s, src in zip(callee.param_slots, b):
                    frame[s] = regs[src]
                if trace is not None:
                    trace.append(TraceStep(fn.name, cur, "call", cycles - before, vals))
                stack.append((fn, code, regs, pc + 1, d))
                fn, code, regs, ncode, pc = callee, callee.code, frame, len(callee.code), 0
                continue
            elif op == _RET:
                cycles += c
                value = regs[a]
                if trace is not None:
                    trace.append(TraceStep(fn.name, cur, "ret", cycles - before, vals))
                if not stack:
                    return RunResult(value, cycles, steps)
                fn, code, regs, pc, d = stack.pop()
                ncode = len(code)
                regs[d] = value
                continue
            else:  # _HALT
                cycles += c
                if trace is not None:
                    trace.append(TraceStep(fn.name, cur, "halt", cycles - before, vals))
                return RunResult(0, cycles, steps)
            if trace is not None:
                trace.append(TraceStep(fn.name, cur, fn.source[cur].opcode, cycles - before, vals))

    @staticmethod
    def _where(fn: _CompiledFunction, pc: int, msg: str) -> str:
        return f"{msg} in @{fn.name} at line {fn.source[pc].source_line} ({fn.source[pc]})"


def execute(
    program: Program,
    args: Sequence[int],
    cost: CostModel | None = None,
    coproc: CoprocessorHandle | None = None,
    *,
    step_budget: int = DEFAULT_STEP_BUDGET,
    trace: list[TraceStep] | None = None,
) -> RunResult:
    """Run ``program`` from its entry function and return result and cycle counts."""
    return Machine(program, cost, step_budget).run(args, coproc, trace)

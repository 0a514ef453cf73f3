"""Textual three-address IR: data model, parser and printer.

Grammar (one instruction per line is conventional but not required)::

    program   := function*
    function  := "func" "@" NAME "(" [REG ("," REG)*] ")" ATTR* "{" item* "}"
    item      := LABEL ":" | OPCODE [operand ("," operand)*]
    operand   := REG | INT | LABEL | "@" NAME

``#`` starts a comment that runs to the end of the line.  Integers may be
decimal or ``0x`` hex and may carry a leading ``-``; they are stored modulo
2**64.  Recognised attributes are ``critical`` (the function is eligible for
the hardening passes) and ``entry`` (marks the entry function; without it the
first function is the entry).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Union

from diversim.errors import Diagnostic, IRSyntaxError

MASK64 = (1 << 64) - 1

ALU_OPS = ("add", "sub", "mul", "div", "rem", "and", "or", "xor", "shl", "shr")
CI_OPS = tuple("ci." + op for op in ("add", "sub", "mul", "div", "rem", "and", "or", "xor"))
COND_BRANCHES = ("beq", "bne", "blt", "bge")
OPCODES = ("li", "mov") + ALU_OPS + COND_BRANCHES + ("jmp", "call", "ret", "halt") + CI_OPS

ATTRIBUTES = frozenset({"critical", "entry"})


@dataclass(frozen=True)
class Reg:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Imm:
    value: int

    def __str__(self) -> str:
        # values with the top bit set read better as negative literals
        if self.value >= 1 << 63:
            return str(self.value - (1 << 64))
        return str(self.value)


@dataclass(frozen=True)
class LabelRef:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class FuncRef:
    name: str

    def __str__(self) -> str:
        return "@" + self.name


Operand = Union[Reg, Imm, LabelRef, FuncRef]


@dataclass(frozen=True)
class Instruction:
    opcode: str
    operands: tuple[Operand, ...] = ()
    source_line: int = field(default=0, compare=False)

    def __str__(self) -> str:
        if not self.operands:
            return self.opcode
        return self.opcode + " " + ", ".join(str(o) for o in self.operands)

    @property
    def is_branch(self) -> bool:
        return self.opcode in COND_BRANCHES or self.opcode == "jmp"

    @property
    def dest(self) -> Reg | None:
        """Register written by this instruction, if any."""
        if self.opcode in ("li", "mov", "call") or self.opcode in ALU_OPS or self.opcode in CI_OPS:
            return self.operands[0]  # type: ignore[return-value]
        return None

    @property
    def sources(self) -> tuple[Operand, ...]:
        """Value operands read by this instruction (registers and immediates)."""
        op = self.opcode
        if op in ALU_OPS or op in CI_OPS or op in ("li", "mov"):
            return self.operands[1:]
        if op in COND_BRANCHES:
            return self.operands[:2]
        if op == "call":
            return self.operands[2:]
        if op == "ret":
            return self.operands
        return ()

    @property
    def target(self) -> str | None:
        if self.opcode in COND_BRANCHES:
            return self.operands[2].name  # type: ignore[union-attr]
        if self.opcode == "jmp":
            return self.operands[0].name  # type: ignore[union-attr]
        return None


@dataclass
class Function:
    name: str
    params: list[str]
    attributes: frozenset[str] = frozenset()
    body: list[Instruction] = field(default_factory=list)
    # label -> index of the instruction it precedes (may equal len(body))
    labels: dict[str, int] = field(default_factory=dict)

    @property
    def critical(self) -> bool:
        return "critical" in self.attributes

    def registers(self) -> set[str]:
        names = set(self.params)
        for ins in self.body:
            for o in ins.operands:
                if isinstance(o, Reg):
                    names.add(o.name)
        return names

    def labels_at(self, index: int) -> list[str]:
        return [name for name, i in self.labels.items() if i == index]


@dataclass
class Program:
    functions: list[Function]
    entry: str

    def function(self, name: str) -> Function:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def __str__(self) -> str:
        return print_program(self)


# -- lexer -----------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<comment>\#[^\n]*)
  | (?P<newline>\n)
  | (?P<ws>[ \t\r]+)
  | (?P<int>-?(?:0[xX][0-9a-fA-F]+|[0-9]+))
  | (?P<name>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<punct>[@(){},:])
  """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise IRSyntaxError(
                [Diagnostic(line, pos - line_start + 1, f"unexpected character {text[pos]!r}")]
            )
        kind = m.lastgroup
        if kind == "newline":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            toks.append(_Tok(kind, m.group(), line, m.start() - line_start + 1))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self, offset: int = 0) -> _Tok:
        return self.toks[min(self.i + offset, len(self.toks) - 1)]

    def take(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def fail(self, tok: _Tok, msg: str) -> IRSyntaxError:
        return IRSyntaxError([Diagnostic(tok.line, tok.col, msg)])

    def expect(self, text: str) -> _Tok:
        tok = self.take()
        if tok.text != text:
            shown = tok.text or "end of input"
            raise self.fail(tok, f"expected {text!r}, found {shown!r}")
        return tok

    def expect_name(self, what: str) -> _Tok:
        tok = self.take()
        if tok.kind != "name":
            raise self.fail(tok, f"expected {what}, found {tok.text or 'end of input'!r}")
        return tok

    def parse(self) -> list[tuple[Function, int]]:
        funcs = []
        while self.peek().kind != "eof":
            funcs.append(self.function())
        return funcs

    def function(self) -> tuple[Function, int]:
        head = self.take()
        if head.text != "func":
            raise self.fail(head, f"expected 'func', found {head.text!r}")
        self.expect("@")
        name = self.expect_name("function name").text
        self.expect("(")
        params: list[str] = []
        if self.peek().text != ")":
            params.append(self.expect_name("parameter").text)
            while self.peek().text == ",":
                self.take()
                params.append(self.expect_name("parameter").text)
        self.expect(")")
        attrs = set()
        while self.peek().kind == "name":
            tok = self.take()
            if tok.text not in ATTRIBUTES:
                raise self.fail(tok, f"unknown attribute {tok.text!r}")
            attrs.add(tok.text)
        self.expect("{")
        fn = Function(name, params, frozenset(attrs))
        while self.peek().text != "}":
            tok = self.peek()
            if tok.kind == "eof":
                raise self.fail(tok, f"unterminated function @{name}")
            if tok.kind == "name" and self.peek(1).text == ":":
                self.take()
                self.take()
                if tok.text in fn.labels:
                    raise self.fail(tok, f"duplicate label {tok.text!r}")
                fn.labels[tok.text] = len(fn.body)
                continue
            fn.body.append(self.instruction())
        self.expect("}")
        return fn, head.line

    def instruction(self) -> Instruction:
        tok = self.take()
        if tok.kind != "name" or tok.text not in OPCODES:
            raise self.fail(tok, f"unknown opcode {tok.text!r}")
        operands: list[tuple[_Tok, Operand]] = []
        if _takes_operands(tok.text) and self._operand_start():
            operands.append(self.operand())
            while self.peek().text == ",":
                self.take()
                operands.append(self.operand())
        ops = tuple(o for _, o in operands)
        msg = _check_shape(tok.text, ops)
        if msg:
            raise self.fail(tok, msg)
        return Instruction(tok.text, ops, tok.line)

    def _operand_start(self) -> bool:
        nxt, after = self.peek(), self.peek(1)
        if nxt.kind == "int" or nxt.text == "@":
            return True
        # a following "name:" is a label definition, and a following opcode
        # begins the next instruction
        return nxt.kind == "name" and after.text != ":" and nxt.text not in OPCODES

    def operand(self) -> tuple[_Tok, Operand]:
        tok = self.take()
        if tok.kind == "int":
            return tok, Imm(int(tok.text, 0) & MASK64)
        if tok.text == "@":
            return tok, FuncRef(self.expect_name("function name").text)
        if tok.kind == "name":
            # registers and labels share syntax; the opcode decides
            return tok, Reg(tok.text)
        raise self.fail(tok, f"expected operand, found {tok.text or 'end of input'!r}")


def _takes_operands(opcode: str) -> bool:
    return opcode != "halt"


def _arity_error(opcode: str, want: str, got: int) -> str:
    return f"arity mismatch: {opcode} takes {want} operand(s), got {got}"


def _is_value(o: Operand) -> bool:
    return isinstance(o, (Reg, Imm))


def _check_shape(opcode: str, ops: tuple[Operand, ...]) -> str | None:
    """Return an error message when ``ops`` do not fit ``opcode``, else None."""
    n = len(ops)
    if opcode == "li":
        if n != 2:
            return _arity_error(opcode, "2", n)
        if not isinstance(ops[0], Reg) or not isinstance(ops[1], Imm):
            return "li expects a register and an immediate"
    elif opcode == "mov":
        if n != 2:
            return _arity_error(opcode, "2", n)
        if not isinstance(ops[0], Reg) or not _is_value(ops[1]):
            return "mov expects a register and a value"
    elif opcode in ALU_OPS or opcode in CI_OPS:
        if n != 3:
            return _arity_error(opcode, "3", n)
        if not isinstance(ops[0], Reg) or not all(_is_value(o) for o in ops[1:]):
            return f"{opcode} expects a destination register and two values"
    elif opcode in COND_BRANCHES:
        if n != 3:
            return _arity_error(opcode, "3", n)
        if not all(_is_value(o) for o in ops[:2]) or not isinstance(ops[2], (Reg, LabelRef)):
            return f"{opcode} expects two values and a label"
    elif opcode == "jmp":
        if n != 1:
            return _arity_error(opcode, "1", n)
        if not isinstance(ops[0], (Reg, LabelRef)):
            return "jmp expects a label"
    elif opcode == "call":
        if n < 2:
            return _arity_error(opcode, "at least 2", n)
        if not isinstance(ops[0], Reg) or not isinstance(ops[1], FuncRef):
            return "call expects a destination register and a function"
        if not all(_is_value(o) for o in ops[2:]):
            return "call arguments must be values"
    elif opcode == "ret":
        if n != 1:
            return _arity_error(opcode, "1", n)
        if not _is_value(ops[0]):
            return "ret expects a value"
    elif opcode == "halt" and n:
        return _arity_error(opcode, "0", n)
    return None


def _fix_labels(ins: Instruction) -> Instruction:
    # the parser reads label operands as registers; retag them here
    if ins.opcode in COND_BRANCHES:
        a, b, lab = ins.operands
        return Instruction(ins.opcode, (a, b, LabelRef(lab.name)), ins.source_line)  # type: ignore[union-attr]
    if ins.opcode == "jmp":
        return Instruction("jmp", (LabelRef(ins.operands[0].name),), ins.source_line)  # type: ignore[union-attr]
    return ins


def validate(program: Program, func_lines: dict[str, int] | None = None) -> list[Diagnostic]:
    """Return every structural problem in ``program`` (empty when valid)."""
    func_lines = func_lines or {}
    diags: list[Diagnostic] = []
    by_name: dict[str, Function] = {}
    for f in program.functions:
        if f.name in by_name:
            diags.append(Diagnostic(func_lines.get(f.name, 0), 1, f"duplicate function @{f.name}"))
        by_name[f.name] = f
    if program.entry not in by_name:
        diags.append(Diagnostic(0, 1, f"entry function @{program.entry} not defined"))
    for f in program.functions:
        if len(set(f.params)) != len(f.params):
            diags.append(Diagnostic(func_lines.get(f.name, 0), 1, f"duplicate parameter in @{f.name}"))
        for label, idx in f.labels.items():
            if not 0 <= idx <= len(f.body):
                diags.append(Diagnostic(0, 1, f"label {label} out of range in @{f.name}"))
        for ins in f.body:
            msg = _check_shape(ins.opcode, ins.operands) if ins.opcode in OPCODES else f"unknown opcode {ins.opcode!r}"
            if msg is None and ins.opcode in COND_BRANCHES + ("jmp",):
                if not isinstance(ins.operands[-1], LabelRef):
                    msg = f"{ins.opcode} target must be a label"
            if msg:
                diags.append(Diagnostic(ins.source_line, 1, msg))
                continue
            target = ins.target
            if target is not None and target not in f.labels:
                diags.append(Diagnostic(ins.source_line, 1, f"unresolved label {target!r} in @{f.name}"))
            if ins.opcode == "call":
                callee = ins.operands[1].name  # type: ignore[union-attr]
                if callee not in by_name:
                    diags.append(Diagnostic(ins.source_line, 1, f"call to undefined function @{callee}"))
                elif len(by_name[callee].params) != len(ins.operands) - 2:
                    diags.append(
                        Diagnostic(
                            ins.source_line,
                            1,
                            f"arity mismatch: @{callee} takes {len(by_name[callee].params)} argument(s), "
                            f"got {len(ins.operands) - 2}",
                        )
                    )
    return diags


def parse_program(text: str) -> Program:
    """Parse and validate IR text; raises :class:`IRSyntaxError` with diagnostics."""
    parsed = _Parser(text).parse()
    if not parsed:
        raise IRSyntaxError([Diagnostic(1, 1, "program defines no functions")])
    funcs = []
    lines: dict[str, int] = {}
    for fn, line in parsed:
        fn.body = [_fix_labels(ins) for ins in fn.body]
        funcs.append(fn)
        lines.setdefault(fn.name, line)
    entries = [f.name for f in funcs if "entry" in f.attributes]
    if len(entries) > 1:
        raise IRSyntaxError([Diagnostic(lines[entries[1]], 1, "more than one entry function")])
    program = Program(funcs, entries[0] if entries else funcs[0].name)
    diags = validate(program, lines)
    if diags:
        raise IRSyntaxError(diags)
    return program


def print_function(f: Function, entry: bool = False) -> str:
    attributes = set(f.attributes) | ({"entry"} if entry else set())
    attrs = "".join(" " + a for a in sorted(attributes))
    out = [f"func @{f.name}({', '.join(f.params)}){attrs} {{"]
    by_index: dict[int, list[str]] = {}
    for name, idx in f.labels.items():
        by_index.setdefault(idx, []).append(name)
    for i in range(len(f.body) + 1):
        for name in by_index.get(i, ()):
            out.append(f"{name}:")
        if i < len(f.body):
            out.append("  " + str(f.body[i]))
    out.append("}")
    return "\n".join(out)


def print_program(p: Program) -> str:
    first = p.functions[0].name if p.functions else None
    return "\n\n".join(print_function(f, entry=f.name == p.entry != first) for f in p.functions) + "\n"


def same_structure(a: Program, b: Program) -> bool:
    """Structural equality ignoring source line numbers."""
    return a.entry == b.entry and a.functions == b.functions


def iter_instructions(p: Program) -> Iterable[tuple[Function, int, Instruction]]:
    for f in p.functions:
        for i, ins in enumerate(f.body):
            yield f, i, ins

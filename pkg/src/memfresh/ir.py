"""Typed SSA-lite IR (.zir): syntax tree, parser, printer, validation, call graph.

The IR is line oriented; `;` starts a comment that runs to end of line.

Top-level forms::

    aggregate Name = { T, T, ... }
    global @name : T = zeroinit | bytes(hexdigits)
    fn [protect] name(%p: T, ...) -> T|void { ... }

Types are `i8 i16 i32 i64`, `addr` (opaque 64-bit machine address),
`[N x T]` arrays, and named aggregates.  Aggregates must be defined
before use, which also rules out recursive aggregates.

Function bodies are labelled basic blocks, one instruction per line.
Registers are written `%r`, globals `@g`, function references `&f`,
and integer literals are decimal or `0x` hex (optionally negated).
Instruction ids are assigned by source order across the whole module.

Instruction forms (dest on the left where one is produced)::

    %r = alloca T
    %r = load T, p
    store T v, p
    %r = gep T, base, i0 [, i1 ...]
    %r = add|sub|mul|and|or|xor|shl|lshr T a, b
    %r = icmp eq|ne|ult|slt T a, b
    %r = select T cond, a, b
    br label
    condbr cond, label, label
    ret [v]
    [%r =] call f(args) | call %r(args)
    %r = malloc n
    free p
    memcpy dst, src, count, T        ; count is a literal element count
    memset dst, byteval, count, T
    declassify T v
    %r = ctrnext                     ; next value of the machine freshness counter
    wstore16 T v, ctr, p             ; one 16-byte combined store: data, zero pad, counter
    wstore8 T v, guard, p            ; one 8-byte combined store: data, zero pad, guard
    mstore RNG T v, p                ; masked store (RNG names the mask generator)
    %r = mload T, p                  ; masked load

The `ctrnext`/`wstore*`/`mstore`/`mload` forms are what the hardening
passes emit; source programs normally do not use them.

Registers hold 64-bit values; the type on an instruction fixes the
width at which that operation acts (operands are truncated, results
wrap).  Loads zero-extend into the 64-bit register.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator, Mapping, Union

MASK64 = (1 << 64) - 1

INT_WIDTHS = (8, 16, 32, 64)

BINOPS = ("add", "sub", "mul", "and", "or", "xor", "shl", "lshr")
ICMP_CONDS = ("eq", "ne", "ult", "slt")
MASK_RNGS = ("incrementing", "xorshift128plus", "keyed-hash")


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IntType:
    bits: int


@dataclass(frozen=True)
class AddrType:
    pass


@dataclass(frozen=True)
class ArrayType:
    element: "TypeExpr"
    count: int


@dataclass(frozen=True)
class NamedType:
    name: str


TypeExpr = Union[IntType, AddrType, ArrayType, NamedType]

I8 = IntType(8)
I16 = IntType(16)
I32 = IntType(32)
I64 = IntType(64)
ADDR = AddrType()

Aggregates = Mapping[str, tuple[TypeExpr, ...]]


def is_primitive(ty: TypeExpr) -> bool:
    """Primitive leaves: sized integers and the address type."""
    return isinstance(ty, (IntType, AddrType))


def size_of(ty: TypeExpr, aggregates: Aggregates) -> int:
    """Byte size under the packed original layout (no padding)."""
    if isinstance(ty, IntType):
        return ty.bits // 8
    if isinstance(ty, AddrType):
        return 8
    if isinstance(ty, ArrayType):
        return ty.count * size_of(ty.element, aggregates)
    return sum(size_of(f, aggregates) for f in aggregates[ty.name])


def leaves_of(ty: TypeExpr, aggregates: Aggregates) -> Iterator[tuple[tuple[int, ...], TypeExpr]]:
    """Yield (path, primitive type) depth-first in declaration order.

    A path step is the array element index or aggregate field position.
    """
    if is_primitive(ty):
        yield (), ty
        return
    if isinstance(ty, ArrayType):
        for i in range(ty.count):
            for path, leaf in leaves_of(ty.element, aggregates):
                yield (i, *path), leaf
        return
    for i, f in enumerate(aggregates[ty.name]):
        for path, leaf in leaves_of(f, aggregates):
            yield (i, *path), leaf


def leaf_count(ty: TypeExpr, aggregates: Aggregates) -> int:
    if is_primitive(ty):
        return 1
    if isinstance(ty, ArrayType):
        return ty.count * leaf_count(ty.element, aggregates)
    return sum(leaf_count(f, aggregates) for f in aggregates[ty.name])


def type_to_str(ty: TypeExpr) -> str:
    if isinstance(ty, IntType):
        return f"i{ty.bits}"
    if isinstance(ty, AddrType):
        return "addr"
    if isinstance(ty, ArrayType):
        return f"[{ty.count} x {type_to_str(ty.element)}]"
    return ty.name


# ---------------------------------------------------------------------------
# Operands
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Reg:
    name: str


@dataclass(frozen=True)
class GlobalRef:
    name: str


@dataclass(frozen=True)
class FuncAddr:
    name: str


@dataclass(frozen=True)
class Const:
    value: int  # canonical unsigned 64-bit


Operand = Union[Reg, GlobalRef, FuncAddr, Const]


def operand_to_str(op: Operand) -> str:
    if isinstance(op, Reg):
        return f"%{op.name}"
    if isinstance(op, GlobalRef):
        return f"@{op.name}"
    if isinstance(op, FuncAddr):
        return f"&{op.name}"
    return str(op.value) if op.value < 0x10000 else hex(op.value)


# ---------------------------------------------------------------------------
# Instructions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Instr:
    iid: int


@dataclass(frozen=True)
class Alloca(Instr):
    dest: str
    ty: TypeExpr


@dataclass(frozen=True)
class Load(Instr):
    dest: str
    ty: TypeExpr
    addr: Operand


@dataclass(frozen=True)
class Store(Instr):
    ty: TypeExpr
    value: Operand
    addr: Operand


@dataclass(frozen=True)
class Gep(Instr):
    dest: str
    ty: TypeExpr
    base: Operand
    indices: tuple[Operand, ...]


@dataclass(frozen=True)
class BinOp(Instr):
    dest: str
    op: str
    ty: TypeExpr
    a: Operand
    b: Operand


@dataclass(frozen=True)
class Icmp(Instr):
    dest: str
    cond: str
    ty: TypeExpr
    a: Operand
    b: Operand


@dataclass(frozen=True)
class Select(Instr):
    dest: str
    ty: TypeExpr
    cond: Operand
    a: Operand
    b: Operand


@dataclass(frozen=True)
class Br(Instr):
    label: str


@dataclass(frozen=True)
class CondBr(Instr):
    cond: Operand
    then_label: str
    else_label: str


@dataclass(frozen=True)
class Ret(Instr):
    value: Operand | None


@dataclass(frozen=True)
class Call(Instr):
    dest: str | None
    callee: Union[str, Operand]  # str = direct, operand = indirect
    args: tuple[Operand, ...]


@dataclass(frozen=True)
class Malloc(Instr):
    dest: str
    size: Operand


@dataclass(frozen=True)
class Free(Instr):
    addr: Operand


@dataclass(frozen=True)
class Memcpy(Instr):
    dst: Operand
    src: Operand
    count: int
    elem_ty: TypeExpr


@dataclass(frozen=True)
class Memset(Instr):
    dst: Operand
    value: Operand
    count: int
    elem_ty: TypeExpr


@dataclass(frozen=True)
class Declassify(Instr):
    ty: TypeExpr
    value: Operand


@dataclass(frozen=True)
class CtrNext(Instr):
    dest: str


@dataclass(frozen=True)
class WStore(Instr):
    block: int  # 16 or 8
    ty: TypeExpr
    value: Operand
    counter: Operand
    addr: Operand


@dataclass(frozen=True)
class MStore(Instr):
    rng: str
    ty: TypeExpr
    value: Operand
    addr: Operand


@dataclass(frozen=True)
class MLoad(Instr):
    dest: str
    ty: TypeExpr
    addr: Operand


TERMINATORS = (Br, CondBr, Ret)


@dataclass(frozen=True)
class BasicBlock:
    label: str
    instrs: tuple[Instr, ...]


@dataclass(frozen=True)
class GlobalDef:
    name: str
    ty: TypeExpr
    init: bytes | None  # None = zeroinit


@dataclass(frozen=True)
class Function:
    name: str
    params: tuple[tuple[str, TypeExpr], ...]
    ret: TypeExpr | None  # None = void
    protect: bool
    blocks: tuple[BasicBlock, ...]

    def instructions(self) -> Iterator[Instr]:
        for b in self.blocks:
            yield from b.instrs


@dataclass(frozen=True)
class IrModule:
    aggregates: dict[str, tuple[TypeExpr, ...]]
    globals: dict[str, GlobalDef]
    functions: dict[str, Function]

    def instructions(self) -> Iterator[tuple[str, Instr]]:
        for fname, fn in self.functions.items():
            for ins in fn.instructions():
                yield fname, ins


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


class IrParseError(Exception):
    def __init__(self, line: int, col: int, message: str):
        super().__init__(f"{line}:{col}: {message}")
        self.line = line
        self.col = col
        self.message = message


_TOKEN_RE = re.compile(
    r"(?P<num>-?(?:0x[0-9a-fA-F]+|\d+))"
    r"|(?P<id>[A-Za-z_][A-Za-z0-9_-]*)"
    r"|(?P<punct>->|[=}{()\[\],:@%&])"
)


class _Scan:
    """Token cursor over one source line."""

    def __init__(self, text: str, line: int):
        self.text = text
        self.line = line
        self.pos = 0
        self._skip_ws()

    def _skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos] in " \t":
            self.pos += 1

    def col(self) -> int:
        return self.pos + 1

    def done(self) -> bool:
        self._skip_ws()
        return self.pos >= len(self.text)

    def error(self, message: str) -> "IrParseError":
        return IrParseError(self.line, self.col(), message)

    def _match(self):
        self._skip_ws()
        if self.pos >= len(self.text):
            return None
        return _TOKEN_RE.match(self.text, self.pos)

    def peek(self, punct: str) -> bool:
        m = self._match()
        return bool(m and m.lastgroup == "punct" and m.group() == punct)

    def take(self, punct: str) -> bool:
        if self.peek(punct):
            self.pos = self._match().end()
            return True
        return False

    def expect(self, punct: str) -> None:
        if not self.take(punct):
            raise self.error(f"expected '{punct}'")

    def peek_ident(self) -> str | None:
        m = self._match()
        if m and m.lastgroup == "id":
            return m.group()
        return None

    def take_ident(self) -> str | None:
        m = self._match()
        if m and m.lastgroup == "id":
            self.pos = m.end()
            return m.group()
        return None

    def expect_ident(self, what: str = "identifier") -> str:
        name = self.take_ident()
        if name is None:
            raise self.error(f"expected {what}")
        return name

    def expect_num(self) -> int:
        m = self._match()
        if not (m and m.lastgroup == "num"):
            raise self.error("expected integer literal")
        self.pos = m.end()
        return int(m.group(), 0)

    def peek_num(self) -> bool:
        m = self._match()
        return bool(m and m.lastgroup == "num")

    def expect_hex_run(self) -> str:
        """Raw hex digits (used inside bytes(...), where 'deadbeef' is one token)."""
        self._skip_ws()
        m = re.match(r"[0-9a-fA-F]*", self.text[self.pos:])
        self.pos += m.end()
        return m.group()


class _Parser:
    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.aggregates: dict[str, tuple[TypeExpr, ...]] = {}
        self.globals: dict[str, GlobalDef] = {}
        self.functions: dict[str, Function] = {}
        self.next_iid = 0

    def parse(self) -> IrModule:
        i = 0
        n = len(self.lines)
        while i < n:
            lineno = i + 1
            code = self.lines[i].split(";", 1)[0].rstrip()
            i += 1
            if not code.strip():
                continue
            sc = _Scan(code, lineno)
            head = sc.peek_ident()
            if head == "aggregate":
                self._aggregate(sc)
            elif head == "global":
                self._global(sc)
            elif head == "fn":
                i = self._function(sc, i)
            else:
                raise sc.error("expected 'aggregate', 'global' or 'fn'")
        return IrModule(self.aggregates, self.globals, self.functions)

    # -- top level forms ----------------------------------------------------

    def _aggregate(self, sc: _Scan) -> None:
        sc.expect_ident()
        namecol = sc.col()
        name = sc.expect_ident("aggregate name")
        if name in self.aggregates:
            raise IrParseError(sc.line, namecol, f"duplicate aggregate name '{name}'")
        sc.expect("=")
        sc.expect("{")
        fields = [self._type(sc)]
        while sc.take(","):
            fields.append(self._type(sc))
        sc.expect("}")
        if not sc.done():
            raise sc.error("unexpected trailing tokens")
        self.aggregates[name] = tuple(fields)

    def _global(self, sc: _Scan) -> None:
        sc.expect_ident()
        sc.expect("@")
        namecol = sc.col()
        name = sc.expect_ident("global name")
        if name in self.globals:
            raise IrParseError(sc.line, namecol, f"duplicate global name '{name}'")
        sc.expect(":")
        ty = self._type(sc)
        sc.expect("=")
        kind = sc.expect_ident("'zeroinit' or 'bytes'")
        if kind == "zeroinit":
            init = None
        elif kind == "bytes":
            sc.expect("(")
            digits = sc.expect_hex_run()
            sc.expect(")")
            if len(digits) % 2 != 0:
                raise sc.error("odd number of hex digits in bytes(...)")
            init = bytes.fromhex(digits)
        else:
            raise sc.error("expected 'zeroinit' or 'bytes'")
        if not sc.done():
            raise sc.error("unexpected trailing tokens")
        self.globals[name] = GlobalDef(name, ty, init)

    def _function(self, sc: _Scan, body_start: int) -> int:
        sc.expect_ident()
        protect = False
        namecol = sc.col()
        name = sc.expect_ident("function name")
        if name == "protect":
            protect = True
            namecol = sc.col()
            name = sc.expect_ident("function name")
        if name in self.functions:
            raise IrParseError(sc.line, namecol, f"duplicate function name '{name}'")
        sc.expect("(")
        params: list[tuple[str, TypeExpr]] = []
        if not sc.peek(")"):
            while True:
                sc.expect("%")
                pcol = sc.col()
                pname = sc.expect_ident("parameter name")
                if any(p == pname for p, _ in params):
                    raise IrParseError(sc.line, pcol, f"duplicate parameter '%{pname}'")
                sc.expect(":")
                params.append((pname, self._type(sc)))
                if not sc.take(","):
                    break
        sc.expect(")")
        sc.expect("->")
        if sc.peek_ident() == "void":
            sc.take_ident()
            ret = None
        else:
            ret = self._type(sc)
        sc.expect("{")
        if not sc.done():
            raise sc.error("unexpected trailing tokens")

        blocks: list[BasicBlock] = []
        label: str | None = None
        instrs: list[Instr] = []
        pending_branches: list[tuple[int, int, str]] = []
        labels_seen: set[str] = set()

        i = body_start
        while True:
            if i >= len(self.lines):
                raise IrParseError(len(self.lines), 1, f"unterminated function '{name}'")
            lineno = i + 1
            code = self.lines[i].split(";", 1)[0].rstrip()
            i += 1
            stripped = code.strip()
            if not stripped:
                continue
            if stripped == "}":
                break
            lm = re.fullmatch(r"([A-Za-z_][A-Za-z0-9_]*)\s*:", stripped)
            if lm:
                if label is not None:
                    blocks.append(BasicBlock(label, tuple(instrs)))
                label = lm.group(1)
                if label in labels_seen:
                    raise IrParseError(lineno, code.index(label) + 1, f"duplicate label '{label}'")
                labels_seen.add(label)
                instrs = []
                continue
            if label is None:
                raise IrParseError(lineno, 1, "expected a block label before the first instruction")
            isc = _Scan(code, lineno)
            instrs.append(self._instr(isc, pending_branches))

        if label is not None:
            blocks.append(BasicBlock(label, tuple(instrs)))
        for bline, bcol, target in pending_branches:
            if target not in labels_seen:
                raise IrParseError(bline, bcol, f"unknown label '{target}'")
        self.functions[name] = Function(name, tuple(params), ret, protect, tuple(blocks))
        return i

    # -- types and operands --------------------------------------------------

    def _type(self, sc: _Scan) -> TypeExpr:
        if sc.take("["):
            count = sc.expect_num()
            if count < 1:
                raise sc.error("array count must be >= 1")
            x = sc.expect_ident()
            if x != "x":
                raise sc.error("expected 'x' in array type")
            elem = self._type(sc)
            sc.expect("]")
            return ArrayType(elem, count)
        col = sc.col()
        name = sc.expect_ident("type")
        if name in ("i8", "i16", "i32", "i64"):
            return IntType(int(name[1:]))
        if name == "addr":
            return ADDR
        if name not in self.aggregates:
            raise IrParseError(sc.line, col, f"unknown type name '{name}'")
        return NamedType(name)

    def _operand(self, sc: _Scan) -> Operand:
        if sc.take("%"):
            return Reg(sc.expect_ident("register name"))
        if sc.take("@"):
            return GlobalRef(sc.expect_ident("global name"))
        if sc.take("&"):
            return FuncAddr(sc.expect_ident("function name"))
        if sc.peek_num():
            return Const(sc.expect_num() & MASK64)
        raise sc.error("expected operand")

    # -- instructions ---------------------------------------------------------

    def _mint(self) -> int:
        iid = self.next_iid
        self.next_iid += 1
        return iid

    def _instr(self, sc: _Scan, pending: list[tuple[int, int, str]]) -> Instr:
        dest: str | None = None
        if sc.take("%"):
            dest = sc.expect_ident("register name")
            sc.expect("=")
        opcol = sc.col()
        op = sc.expect_ident("instruction")

        def need_dest() -> str:
            if dest is None:
                raise IrParseError(sc.line, opcol, f"'{op}' produces a value, expected '%r ='")
            return dest

        def no_dest() -> None:
            if dest is not None:
                raise IrParseError(sc.line, opcol, f"'{op}' does not produce a value")

        def label_ref() -> str:
            col = sc.col()
            lbl = sc.expect_ident("label")
            pending.append((sc.line, col, lbl))
            return lbl

        ins: Instr
        if op == "alloca":
            ins = Alloca(self._mint(), need_dest(), self._type(sc))
        elif op == "load":
            d = need_dest()
            ty = self._type(sc)
            sc.expect(",")
            ins = Load(self._mint(), d, ty, self._operand(sc))
        elif op == "store":
            no_dest()
            ty = self._type(sc)
            val = self._operand(sc)
            sc.expect(",")
            ins = Store(self._mint(), ty, val, self._operand(sc))
        elif op == "gep":
            d = need_dest()
            ty = self._type(sc)
            sc.expect(",")
            base = self._operand(sc)
            indices = []
            while sc.take(","):
                indices.append(self._operand(sc))
            if not indices:
                raise sc.error("gep needs at least one index")
            ins = Gep(self._mint(), d, ty, base, tuple(indices))
        elif op in BINOPS:
            d = need_dest()
            ty = self._type(sc)
            a = self._operand(sc)
            sc.expect(",")
            ins = BinOp(self._mint(), d, op, ty, a, self._operand(sc))
        elif op == "icmp":
            d = need_dest()
            cond = sc.expect_ident("comparison")
            if cond not in ICMP_CONDS:
                raise sc.error(f"unknown icmp condition '{cond}'")
            ty = self._type(sc)
            a = self._operand(sc)
            sc.expect(",")
            ins = Icmp(self._mint(), d, cond, ty, a, self._operand(sc))
        elif op == "select":
            d = need_dest()
            ty = self._type(sc)
            cond = self._operand(sc)
            sc.expect(",")
            a = self._operand(sc)
            sc.expect(",")
            ins = Select(self._mint(), d, ty, cond, a, self._operand(sc))
        elif op == "br":
            no_dest()
            ins = Br(self._mint(), label_ref())
        elif op == "condbr":
            no_dest()
            cond = self._operand(sc)
            sc.expect(",")
            then_l = label_ref()
            sc.expect(",")
            ins = CondBr(self._mint(), cond, then_l, label_ref())
        elif op == "ret":
            no_dest()
            value = None if sc.done() else self._operand(sc)
            ins = Ret(self._mint(), value)
        elif op == "call":
            callee: Union[str, Operand]
            if sc.peek("%") or sc.peek("&"):
                callee = self._operand(sc)
            else:
                callee = sc.expect_ident("function name")
            sc.expect("(")
            args = []
            if not sc.peek(")"):
                while True:
                    args.append(self._operand(sc))
                    if not sc.take(","):
                        break
            sc.expect(")")
            ins = Call(self._mint(), dest, callee, tuple(args))
        elif op == "malloc":
            ins = Malloc(self._mint(), need_dest(), self._operand(sc))
        elif op == "free":
            no_dest()
            ins = Free(self._mint(), self._operand(sc))
        elif op in ("memcpy", "memset"):
            no_dest()
            dst = self._operand(sc)
            sc.expect(",")
            second = self._operand(sc)
            sc.expect(",")
            count = sc.expect_num()
            if count < 0:
                raise sc.error("negative element count")
            sc.expect(",")
            ty = self._type(sc)
            if op == "memcpy":
                ins = Memcpy(self._mint(), dst, second, count, ty)
            else:
                ins = Memset(self._mint(), dst, second, count, ty)
        elif op == "declassify":
            no_dest()
            ty = self._type(sc)
            ins = Declassify(self._mint(), ty, self._operand(sc))
        elif op == "ctrnext":
            ins = CtrNext(self._mint(), need_dest())
        elif op in ("wstore16", "wstore8"):
            no_dest()
            ty = self._type(sc)
            val = self._operand(sc)
            sc.expect(",")
            ctr = self._operand(sc)
            sc.expect(",")
            ins = WStore(self._mint(), 16 if op == "wstore16" else 8, ty, val, ctr, self._operand(sc))
        elif op == "mstore":
            no_dest()
            rng = sc.expect_ident("mask generator name")
            if rng not in MASK_RNGS:
                raise sc.error(f"unknown mask generator '{rng}'")
            ty = self._type(sc)
            val = self._operand(sc)
            sc.expect(",")
            ins = MStore(self._mint(), rng, ty, val, self._operand(sc))
        elif op == "mload":
            d = need_dest()
            ty = self._type(sc)
            sc.expect(",")
            ins = MLoad(self._mint(), d, ty, self._operand(sc))
        else:
            raise IrParseError(sc.line, opcol, f"unknown instruction '{op}'")

        if not sc.done():
            raise sc.error("unexpected trailing tokens")
        return ins


def parse_module(text: str) -> IrModule:
    """Parse .zir source into an IrModule; raises IrParseError with line/column."""
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Printing
# ---------------------------------------------------------------------------


def _instr_to_str(ins: Instr) -> str:
    t = type_to_str
    o = operand_to_str
    if isinstance(ins, Alloca):
        return f"%{ins.dest} = alloca {t(ins.ty)}"
    if isinstance(ins, Load):
        return f"%{ins.dest} = load {t(ins.ty)}, {o(ins.addr)}"
    if isinstance(ins, Store):
        return f"store {t(ins.ty)} {o(ins.value)}, {o(ins.addr)}"
    if isinstance(ins, Gep):
        idx = ", ".join(o(i) for i in ins.indices)
        return f"%{ins.dest} = gep {t(ins.ty)}, {o(ins.base)}, {idx}"
    if isinstance(ins, BinOp):
        return f"%{ins.dest} = {ins.op} {t(ins.ty)} {o(ins.a)}, {o(ins.b)}"
    if isinstance(ins, Icmp):
        return f"%{ins.dest} = icmp {ins.cond} {t(ins.ty)} {o(ins.a)}, {o(ins.b)}"
    if isinstance(ins, Select):
        return f"%{ins.dest} = select {t(ins.ty)} {o(ins.cond)}, {o(ins.a)}, {o(ins.b)}"
    if isinstance(ins, Br):
        return f"br {ins.label}"
    if isinstance(ins, CondBr):
        return f"condbr {o(ins.cond)}, {ins.then_label}, {ins.else_label}"
    if isinstance(ins, Ret):
        return "ret" if ins.value is None else f"ret {o(ins.value)}"
    if isinstance(ins, Call):
        callee = ins.callee if isinstance(ins.callee, str) else o(ins.callee)
        args = ", ".join(o(a) for a in ins.args)
        head = f"%{ins.dest} = " if ins.dest is not None else ""
        return f"{head}call {callee}({args})"
    if isinstance(ins, Malloc):
        return f"%{ins.dest} = malloc {o(ins.size)}"
    if isinstance(ins, Free):
        return f"free {o(ins.addr)}"
    if isinstance(ins, Memcpy):
        return f"memcpy {o(ins.dst)}, {o(ins.src)}, {ins.count}, {t(ins.elem_ty)}"
    if isinstance(ins, Memset):
        return f"memset {o(ins.dst)}, {o(ins.value)}, {ins.count}, {t(ins.elem_ty)}"
    if isinstance(ins, Declassify):
        return f"declassify {t(ins.ty)} {o(ins.value)}"
    if isinstance(ins, CtrNext):
        return f"%{ins.dest} = ctrnext"
    if isinstance(ins, WStore):
        return f"wstore{ins.block} {t(ins.ty)} {o(ins.value)}, {o(ins.counter)}, {o(ins.addr)}"
    if isinstance(ins, MStore):
        return f"mstore {ins.rng} {t(ins.ty)} {o(ins.value)}, {o(ins.addr)}"
    if isinstance(ins, MLoad):
        return f"%{ins.dest} = mload {t(ins.ty)}, {o(ins.addr)}"
    raise TypeError(f"unprintable instruction {ins!r}")


def print_module(module: IrModule) -> str:
    """Canonical text; parse_module(print_module(m)) is structurally equal to m."""
    out: list[str] = []
    for name, fields in module.aggregates.items():
        out.append(f"aggregate {name} = {{ {', '.join(type_to_str(f) for f in fields)} }}")
    if module.aggregates:
        out.append("")
    for g in module.globals.values():
        init = "zeroinit" if g.init is None else f"bytes({g.init.hex()})"
        out.append(f"global @{g.name} : {type_to_str(g.ty)} = {init}")
    if module.globals:
        out.append("")
    for fn in module.functions.values():
        params = ", ".join(f"%{p} : {type_to_str(ty)}" for p, ty in fn.params)
        ret = "void" if fn.ret is None else type_to_str(fn.ret)
        protect = "protect " if fn.protect else ""
        out.append(f"fn {protect}{fn.name}({params}) -> {ret} {{")
        for block in fn.blocks:
            out.append(f"{block.label}:")
            for ins in block.instrs:
                out.append(f"  {_instr_to_str(ins)}")
        out.append("}")
        out.append("")
    return "\n".join(out).rstrip() + "\n"


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    rule: str
    message: str
    iid: int | None = None

    def __str__(self) -> str:
        where = f" (instr {self.iid})" if self.iid is not None else ""
        return f"[{self.rule}]{where} {self.message}"


def _operands_of(ins: Instr) -> list[Operand]:
    ops: list[Operand] = []
    for f in ins.__dataclass_fields__:
        v = getattr(ins, f)
        if isinstance(v, (Reg, GlobalRef, FuncAddr, Const)):
            ops.append(v)
        elif isinstance(v, tuple):
            ops.extend(x for x in v if isinstance(x, (Reg, GlobalRef, FuncAddr, Const)))
    return ops


def _check_gep_path(ty: TypeExpr, indices: tuple[Operand, ...], aggregates: Aggregates) -> str | None:
    """First index scales by sizeof(ty); later indices navigate into ty."""
    cur = ty
    for i, idx in enumerate(indices[1:]):
        if is_primitive(cur):
            return f"gep index {i + 1} goes through primitive {type_to_str(cur)}"
        if isinstance(cur, ArrayType):
            cur = cur.element
            continue
        fields = aggregates[cur.name]
        if not isinstance(idx, Const):
            return f"gep index {i + 1} into aggregate {cur.name} must be a literal"
        if idx.value >= len(fields):
            return f"gep index {i + 1} out of range for aggregate {cur.name}"
        cur = fields[idx.value]
    return None


def validate_module(module: IrModule) -> list[Diagnostic]:
    """Empty result iff all structural invariants hold. Never raises."""
    diags: list[Diagnostic] = []
    aggs = module.aggregates

    def bad(rule: str, message: str, iid: int | None = None) -> None:
        diags.append(Diagnostic(rule, message, iid))

    # Aggregate and global well-formedness (defensive for built modules).
    for name, fields in aggs.items():
        if not fields:
            bad("type-wellformed", f"aggregate {name} has no fields")

    def check_type(ty: TypeExpr, where: str) -> None:
        if isinstance(ty, IntType):
            if ty.bits not in INT_WIDTHS:
                bad("type-wellformed", f"{where}: unsupported width i{ty.bits}")
        elif isinstance(ty, ArrayType):
            if ty.count < 1:
                bad("type-wellformed", f"{where}: array count < 1")
            check_type(ty.element, where)
        elif isinstance(ty, NamedType):
            if ty.name not in aggs:
                bad("type-wellformed", f"{where}: unknown aggregate {ty.name}")

    for name, fields in aggs.items():
        for f in fields:
            check_type(f, f"aggregate {name}")
    for g in module.globals.values():
        check_type(g.ty, f"global @{g.name}")
        if g.init is not None:
            want = size_of(g.ty, aggs)
            if len(g.init) != want:
                bad("init-size", f"global @{g.name}: initializer is {len(g.init)} bytes, type needs {want}")

    for fn in module.functions.values():
        ctx = f"fn {fn.name}"
        for pname, pty in fn.params:
            if not is_primitive(pty):
                bad("param-type", f"{ctx}: parameter %{pname} must be a primitive or addr")
        if fn.ret is not None and not is_primitive(fn.ret):
            bad("ret-type", f"{ctx}: return type must be primitive, addr or void")
        if not fn.blocks:
            bad("empty-function", f"{ctx}: function has no blocks")
            continue

        # Terminators: exactly one, at the end of each block.
        for block in fn.blocks:
            if not block.instrs or not isinstance(block.instrs[-1], TERMINATORS):
                bad("missing-terminator", f"{ctx}: block {block.label} does not end in a terminator")
            for ins in block.instrs[:-1]:
                if isinstance(ins, TERMINATORS):
                    bad("terminator-position", f"{ctx}: terminator before end of block {block.label}", ins.iid)

        # SSA-lite: single textual definition, defined before (textual) use.
        defined: set[str] = {p for p, _ in fn.params}
        for ins in fn.instructions():
            for op in _operands_of(ins):
                if isinstance(op, Reg) and op.name not in defined:
                    bad("use-before-def", f"{ctx}: %{op.name} used before definition", ins.iid)
                elif isinstance(op, GlobalRef) and op.name not in module.globals:
                    bad("unknown-global", f"{ctx}: unknown global @{op.name}", ins.iid)
                elif isinstance(op, FuncAddr) and op.name not in module.functions:
                    bad("unknown-function", f"{ctx}: unknown function &{op.name}", ins.iid)
            dest = getattr(ins, "dest", None)
            if dest is not None:
                if dest in defined:
                    bad("ssa-single-def", f"{ctx}: %{dest} defined more than once", ins.iid)
                defined.add(dest)

        # Per-instruction shape checks.
        for ins in fn.instructions():
            if isinstance(ins, (Load, Store, Declassify, MLoad, MStore)):
                check_type(ins.ty, ctx)
                if not is_primitive(ins.ty):
                    bad("mem-type", f"{ctx}: access type must be primitive or addr", ins.iid)
            elif isinstance(ins, WStore):
                check_type(ins.ty, ctx)
                cap = ins.block // 2
                if not is_primitive(ins.ty) or size_of(ins.ty, aggs) > cap:
                    bad("mem-type", f"{ctx}: wstore{ins.block} data must fit {cap} bytes", ins.iid)
            elif isinstance(ins, (Alloca, Gep)):
                check_type(ins.ty, ctx)
                if isinstance(ins, Gep):
                    err = _check_gep_path(ins.ty, ins.indices, aggs)
                    if err:
                        bad("gep-path", f"{ctx}: {err}", ins.iid)
            elif isinstance(ins, (Memcpy, Memset)):
                check_type(ins.elem_ty, ctx)
                if not is_primitive(ins.elem_ty):
                    bad("mem-type", f"{ctx}: element type must be primitive or addr", ins.iid)
            elif isinstance(ins, Call) and isinstance(ins.callee, str):
                callee = module.functions.get(ins.callee)
                if callee is None:
                    bad("unknown-function", f"{ctx}: call to unknown function {ins.callee}", ins.iid)
                    continue
                if len(ins.args) != len(callee.params):
                    bad("arg-count", f"{ctx}: {ins.callee} takes {len(callee.params)} args, got {len(ins.args)}", ins.iid)
                if ins.dest is not None and callee.ret is None:
                    bad("call-result-void", f"{ctx}: {ins.callee} returns void", ins.iid)
            elif isinstance(ins, Ret):
                if (ins.value is None) != (fn.ret is None):
                    bad("ret-type", f"{ctx}: ret does not match signature", ins.iid)

    # Hybrid global use: any global touched both inside and outside the
    # protect-attribute closure makes instrumented/plain layouts collide.
    protected = _attribute_closure(module)
    if protected:
        for gname in module.globals:
            users = {f for f, ins in module.instructions()
                     if any(isinstance(op, GlobalRef) and op.name == gname for op in _operands_of(ins))}
            if users & protected and users - protected:
                bad("hybrid-global-use",
                    f"global @{gname} used by protected {sorted(users & protected)} "
                    f"and unprotected {sorted(users - protected)}")
    return diags


def _direct_callees(fn: Function) -> set[str]:
    return {ins.callee for ins in fn.instructions() if isinstance(ins, Call) and isinstance(ins.callee, str)}


def _attribute_closure(module: IrModule) -> set[str]:
    work = [f.name for f in module.functions.values() if f.protect]
    seen: set[str] = set()
    while work:
        name = work.pop()
        if name in seen or name not in module.functions:
            continue
        seen.add(name)
        work.extend(_direct_callees(module.functions[name]))
    return seen


# ---------------------------------------------------------------------------
# Call graph
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CallGraph:
    nodes: frozenset[str]
    edges: frozenset[tuple[str, str]]
    indirect_sites: tuple[int, ...]

    def callees(self, name: str) -> set[str]:
        return {b for a, b in self.edges if a == name}


def build_call_graph(module: IrModule) -> CallGraph:
    """Direct call edges plus the instruction ids of indirect call sites."""
    edges: set[tuple[str, str]] = set()
    indirect: list[int] = []
    for fname, ins in module.instructions():
        if not isinstance(ins, Call):
            continue
        if isinstance(ins.callee, str):
            if ins.callee in module.functions:
                edges.add((fname, ins.callee))
        elif isinstance(ins.callee, FuncAddr):
            if ins.callee.name in module.functions:
                edges.add((fname, ins.callee.name))
        else:
            indirect.append(ins.iid)
    return CallGraph(frozenset(module.functions), frozenset(edges), tuple(sorted(indirect)))

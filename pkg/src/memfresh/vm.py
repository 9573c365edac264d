"""Deterministic IR interpreter with an attacker-observable memory model.

The machine executes validated modules and emits a full event trace:
every store (with per-block ciphertext digests before and after), every
load, allocation and free, and, when the data memory-dependent
prefetcher model is on, one candidate event per pointer-like word found
near an accessed address.

Memory encryption is modeled by a keyed hash over (key, block address,
16 plaintext bytes): the attacker only ever learns equality of
ciphertexts, and any deterministic collision-resistant digest preserves
exactly that observable.  Silent-store semantics suppress aligned
chunks whose bytes would not change.  All allocation is bump-style and
16-byte aligned; freed addresses are never reused within a run, so
collision audits are free of address-reuse confounds.
"""

from __future__ import annotations

import hashlib
import json
import random
from bisect import bisect_right
from dataclasses import dataclass, replace

from . import ir
from .ir import (
    Aggregates,
    Alloca,
    BinOp,
    Br,
    Call,
    CondBr,
    Const,
    CtrNext,
    Declassify,
    Free,
    FuncAddr,
    Function,
    Gep,
    GlobalRef,
    Icmp,
    Instr,
    IrModule,
    Load,
    MLoad,
    MStore,
    Malloc,
    Memcpy,
    Memset,
    Operand,
    Reg,
    Ret,
    Select,
    Store,
    WStore,
    size_of,
)
from .layout import MASK64, CounterState

FUNC_TABLE_BASE = 0x2000
GLOBALS_BASE = 0x10000
STACK_BASE = 0x100000
# Shadow mask bytes are reported at this displacement when exposed.
SHADOW_DISPLACEMENT = 0x1_0000_0000

_GRANULARITIES = (1, 2, 4, 8, 16)


class VmError(Exception):
    def __init__(self, message: str, iid: int | None = None, step: int | None = None):
        where = f" (instr {iid})" if iid is not None else ""
        super().__init__(message + where)
        self.message = message
        self.iid = iid
        self.step = step


@dataclass
class MachineConfig:
    cipher_key_seed: int = 0xC0FFEE
    counter_seed: int | None = None  # None: drawn fresh per run
    silent_store_granularity: int | None = None  # None: silencing off
    dmp_enabled: bool = False
    dmp_scan_window: int = 64
    heap_base: int = 0x0100_0000
    heap_limit: int = 0x0800_0000
    max_steps: int = 50_000_000
    expose_mask_shadow: bool = False

    def check(self) -> None:
        if self.heap_base < 0x1000:
            raise ValueError("heap_base must be >= 0x1000")
        if self.heap_base <= STACK_BASE:
            raise ValueError(f"heap_base must leave stack room above {STACK_BASE:#x}")
        if self.heap_limit > 1 << 32 or self.heap_limit <= self.heap_base:
            raise ValueError("heap_limit must be in (heap_base, 2^32]")
        g = self.silent_store_granularity
        if g is not None and g not in _GRANULARITIES:
            raise ValueError(f"granularity must be one of {_GRANULARITIES} or off")
        w = self.dmp_scan_window
        if w < 8 or w & (w - 1) or w % 8:
            raise ValueError("dmp_scan_window must be a power of two >= 8")


# ---------------------------------------------------------------------------
# Memory
# ---------------------------------------------------------------------------


@dataclass
class Region:
    base: int
    size: int  # guest-visible size
    padded: int  # backing size, multiple of 16
    kind: str  # "global" | "stack" | "heap"
    label: str
    live: bool
    data: bytearray
    shadow: bytearray | None = None


class MemoryImage:
    """Non-overlapping 16-byte-aligned regions with liveness."""

    def __init__(self) -> None:
        self.regions: list[Region] = []
        self._bases: list[int] = []

    def add(self, region: Region) -> None:
        i = bisect_right(self._bases, region.base)
        self._bases.insert(i, region.base)
        self.regions.insert(i, region)

    def region_at(self, addr: int) -> Region | None:
        """Region whose backing (padded) range covers addr, live or dead."""
        i = bisect_right(self._bases, addr) - 1
        if i < 0:
            return None
        r = self.regions[i]
        return r if addr < r.base + r.padded else None

    def access(self, addr: int, width: int) -> Region:
        """Live region fully containing [addr, addr+width); traps otherwise."""
        r = self.region_at(addr)
        if r is None or not r.live or addr + width > r.base + r.size:
            raise VmError(f"invalid {width}-byte access at {addr:#x}")
        return r

    def read(self, addr: int, width: int) -> bytes:
        r = self.access(addr, width)
        off = addr - r.base
        return bytes(r.data[off:off + width])

    def phys_word(self, addr: int) -> int:
        """Attacker view of an aligned 8-byte word; unmapped reads as zero."""
        r = self.region_at(addr)
        if r is None:
            return 0
        off = addr - r.base
        return int.from_bytes(r.data[off:off + 8], "little")

    def block_bytes(self, block_addr: int) -> bytes:
        r = self.region_at(block_addr)
        if r is None:
            return bytes(16)
        off = block_addr - r.base
        return bytes(r.data[off:off + 16])

    def is_live_address(self, value: int) -> bool:
        r = self.region_at(value)
        return r is not None and r.live and value < r.base + r.size

    def shadow_read(self, region: Region, addr: int, width: int) -> bytes:
        if region.shadow is None:
            return bytes(width)
        off = addr - region.base
        return bytes(region.shadow[off:off + width])

    def shadow_write(self, region: Region, addr: int, data: bytes) -> None:
        if region.shadow is None:
            region.shadow = bytearray(region.padded)
        off = addr - region.base
        region.shadow[off:off + len(data)] = data

    def live_bytes(self) -> int:
        return sum(r.padded for r in self.regions if r.live)


def _pad16(n: int) -> int:
    return max(16, (n + 15) & ~15)


# ---------------------------------------------------------------------------
# Ciphertext model
# ---------------------------------------------------------------------------


def encrypt_block(key_seed: int, block_addr: int, plaintext: bytes) -> bytes:
    """128-bit digest of one 16-byte block under an address tweak.

    Deterministic in (key, address, plaintext); distinct inputs give
    distinct digests at any test scale.
    """
    if block_addr % 16:
        raise ValueError(f"block address {block_addr:#x} not 16-byte aligned")
    if len(plaintext) != 16:
        raise ValueError("plaintext must be exactly 16 bytes")
    h = hashlib.blake2b(
        block_addr.to_bytes(8, "little") + plaintext,
        key=(key_seed & MASK64).to_bytes(8, "little"),
        digest_size=16,
    )
    return h.digest()


class CiphertextView:
    """Per-block digests of a memory image, recomputable at any step."""

    def __init__(self, key_seed: int):
        self.key_seed = key_seed

    def digest(self, image: MemoryImage, block_addr: int) -> bytes:
        return encrypt_block(self.key_seed, block_addr, image.block_bytes(block_addr))

    def snapshot(self, image: MemoryImage) -> dict[int, bytes]:
        out: dict[int, bytes] = {}
        for r in image.regions:
            for off in range(0, r.padded, 16):
                out[r.base + off] = encrypt_block(self.key_seed, r.base + off, bytes(r.data[off:off + 16]))
        return out


# ---------------------------------------------------------------------------
# Store / prefetch semantics
# ---------------------------------------------------------------------------


@dataclass
class StoreOutcome:
    before: bytes
    after: bytes
    silenced: bool  # every chunk suppressed
    suppressed: tuple[int, ...]  # offsets (relative to store start) of suppressed chunks
    chunks: int


def _apply_store_region(region: Region, addr: int, width: int, data: bytes,
                        granularity: int | None) -> StoreOutcome:
    off = addr - region.base
    before = bytes(region.data[off:off + width])
    if granularity is None:
        region.data[off:off + width] = data
        return StoreOutcome(before, data, False, (), 1)
    if before == data:
        # Every chunk matches, whatever the granularity: fully silenced.
        nchunks = len(range(addr - (addr % granularity), addr + width, granularity))
        return StoreOutcome(before, data, True, tuple(range(0, width, granularity)), nchunks)
    suppressed: list[int] = []
    chunks = 0
    pos = addr - (addr % granularity)
    while pos < addr + width:
        lo = max(pos, addr)
        hi = min(pos + granularity, addr + width)
        chunks += 1
        new = data[lo - addr:hi - addr]
        if bytes(region.data[lo - region.base:hi - region.base]) == new:
            suppressed.append(lo - addr)
        else:
            region.data[lo - region.base:hi - region.base] = new
        pos += granularity
    return StoreOutcome(before, data, len(suppressed) == chunks, tuple(suppressed), chunks)


def apply_store(image: MemoryImage, addr: int, width: int, data: bytes,
                granularity: int | None) -> StoreOutcome:
    """Write ``data`` with silent-store semantics at the given granularity.

    The store is decomposed into granularity-aligned chunks; a chunk whose
    new bytes equal the current bytes is suppressed.  The store counts as
    silenced only when every chunk was suppressed.  With granularity off
    the bytes are always written.
    """
    return _apply_store_region(image.access(addr, width), addr, width, data, granularity)


def dmp_scan(image: MemoryImage, accessed_addr: int, config: MachineConfig) -> list[tuple[int, int]]:
    """Pointer candidates in the scan window around an accessed address.

    Returns (word address, word value) for every aligned 8-byte word in
    the window whose little-endian value falls inside a live region.
    """
    window = config.dmp_scan_window
    start = accessed_addr & ~(window - 1)
    found: list[tuple[int, int]] = []
    for off in range(0, window, 8):
        value = image.phys_word(start + off)
        if value and image.is_live_address(value):
            found.append((start + off, value))
    return found


# ---------------------------------------------------------------------------
# Mask generators (the software randomness the mask transform relies on)
# ---------------------------------------------------------------------------


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class IncrementingRng:
    """Weak by construction: masks step by one per draw."""

    def __init__(self, seed: int):
        self.value = seed & MASK64

    def next(self) -> int:
        self.value = (self.value + 1) & MASK64
        return self.value


class XorShift128PlusRng:
    def __init__(self, seed: int):
        self.s0 = _splitmix64(seed) or 1
        self.s1 = _splitmix64(seed + 1) or 2

    def next(self) -> int:
        s1, s0 = self.s0, self.s1
        self.s0 = s0
        s1 ^= (s1 << 23) & MASK64
        self.s1 = s1 ^ s0 ^ (s1 >> 18) ^ (s0 >> 5)
        return (self.s1 + s0) & MASK64


class KeyedHashRng:
    def __init__(self, seed: int):
        self.key = (seed & MASK64).to_bytes(8, "little")
        self.n = 0

    def next(self) -> int:
        self.n += 1
        d = hashlib.blake2b(self.n.to_bytes(8, "little"), key=self.key, digest_size=8)
        return int.from_bytes(d.digest(), "little")


_MASK_RNGS = {
    "incrementing": IncrementingRng,
    "xorshift128plus": XorShift128PlusRng,
    "keyed-hash": KeyedHashRng,
}


# ---------------------------------------------------------------------------
# Trace events
# ---------------------------------------------------------------------------


@dataclass(slots=True)
class TraceEvent:
    step: int
    instr_id: int
    kind: str  # store | store-silenced | load | alloc | free | prefetch-candidate
    addr: int
    width: int
    before: bytes
    after: bytes
    digests_before: tuple[tuple[int, bytes], ...]
    digests_after: tuple[tuple[int, bytes], ...]
    extras: dict | None = None


def event_to_obj(ev: TraceEvent) -> dict:
    """JSON object with fields in the fixed trace-file order."""
    extras = None
    if ev.extras is not None:
        extras = {k: (hex(v) if isinstance(v, int) else v) for k, v in sorted(ev.extras.items())}
    return {
        "step": ev.step,
        "instr_id": ev.instr_id,
        "kind": ev.kind,
        "addr": hex(ev.addr),
        "width": ev.width,
        "before": ev.before.hex(),
        "after": ev.after.hex(),
        "digests_before": [[hex(a), d.hex()] for a, d in ev.digests_before],
        "digests_after": [[hex(a), d.hex()] for a, d in ev.digests_after],
        "extras": extras,
    }


def event_from_obj(obj: dict) -> TraceEvent:
    extras = obj.get("extras")
    if extras is not None:
        extras = {k: (int(v, 16) if isinstance(v, str) and v.startswith("0x") else v)
                  for k, v in extras.items()}
    return TraceEvent(
        step=obj["step"],
        instr_id=obj["instr_id"],
        kind=obj["kind"],
        addr=int(obj["addr"], 16),
        width=obj["width"],
        before=bytes.fromhex(obj["before"]),
        after=bytes.fromhex(obj["after"]),
        digests_before=tuple((int(a, 16), bytes.fromhex(d)) for a, d in obj["digests_before"]),
        digests_after=tuple((int(a, 16), bytes.fromhex(d)) for a, d in obj["digests_after"]),
        extras=extras,
    )


@dataclass
class RunCounters:
    stores: int = 0
    silenced: int = 0
    loads: int = 0
    prefetch_candidates: int = 0
    instructions: int = 0


@dataclass
class RunResult:
    exit_value: int | None
    declassified: list[int]
    trace: list[TraceEvent]
    counters: RunCounters
    final_memory: MemoryImage
    globals: dict[str, int]
    config: MachineConfig  # with the counter seed actually used
    peak_memory: int


# ---------------------------------------------------------------------------
# Interpreter
# ---------------------------------------------------------------------------


def _mask_bits(bits: int) -> int:
    return (1 << bits) - 1


def _signed(value: int, bits: int) -> int:
    value &= _mask_bits(bits)
    return value - (1 << bits) if value >> (bits - 1) else value


class _Frame:
    __slots__ = ("fn", "regs", "block", "idx", "dest", "stack_regions")

    def __init__(self, fn: Function, regs: dict, dest: str | None):
        self.fn = fn
        self.regs = regs
        self.block = 0
        self.idx = 0
        self.dest = dest
        self.stack_regions: list[Region] = []


class _CompiledFn:
    __slots__ = ("blocks", "labels")

    def __init__(self, fn: Function):
        self.blocks = [b.instrs for b in fn.blocks]
        self.labels = {b.label: i for i, b in enumerate(fn.blocks)}


class Machine:
    """One run of one module. Owns its state exclusively."""

    def __init__(self, module: IrModule, config: MachineConfig):
        config.check()
        seed = config.counter_seed
        if seed is None:
            seed = random.SystemRandom().getrandbits(64)
        self.config = replace(config, counter_seed=seed)
        self.module = module
        self.aggs: Aggregates = module.aggregates
        self.counter = CounterState(seed)
        self.cipher = CiphertextView(config.cipher_key_seed)
        self.image = MemoryImage()
        self.trace: list[TraceEvent] = []
        self.counters = RunCounters()
        self.declassified: list[int] = []
        self.step = 0
        self.peak = 0
        self._mask_rngs: dict[str, object] = {}
        self._compiled = {name: _CompiledFn(fn) for name, fn in module.functions.items()}

        self.func_addr: dict[str, int] = {}
        self.addr_func: dict[int, str] = {}
        for i, name in enumerate(module.functions):
            a = FUNC_TABLE_BASE + 16 * i
            self.func_addr[name] = a
            self.addr_func[a] = name

        # Globals: 64-byte aligned so distinct globals never share a default
        # prefetcher scan window.
        self.global_addr: dict[str, int] = {}
        base = GLOBALS_BASE
        for g in module.globals.values():
            size = size_of(g.ty, self.aggs)
            r = Region(base, size, _pad16(size), "global", f"@{g.name}", True, bytearray(_pad16(size)))
            if g.init is not None:
                r.data[:len(g.init)] = g.init
            self.image.add(r)
            self.global_addr[g.name] = base
            extras = {"region": "global", "label": f"@{g.name}"}
            if g.init is not None and any(g.init):
                extras["init"] = g.init.hex()
            self._event(-1, "alloc", base, size, b"", b"", (), (), extras)
            base = (base + r.padded + 63) & ~63
        self._stack_ptr = STACK_BASE
        self._heap_ptr = self.config.heap_base
        self._note_memory()

    # -- bookkeeping --------------------------------------------------------

    def _note_memory(self) -> None:
        live = self.image.live_bytes()
        if live > self.peak:
            self.peak = live

    def _event(self, iid: int, kind: str, addr: int, width: int, before: bytes, after: bytes,
               dig_before, dig_after, extras: dict | None = None) -> None:
        self.trace.append(TraceEvent(self.step, iid, kind, addr, width, before, after,
                                     tuple(dig_before), tuple(dig_after), extras))
        self.step += 1

    def _blocks_of(self, addr: int, width: int) -> range:
        return range(addr & ~15, addr + width, 16)

    def _digests(self, addr: int, width: int) -> tuple[tuple[int, bytes], ...]:
        return tuple((b, self.cipher.digest(self.image, b)) for b in self._blocks_of(addr, width))

    # -- memory operations with events ---------------------------------------

    def _do_store(self, iid: int, addr: int, data: bytes, extras: dict | None = None) -> None:
        width = len(data)
        self.image.access(addr, width)  # trap before computing digests
        dig_before = self._digests(addr, width)
        out = apply_store(self.image, addr, width, data, self.config.silent_store_granularity)
        dig_after = self._digests(addr, width)
        kind = "store-silenced" if out.silenced else "store"
        ex = dict(extras) if extras else None
        if out.suppressed and not out.silenced:
            ex = ex or {}
            ex["suppressed_chunks"] = list(out.suppressed)
        after = out.before if out.silenced else out.after
        self._event(iid, kind, addr, width, out.before, after, dig_before, dig_after, ex)
        self.counters.stores += 1
        if out.silenced:
            self.counters.silenced += 1

    def _do_load(self, iid: int, addr: int, width: int) -> bytes:
        data = self.image.read(addr, width)
        digs = self._digests(addr, width)
        self._event(iid, "load", addr, width, data, data, digs, digs)
        self.counters.loads += 1
        if self.config.dmp_enabled:
            for word_addr, value in dmp_scan(self.image, addr, self.config):
                word = value.to_bytes(8, "little")
                self._event(iid, "prefetch-candidate", word_addr, 8, word, word, (), (),
                            {"candidate": value, "source": addr})
                self.counters.prefetch_candidates += 1
        return data

    def _alloc(self, iid: int, kind: str, label: str, size: int) -> Region:
        padded = _pad16(size)
        if kind == "stack":
            base = self._stack_ptr
            if base + padded > self.config.heap_base:
                raise VmError("stack exhausted", iid)
            self._stack_ptr = base + padded
        else:
            base = self._heap_ptr
            if base + padded > self.config.heap_limit:
                raise VmError("heap exhausted", iid)
            self._heap_ptr = base + padded
        r = Region(base, size, padded, kind, label, True, bytearray(padded))
        self.image.add(r)
        self._event(iid, "alloc", base, size, b"", b"", (), (), {"region": kind, "label": label})
        self._note_memory()
        return r

    # -- value evaluation -----------------------------------------------------

    def _val(self, frame: _Frame, op: Operand) -> int:
        t = type(op)
        if t is Reg:
            try:
                return frame.regs[op.name]
            except KeyError:
                raise VmError(f"undefined register %{op.name}") from None
        if t is Const:
            return op.value
        if t is GlobalRef:
            return self.global_addr[op.name]
        return self.func_addr[op.name]

    def _width(self, ty) -> int:
        return size_of(ty, self.aggs)

    # -- main loop -------------------------------------------------------------

    def run(self, entry: str, args: list[int]) -> RunResult:
        fn = self.module.functions.get(entry)
        if fn is None:
            raise VmError(f"no entry function '{entry}'")
        if len(args) != len(fn.params):
            raise VmError(f"entry '{entry}' takes {len(fn.params)} args, got {len(args)}")
        regs = {p: v & _mask_bits(8 * self._width(ty)) for (p, ty), v in zip(fn.params, args)}
        frames = [_Frame(fn, regs, None)]
        exit_value: int | None = None

        while frames:
            frame = frames[-1]
            compiled = self._compiled[frame.fn.name]
            if frame.block >= len(compiled.blocks) or frame.idx >= len(compiled.blocks[frame.block]):
                raise VmError(f"fell off the end of block in {frame.fn.name}")
            ins = compiled.blocks[frame.block][frame.idx]
            frame.idx += 1
            self.counters.instructions += 1
            if self.counters.instructions > self.config.max_steps:
                raise VmError(f"step limit exceeded after {self.config.max_steps} instructions",
                              ins.iid, self.step)
            ret = self._exec(frame, frames, ins)
            if ret is not None:
                exit_value = ret[0]
        return RunResult(exit_value, self.declassified, self.trace, self.counters,
                         self.image, dict(self.global_addr), self.config, self.peak)

    def _exec(self, frame: _Frame, frames: list[_Frame], ins: Instr):
        t = type(ins)
        val = self._val

        if t is Load:
            w = self._width(ins.ty)
            data = self._do_load(ins.iid, val(frame, ins.addr), w)
            frame.regs[ins.dest] = int.from_bytes(data, "little")
        elif t is Store:
            w = self._width(ins.ty)
            data = (val(frame, ins.value) & _mask_bits(8 * w)).to_bytes(w, "little")
            self._do_store(ins.iid, val(frame, ins.addr), data)
        elif t is BinOp:
            bits = 8 * self._width(ins.ty)
            m = _mask_bits(bits)
            a = val(frame, ins.a) & m
            b = val(frame, ins.b) & m
            op = ins.op
            if op == "add":
                r = a + b
            elif op == "sub":
                r = a - b
            elif op == "mul":
                r = a * b
            elif op == "and":
                r = a & b
            elif op == "or":
                r = a | b
            elif op == "xor":
                r = a ^ b
            elif op == "shl":
                r = a << (b % bits)
            else:  # lshr
                r = a >> (b % bits)
            frame.regs[ins.dest] = r & m
        elif t is Icmp:
            bits = 8 * self._width(ins.ty)
            m = _mask_bits(bits)
            a = val(frame, ins.a) & m
            b = val(frame, ins.b) & m
            if ins.cond == "eq":
                r = a == b
            elif ins.cond == "ne":
                r = a != b
            elif ins.cond == "ult":
                r = a < b
            else:  # slt
                r = _signed(a, bits) < _signed(b, bits)
            frame.regs[ins.dest] = int(r)
        elif t is Gep:
            addr = val(frame, ins.base)
            cur = ins.ty
            first = _signed(val(frame, ins.indices[0]), 64)
            addr += first * size_of(cur, self.aggs)
            for idx in ins.indices[1:]:
                if isinstance(cur, ir.ArrayType):
                    addr += _signed(val(frame, idx), 64) * size_of(cur.element, self.aggs)
                    cur = cur.element
                else:
                    fields = self.aggs[cur.name]
                    k = val(frame, idx)
                    addr += sum(size_of(f, self.aggs) for f in fields[:k])
                    cur = fields[k]
            frame.regs[ins.dest] = addr & MASK64
        elif t is Select:
            m = _mask_bits(8 * self._width(ins.ty))
            chosen = ins.a if val(frame, ins.cond) != 0 else ins.b
            frame.regs[ins.dest] = val(frame, chosen) & m
        elif t is Br:
            frame.block = self._compiled[frame.fn.name].labels[ins.label]
            frame.idx = 0
        elif t is CondBr:
            label = ins.then_label if val(frame, ins.cond) != 0 else ins.else_label
            frame.block = self._compiled[frame.fn.name].labels[label]
            frame.idx = 0
        elif t is Ret:
            for r in frame.stack_regions:
                r.live = False
            frames.pop()
            rv = None
            if ins.value is not None:
                rv = val(frame, ins.value)
                if frame.fn.ret is not None:
                    rv &= _mask_bits(8 * self._width(frame.fn.ret))
            if not frames:
                return (rv,)
            if frame.dest is not None:
                if rv is None:
                    raise VmError(f"{frame.fn.name} returned no value", ins.iid)
                frames[-1].regs[frame.dest] = rv
        elif t is Call:
            if isinstance(ins.callee, str):
                callee = self.module.functions.get(ins.callee)
                if callee is None:
                    raise VmError(f"call to unknown function {ins.callee}", ins.iid)
            else:
                target = val(frame, ins.callee)
                name = self.addr_func.get(target)
                if name is None:
                    raise VmError(f"indirect call to {target:#x} which is not a function", ins.iid)
                callee = self.module.functions[name]
            if len(ins.args) != len(callee.params):
                raise VmError(f"{callee.name} takes {len(callee.params)} args, got {len(ins.args)}", ins.iid)
            regs = {p: val(frame, a) & _mask_bits(8 * self._width(ty))
                    for (p, ty), a in zip(callee.params, ins.args)}
            frames.append(_Frame(callee, regs, ins.dest))
        elif t is Alloca:
            r = self._alloc(ins.iid, "stack", f"{frame.fn.name}.%{ins.dest}", self._width_any(ins.ty))
            frame.stack_regions.append(r)
            frame.regs[ins.dest] = r.base
        elif t is Malloc:
            size = val(frame, ins.size)
            r = self._alloc(ins.iid, "heap", f"{frame.fn.name}.%{ins.dest}", size)
            frame.regs[ins.dest] = r.base
        elif t is Free:
            addr = val(frame, ins.addr)
            r = self.image.region_at(addr)
            if r is None or r.base != addr or r.kind != "heap" or not r.live:
                raise VmError(f"free of {addr:#x} which is not a live heap allocation", ins.iid)
            r.data[:] = bytes(r.padded)  # freed memory is zeroed
            r.live = False
            self._event(ins.iid, "free", r.base, r.size, b"", b"", (), ())
        elif t is Memcpy:
            esz = self._width(ins.elem_ty)
            dst = val(frame, ins.dst)
            src = val(frame, ins.src)
            for k in range(ins.count):
                data = self.image.read(src + k * esz, esz)
                self._do_store(ins.iid, dst + k * esz, data)
        elif t is Memset:
            esz = self._width(ins.elem_ty)
            dst = val(frame, ins.dst)
            fill = bytes([val(frame, ins.value) & 0xFF]) * esz
            for k in range(ins.count):
                self._do_store(ins.iid, dst + k * esz, fill)
        elif t is Declassify:
            m = _mask_bits(8 * self._width(ins.ty))
            self.declassified.append(val(frame, ins.value) & m)
        elif t is CtrNext:
            frame.regs[ins.dest] = self.counter.bump()
        elif t is WStore:
            w = self._width(ins.ty)
            half = ins.block // 2
            addr = val(frame, ins.addr)
            if addr % ins.block:
                raise VmError(f"wstore{ins.block} address {addr:#x} misaligned", ins.iid)
            data = (val(frame, ins.value) & _mask_bits(8 * w)).to_bytes(w, "little")
            ctr = (val(frame, ins.counter) & _mask_bits(8 * half)).to_bytes(half, "little")
            block = data + bytes(half - w) + ctr
            self._do_store(ins.iid, addr, block)
        elif t is MStore:
            w = self._width(ins.ty)
            m = _mask_bits(8 * w)
            addr = val(frame, ins.addr)
            mask = self._mask_rng(ins.rng).next() & m
            masked = (val(frame, ins.value) ^ mask) & m
            region = self.image.access(addr, w)
            shadow_before = self.image.shadow_read(region, addr, w)
            sdig_before = None
            if self.config.expose_mask_shadow:
                sdig_before = self._shadow_digest(region, addr)
            self._do_store(ins.iid, addr, masked.to_bytes(w, "little"))
            shadow_after = mask.to_bytes(w, "little")
            self.image.shadow_write(region, addr, shadow_after)
            if self.config.expose_mask_shadow:
                saddr = addr + SHADOW_DISPLACEMENT
                self._event(ins.iid, "store", saddr, w, shadow_before, shadow_after,
                            (sdig_before,), (self._shadow_digest(region, addr),),
                            {"shadow": True})
                self.counters.stores += 1
        elif t is MLoad:
            w = self._width(ins.ty)
            addr = val(frame, ins.addr)
            region = self.image.access(addr, w)
            raw = self._do_load(ins.iid, addr, w)
            mask = int.from_bytes(self.image.shadow_read(region, addr, w), "little")
            frame.regs[ins.dest] = int.from_bytes(raw, "little") ^ mask
        else:
            raise VmError(f"unsupported instruction {type(ins).__name__}", ins.iid)
        return None

    def _width_any(self, ty) -> int:
        return size_of(ty, self.aggs)

    def _shadow_digest(self, region: Region, addr: int) -> tuple[int, bytes]:
        block_addr = addr & ~15
        if region.shadow is None:
            block = bytes(16)
        else:
            off = block_addr - region.base
            block = bytes(region.shadow[off:off + 16])
        sblock_addr = block_addr + SHADOW_DISPLACEMENT
        return sblock_addr, encrypt_block(self.config.cipher_key_seed, sblock_addr, block)

    def _mask_rng(self, kind: str):
        rng = self._mask_rngs.get(kind)
        if rng is None:
            # Mask streams are their own deterministic channel, derived from
            # the counter seed so one pair of seeds reproduces a whole run.
            rng = _MASK_RNGS[kind](_splitmix64((self.config.counter_seed or 0) ^ 0x6D61736B))
            self._mask_rngs[kind] = rng
        return rng


def execute(module: IrModule, entry: str, args: list[int], config: MachineConfig) -> RunResult:
    """Run a validated module; deterministic given (module, args, config)."""
    return Machine(module, config).run(entry, args)


# ---------------------------------------------------------------------------
# Trace (de)serialization: JSON lines, one event per line, fixed field order
# ---------------------------------------------------------------------------


def trace_to_jsonl(trace: list[TraceEvent]) -> str:
    return "".join(json.dumps(event_to_obj(ev), separators=(",", ":")) + "\n" for ev in trace)


def trace_from_jsonl(text: str) -> list[TraceEvent]:
    events = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            events.append(event_from_obj(json.loads(line)))
        except (KeyError, ValueError) as e:
            raise ValueError(f"malformed trace line {lineno}: {e}") from None
    return events

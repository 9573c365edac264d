"""Interleaved memory layouts: one primitive leaf per encryption block.

Two layouts are supported.  The standard one splits each 16-byte block
into a data chunk (up to 8 bytes, at block offset 0), zero padding, and
an 8-byte freshness counter at offsets 8..16.  The prefetcher-hardened
variant halves the block: 8-byte blocks with a 4-byte data chunk and a
4-byte guard at offsets 4..8 whose top byte is forced to 0xFF so the
containing little-endian word can never look like a valid address; the
remaining 24 guard bits carry the freshness counter.

Leaves are never packed together: every primitive leaf of a type gets a
whole block to itself, so a translated address is always
``block_index * block_size`` and address computations over interleaved
aggregates stay linear in the original indices.  8-byte leaves do not
fit the small mode and are split into low/high 4-byte halves occupying
two consecutive blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

from .ir import (
    ADDR,
    Aggregates,
    ArrayType,
    IntType,
    NamedType,
    TypeExpr,
    is_primitive,
    leaves_of,
    size_of,
    type_to_str,
)

MASK64 = (1 << 64) - 1

# Dmp8 guard: top byte forced outside the valid address range, low 24 bits fresh.
GUARD_TOP = 0xFF000000
GUARD_COUNTER_MASK = 0xFFFFFF


@dataclass(frozen=True)
class LayoutMode:
    name: str
    block_size: int
    data_capacity: int  # bytes available for one data chunk


STANDARD16 = LayoutMode("standard16", block_size=16, data_capacity=8)
DMP8 = LayoutMode("dmp8", block_size=8, data_capacity=4)

_MODES = {m.name: m for m in (STANDARD16, DMP8)}


def mode_by_name(name: str) -> LayoutMode:
    try:
        return _MODES[name]
    except KeyError:
        raise ValueError(f"unknown layout mode '{name}'") from None


@dataclass(frozen=True)
class LeafSlot:
    """One block of the plan: a leaf path, its block index and data width.

    Under Dmp8 an 8-byte leaf contributes two slots whose paths end in
    the synthetic steps "lo" and "hi".
    """

    path: tuple
    block: int
    width: int


@dataclass(frozen=True)
class LayoutPlan:
    original_type: TypeExpr
    mode: LayoutMode
    leaves: tuple[LeafSlot, ...]
    total_blocks: int

    @property
    def interleaved_size(self) -> int:
        return self.total_blocks * self.mode.block_size


@dataclass
class CounterState:
    """The live freshness counter; bumped once per protected store."""

    seed: int
    value: int = 0

    def __post_init__(self):
        self.value = self.seed & MASK64

    def bump(self) -> int:
        """Advance and return the post-increment value."""
        self.value = (self.value + 1) & MASK64
        return self.value


def guard_value(counter: int) -> int:
    """4-byte guard for the small mode: 0xFF top byte over 24 counter bits."""
    return GUARD_TOP | (counter & GUARD_COUNTER_MASK)


def plan_layout(ty: TypeExpr, mode: LayoutMode, aggregates: Aggregates) -> LayoutPlan:
    """Deterministic plan; leaves flattened depth-first in declaration order."""
    slots: list[LeafSlot] = []
    block = 0
    for path, leaf in leaves_of(ty, aggregates):
        width = size_of(leaf, aggregates)
        if width > 8:
            raise ValueError(f"unsupported leaf width {width} at {path}")
        if width <= mode.data_capacity:
            slots.append(LeafSlot(path, block, width))
            block += 1
        else:
            # Only 8-byte leaves under Dmp8 reach here; split across two blocks.
            slots.append(LeafSlot((*path, "lo"), block, 4))
            slots.append(LeafSlot((*path, "hi"), block + 1, 4))
            block += 2
    return LayoutPlan(ty, mode, tuple(slots), block)


def interleaved_size(ty: TypeExpr, mode: LayoutMode, aggregates: Aggregates) -> int:
    return plan_layout(ty, mode, aggregates).interleaved_size


def translate_access(plan: LayoutPlan, leaf_path: tuple) -> tuple[int, int]:
    """(byte offset of the data chunk, data width) for a leaf of the plan."""
    for slot in plan.leaves:
        if slot.path == tuple(leaf_path):
            return slot.block * plan.mode.block_size, slot.width
    raise KeyError(f"path {leaf_path!r} does not name a primitive leaf of {type_to_str(plan.original_type)}")


def heap_expansion_factor(mode: LayoutMode) -> int:
    """Worst-case growth of untyped heap allocations: one data byte per block."""
    return mode.block_size


def interleaved_block_count(ty: TypeExpr, mode: LayoutMode, aggregates: Aggregates) -> int:
    if is_primitive(ty):
        return 2 if size_of(ty, aggregates) > mode.data_capacity else 1
    if isinstance(ty, ArrayType):
        return ty.count * interleaved_block_count(ty.element, mode, aggregates)
    return sum(interleaved_block_count(f, mode, aggregates) for f in aggregates[ty.name])


# Names of the synthetic block aggregates added to hardened modules.  The
# field layout only matters for its size; data width is taken from the
# access instruction, counters live in the upper half.
BLOCK16_NAME = "iblk16"
BLOCK8_NAME = "iblk8"


def block_aggregate_fields(mode: LayoutMode) -> tuple[TypeExpr, ...]:
    return (IntType(64), IntType(64)) if mode.block_size == 16 else (IntType(32), IntType(32))


def block_name(mode: LayoutMode) -> str:
    return BLOCK16_NAME if mode.block_size == 16 else BLOCK8_NAME


def interleave_type(ty: TypeExpr, mode: LayoutMode, aggregates: Aggregates,
                    new_defs: dict[str, tuple[TypeExpr, ...]]) -> TypeExpr:
    """Structural interleaved counterpart of ``ty``.

    Primitives become one block aggregate (or a two-block array when split
    under Dmp8); arrays and aggregates map recursively.  Definitions for the
    block aggregate and for interleaved named aggregates ("Name__il") are
    accumulated into ``new_defs``.
    """
    blk = NamedType(block_name(mode))
    new_defs.setdefault(blk.name, block_aggregate_fields(mode))
    if is_primitive(ty):
        if size_of(ty, aggregates) > mode.data_capacity:
            return ArrayType(blk, 2)
        return blk
    if isinstance(ty, ArrayType):
        return ArrayType(interleave_type(ty.element, mode, aggregates, new_defs), ty.count)
    il_name = f"{ty.name}__il"
    if il_name not in new_defs:
        new_defs[il_name] = ()  # reserve against self-reference while recursing
        new_defs[il_name] = tuple(
            interleave_type(f, mode, aggregates, new_defs) for f in aggregates[ty.name]
        )
    return NamedType(il_name)


def relayout_init(data: bytes | None, ty: TypeExpr, mode: LayoutMode,
                  aggregates: Aggregates) -> bytes | None:
    """Spread an initializer's bytes over the interleaved layout.

    Counter fields are the compile-time constant 0; the first store
    overwrites them with the live counter.  Dmp8 guards carry the 0xFF
    top byte even at rest, so small-mode initializers are always
    materialized as explicit bytes.
    """
    plan = plan_layout(ty, mode, aggregates)
    if data is None:
        if mode.block_size == 16:
            return None  # zeroinit already has counter 0 everywhere
        data = bytes(size_of(ty, aggregates))
    out = bytearray(plan.interleaved_size)
    offset = 0
    guard0 = guard_value(0).to_bytes(4, "little")
    for path, leaf in leaves_of(ty, aggregates):
        width = size_of(leaf, aggregates)
        if width <= mode.data_capacity:
            dst, w = translate_access(plan, path)
            out[dst:dst + w] = data[offset:offset + w]
            if mode.block_size == 8:
                out[dst + 4:dst + 8] = guard0
        else:
            lo_dst, _ = translate_access(plan, (*path, "lo"))
            hi_dst, _ = translate_access(plan, (*path, "hi"))
            out[lo_dst:lo_dst + 4] = data[offset:offset + 4]
            out[hi_dst:hi_dst + 4] = data[offset + 4:offset + 8]
            out[lo_dst + 4:lo_dst + 8] = guard0
            out[hi_dst + 4:hi_dst + 8] = guard0
        offset += width
    return bytes(out)

"""Chunk-size and misaligned-allocation helpers for conflict-free lockstep access."""

from __future__ import annotations

from dataclasses import dataclass

from .. import isa


@dataclass(frozen=True)
class LayoutParams:
    s: int = 4        # element size in bytes
    w: int = 4        # word size
    n_cores: int = 16
    n_banks: int = 32

    def __post_init__(self):
        if self.s not in (1, 2, 4):
            raise ValueError(f"element size must be 1, 2 or 4 bytes, got {self.s}")


def min_chunk(s: int, p: LayoutParams = LayoutParams()) -> int:
    """Smallest per-core chunk (in elements) that keeps cores on distinct banks."""
    LayoutParams(s, p.w, p.n_cores, p.n_banks)
    return p.w // s


def max_chunk(s: int, p: LayoutParams = LayoutParams()) -> int:
    LayoutParams(s, p.w, p.n_cores, p.n_banks)
    return (p.n_banks // p.n_cores) * (p.w // s)


def sub_buffer_size(n: int, p: LayoutParams = LayoutParams()) -> int:
    if n < 1:
        raise ValueError("n must be at least 1 byte")
    stride = p.n_banks * p.w
    return -(-(n + p.n_cores * p.w) // stride) * stride


def misaligned_total(n: int, p: LayoutParams = LayoutParams()) -> int:
    """Bytes needed so that ``n_cores`` sub-buffers of ``n`` bytes start on distinct banks."""
    return p.n_cores * sub_buffer_size(n, p)


def misaligned_offset(core_id: int, n: int, p: LayoutParams = LayoutParams()) -> int:
    return core_id * sub_buffer_size(n, p) + core_id * p.w


def misaligned_padding(n: int, p: LayoutParams = LayoutParams()) -> int:
    """Round-up padding added to one sub-buffer beyond its data and bank shift."""
    return sub_buffer_size(n, p) - (n + p.n_cores * p.w)


class OutOfMemory(MemoryError):
    pass


class L1Allocator:
    """Bump allocator over the TCDM with the misaligned variant used for per-core buffers."""

    def __init__(self, base=isa.TCDM_BASE, size=isa.TCDM_BYTES, p: LayoutParams = LayoutParams()):
        self.base = base
        self.size = size
        self.top = base
        self.p = p

    @property
    def used(self):
        return self.top - self.base

    def alloc(self, n: int, align: int = 4) -> int:
        start = -(-self.top // align) * align
        if n < 0 or start + n > self.base + self.size:
            raise OutOfMemory(f"cannot allocate {n} bytes ({self.base + self.size - self.top} free)")
        self.top = start + n
        return start

    def misaligned_alloc(self, n: int) -> int:
        """Base of a block whose per-core sub-buffers start on the bank equal to the core id."""
        stride = self.p.n_banks * self.p.w
        return self.alloc(misaligned_total(n, self.p), align=stride)

    def per_core_alloc(self, n: int, layout: str) -> list[int]:
        """Per-core buffer addresses for ``layout`` in {"packed", "aligned", "misaligned"}.

        ``packed`` places buffers back to back, ``aligned`` rounds each one up
        to a bank-row multiple (every core starts on bank 0), ``misaligned``
        applies the misaligned offsets.
        """
        nc = self.p.n_cores
        if layout == "misaligned":
            base = self.misaligned_alloc(n)
            return [base + misaligned_offset(c, n, self.p) for c in range(nc)]
        stride = self.p.n_banks * self.p.w
        if layout == "aligned":
            step = -(-n // stride) * stride
            base = self.alloc(step * nc, align=stride)
            return [base + c * step for c in range(nc)]
        if layout == "packed":
            step = -(-n // 4) * 4
            base = self.alloc(step * nc, align=stride)
            return [base + c * step for c in range(nc)]
        raise ValueError(f"unknown layout '{layout}'")

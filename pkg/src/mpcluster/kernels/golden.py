"""Scalar reference models for quantized matmul and convolution (HWC layout)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..simdmath import PRECISIONS, SignMode


@dataclass(frozen=True)
class ConvSpec:
    H: int                 # input height (before padding)
    W: int
    C_in: int
    C_out: int
    K: int = 3
    act_bits: int = 8
    wgt_bits: int = 8
    sign: SignMode = SignMode.SS
    pad: int = 0
    pixel_block: int = 2   # output pixels computed together in the inner loop

    def __post_init__(self):
        for name in ("H", "W", "C_in", "C_out", "K"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.act_bits not in PRECISIONS or self.wgt_bits not in PRECISIONS:
            raise ValueError("precisions must be 2, 4, 8 or 16 bits")
        if self.pixel_block not in (1, 2):
            raise ValueError("pixel_block must be 1 or 2")
        if self.Ho < 1 or self.Wo < 1:
            raise ValueError("filter larger than padded input")
        object.__setattr__(self, "sign", SignMode(self.sign))

    @property
    def Hp(self):
        return self.H + 2 * self.pad

    @property
    def Wp(self):
        return self.W + 2 * self.pad

    @property
    def Ho(self):
        return self.Hp - self.K + 1

    @property
    def Wo(self):
        return self.Wp - self.K + 1

    @property
    def pixels(self):
        return self.Ho * self.Wo

    @property
    def k_el(self):
        """Elements per im2col column."""
        return self.K * self.K * self.C_in

    @property
    def macs(self):
        return self.pixels * self.C_out * self.k_el

    @property
    def act_signed(self):
        # the wider operand is A; SS means both signed, US means A unsigned
        if self.act_bits >= self.wgt_bits:
            return self.sign == SignMode.SS
        return self.sign != SignMode.UU

    @property
    def wgt_signed(self):
        if self.act_bits >= self.wgt_bits:
            return self.sign != SignMode.UU
        return self.sign == SignMode.SS

    @property
    def name(self):
        return (f"conv_{self.H}x{self.W}x{self.C_in}_k{self.K}_co{self.C_out}"
                f"_a{self.act_bits}w{self.wgt_bits}{self.sign.name}")


def value_range(bits, signed):
    return (-(1 << (bits - 1)), (1 << (bits - 1)) - 1) if signed else (0, (1 << bits) - 1)


def random_tensors(spec: ConvSpec, rng: np.random.Generator):
    """Random input (H, W, C_in) and weights (C_out, K, K, C_in) within precision range."""
    lo, hi = value_range(spec.act_bits, spec.act_signed)
    x = rng.integers(lo, hi + 1, size=(spec.H, spec.W, spec.C_in), dtype=np.int64)
    lo, hi = value_range(spec.wgt_bits, spec.wgt_signed)
    w = rng.integers(lo, hi + 1, size=(spec.C_out, spec.K, spec.K, spec.C_in), dtype=np.int64)
    return x, w


def wrap32(a):
    a = np.asarray(a, dtype=np.int64)
    return ((a + (1 << 31)) % (1 << 32)) - (1 << 31)


def golden_matmul(acts, weights):
    """acts (P, K) x weights (C_out, K) -> (P, C_out) wrapping 32-bit accumulators."""
    acts = [[int(v) for v in row] for row in np.asarray(acts)]
    weights = [[int(v) for v in row] for row in np.asarray(weights)]
    if acts and weights and len(acts[0]) != len(weights[0]):
        raise ValueError("inner dimensions differ")
    out = [[sum(a * b for a, b in zip(ar, wr)) for wr in weights] for ar in acts]
    return wrap32(np.array(out, dtype=object).astype(np.int64) if out else np.zeros((0, 0)))


def pad_input(x, pad):
    if pad == 0:
        return np.asarray(x)
    return np.pad(np.asarray(x), ((pad, pad), (pad, pad), (0, 0)))


def im2col_ref(x, spec: ConvSpec):
    """(P, K*K*C_in) matrix; column order kh, kw, c (HWC receptive fields)."""
    x = np.asarray(x)
    if x.shape != (spec.H, spec.W, spec.C_in):
        raise ValueError(f"input shape {x.shape} does not match {spec.name}")
    xp = pad_input(x, spec.pad)
    rows = []
    for oh in range(spec.Ho):
        for ow in range(spec.Wo):
            rows.append(xp[oh:oh + spec.K, ow:ow + spec.K, :].reshape(-1))
    return np.array(rows, dtype=np.int64)


def golden_conv2d(x, w, spec: ConvSpec):
    """Direct convolution -> (Ho, Wo, C_out), independent of the im2col path."""
    x = np.asarray(x)
    w = np.asarray(w)
    if w.shape != (spec.C_out, spec.K, spec.K, spec.C_in):
        raise ValueError(f"weight shape {w.shape} does not match {spec.name}")
    if x.shape != (spec.H, spec.W, spec.C_in):
        raise ValueError(f"input shape {x.shape} does not match {spec.name}")
    xp = pad_input(x, spec.pad).astype(np.int64)
    out = np.zeros((spec.Ho, spec.Wo, spec.C_out), dtype=np.int64)
    for kh in range(spec.K):
        for kw in range(spec.K):
            patch = xp[kh:kh + spec.Ho, kw:kw + spec.Wo, :]          # (Ho, Wo, C_in)
            out += np.einsum("hwc,oc->hwo", patch, w[:, kh, kw, :])
    return wrap32(out)

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Sequence, Tuple

MASK32 = 0xFFFFFFFF
Q15_ONE = 1 << 15
Q15_MAX = 0x7FFF
Q15_MIN = -0x8000
Q20_SHIFT = 20
S32_MAX = 0x7FFFFFFF
S32_MIN = -0x80000000


def s16(v: int) -> int:
    v &= 0xFFFF
    return v - 0x10000 if v & 0x8000 else v


def s32(v: int) -> int:
    v &= MASK32
    return v - 0x100000000 if v & 0x80000000 else v


def u32(v: int) -> int:
    return v & MASK32


def sat16(v: int) -> int:
    return Q15_MAX if v > Q15_MAX else Q15_MIN if v < Q15_MIN else v


def sat32(v: int) -> int:
    return S32_MAX if v > S32_MAX else S32_MIN if v < S32_MIN else v


def pack(re: int, im: int) -> int:
    """Complex Q1.15 in one word: real part in the low half."""
    return (re & 0xFFFF) | (im & 0xFFFF) << 16


def unpack(word: int) -> Tuple[int, int]:
    return s16(word), s16(word >> 16)


def round_shift(v: int, shift: int) -> int:
    return (v + (1 << (shift - 1))) >> shift


def to_q15(x: float) -> int:
    return sat16(int(math.floor(x * Q15_ONE + 0.5)))


def pack_complex(z: complex) -> int:
    return pack(to_q15(z.real), to_q15(z.imag))


def unpack_complex(word: int) -> complex:
    re, im = unpack(word)
    return complex(re, im) / Q15_ONE


def to_q20(x: float) -> int:
    return u32(sat32(int(math.floor(x * (1 << Q20_SHIFT) + 0.5))))


def from_q20(word: int) -> float:
    return s32(word) / (1 << Q20_SHIFT)


# ---- complex Q15 -----------------------------------------------------------

def cmul_q15(x: int, w: int) -> int:
    xr, xi = unpack(x)
    wr, wi = unpack(w)
    return pack(sat16(round_shift(xr * wr - xi * wi, 15)), sat16(round_shift(xr * wi + xi * wr, 15)))


def cmulc_q15(y: int, p: int) -> int:
    """y * conj(p)."""
    yr, yi = unpack(y)
    pr, pi = unpack(p)
    return pack(sat16(round_shift(yr * pr + yi * pi, 15)), sat16(round_shift(yi * pr - yr * pi, 15)))


def _rot_neg_j(re: int, im: int, k: int) -> Tuple[int, int]:
    """(re + j im) * (-j)^k."""
    k &= 3
    if k == 0:
        return re, im
    if k == 1:
        return im, -re
    if k == 2:
        return -re, -im
    return -im, re


def radix4_output(t: Sequence[int], u: int) -> int:
    """Output u of a radix-4 butterfly over twiddled inputs, halved with rounding."""
    acc_r = acc_i = 0
    for m in range(4):
        re, im = _rot_neg_j(*unpack(t[m]), u * m)
        acc_r += re
        acc_i += im
    return pack(sat16((acc_r + 1) >> 1), sat16((acc_i + 1) >> 1))


def radix2_output(a: int, b: int, u: int) -> int:
    ar, ai = unpack(a)
    br, bi = unpack(b)
    if u:
        br, bi = -br, -bi
    return pack(sat16((ar + br + 1) >> 1), sat16((ai + bi + 1) >> 1))


def cmac_re(acc: int, w: int, y: int) -> int:
    wr, wi = unpack(w)
    yr, yi = unpack(y)
    return u32(s32(acc) + wr * yr - wi * yi)


def cmac_im(acc: int, w: int, y: int) -> int:
    wr, wi = unpack(w)
    yr, yi = unpack(y)
    return u32(s32(acc) + wr * yi + wi * yr)


def cmac_pack(acc_re: int, acc_im: int, w: int, y: int) -> int:
    """Last multiply-accumulate of a dot product, rounded once back to Q15."""
    wr, wi = unpack(w)
    yr, yi = unpack(y)
    re = s32(acc_re) + wr * yr - wi * yi
    im = s32(acc_im) + wr * yi + wi * yr
    return pack(sat16(round_shift(re, 15)), sat16(round_shift(im, 15)))


# ---- Q11.20 scalar ---------------------------------------------------------

def _conj_product(a: int, b: int) -> Tuple[int, int]:
    """conj(a) * b for packed Q15 operands, in Q30."""
    ar, ai = unpack(a)
    br, bi = unpack(b)
    return ar * br + ai * bi, ar * bi - ai * br


def cmacc_re(acc: int, a: int, b: int) -> int:
    re, _ = _conj_product(a, b)
    return u32(sat32(s32(acc) + round_shift(re, 10)))


def cmacc_im(acc: int, a: int, b: int) -> int:
    _, im = _conj_product(a, b)
    return u32(sat32(s32(acc) + round_shift(im, 10)))


def _qcms_product(ar: int, ai: int, br: int, bi: int, flags: int) -> Tuple[int, int]:
    ar, ai, br, bi = s32(ar), s32(ai), s32(br), s32(bi)
    if flags & 1:
        ai = -ai
    if flags & 2:
        bi = -bi
    return ar * br - ai * bi, ar * bi + ai * br


def qcms_re(s: int, ar: int, ai: int, br: int, bi: int, flags: int) -> int:
    """s - Re(op(a) * op(b)); flags bit0 conjugates a, bit1 conjugates b."""
    re, _ = _qcms_product(ar, ai, br, bi, flags)
    return u32(sat32(s32(s) - round_shift(re, Q20_SHIFT)))


def qcms_im(s: int, ar: int, ai: int, br: int, bi: int, flags: int) -> int:
    _, im = _qcms_product(ar, ai, br, bi, flags)
    return u32(sat32(s32(s) - round_shift(im, Q20_SHIFT)))


def qmul(a: int, b: int) -> int:
    return u32(sat32(round_shift(s32(a) * s32(b), Q20_SHIFT)))


def qsqrt(d: int) -> int:
    d = s32(d)
    if d <= 0:
        return 0
    return u32(math.isqrt(d << Q20_SHIFT))


def qrecip(value: int) -> int:
    value = s32(value)
    if value <= 0:
        return S32_MAX
    return u32(sat32(((1 << 40) + value // 2) // value))


def pd_flag(flag: int, d: int) -> int:
    return flag | (1 if s32(d) <= 0 else 0)


# ---- op table --------------------------------------------------------------

@dataclass(frozen=True)
class AluOp:
    name: str
    fn: Callable[..., int]
    arity: int
    ops: int = 1
    latency: int = 1
    uses_imm: bool = False


def _li(imm: int) -> int:
    return u32(imm)


def _add(a: int, b: int) -> int:
    return u32(a + b)


def _addi(a: int, imm: int) -> int:
    return u32(a + imm)


def _sub(a: int, b: int) -> int:
    return u32(a - b)


def _mov(a: int) -> int:
    return a


def _cmul_tw(x: int, w: int, unit: int) -> int:
    return x if unit else cmul_q15(x, w)


def _r4(t0: int, t1: int, t2: int, t3: int, u: int) -> int:
    return radix4_output((t0, t1, t2, t3), u)


def _qcms_re(s: int, ar: int, ai: int, br: int, bi: int, flags: int) -> int:
    return qcms_re(s, ar, ai, br, bi, flags)


def _qcms_im(s: int, ar: int, ai: int, br: int, bi: int, flags: int) -> int:
    return qcms_im(s, ar, ai, br, bi, flags)


ALU_OPS: Dict[str, AluOp] = {
    op.name: op
    for op in (
        AluOp("li", _li, 0, uses_imm=True),
        AluOp("add", _add, 2),
        AluOp("addi", _addi, 1, uses_imm=True),
        AluOp("sub", _sub, 2),
        AluOp("mov", _mov, 1),
        AluOp("nop", lambda: 0, 0),
        AluOp("cmul_q15", _cmul_tw, 2, ops=6, uses_imm=True),
        AluOp("fft_r4_out", _r4, 4, ops=4, uses_imm=True),
        AluOp("fft_r2_out", radix2_output, 2, ops=2, uses_imm=True),
        AluOp("cmac_re", cmac_re, 3, ops=4),
        AluOp("cmac_im", cmac_im, 3, ops=4),
        AluOp("cmac_pack", cmac_pack, 4, ops=8),
        AluOp("cmulc", cmulc_q15, 2, ops=6),
        AluOp("cmacc_re", cmacc_re, 3, ops=4),
        AluOp("cmacc_im", cmacc_im, 3, ops=4),
        AluOp("qcms_re", _qcms_re, 5, ops=4, uses_imm=True),
        AluOp("qcms_im", _qcms_im, 5, ops=4, uses_imm=True),
        AluOp("qmul", qmul, 2),
        AluOp("qsqrt", qsqrt, 1, latency=3),
        AluOp("qrecip", qrecip, 1, latency=3),
        AluOp("pd_flag", pd_flag, 2),
    )
}


def evaluate(name: str, srcs: Sequence[int], imm: int = 0) -> int:
    op = ALU_OPS[name]
    if op.uses_imm:
        return op.fn(*srcs, imm)
    return op.fn(*srcs)

"""Analytic memory and compute cost of a quantized convolution layer."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Sequence

from .errors import ConfigError
from .tensor import num_blocks


def _positive(**kw) -> None:
    for k, v in kw.items():
        if int(v) != v or v < 1:
            raise ConfigError(f"{k} must be a positive integer, got {v}")


def memory_saving_exact(c_in: int, B: int, b: int) -> Fraction:
    _positive(C_i=c_in, B=B, b=b)
    return Fraction(b, 32) + Fraction(num_blocks(c_in, B), c_in)


def memory_saving(c_in: int, B: int, b: int) -> float:
    """Fraction of FP32 weight storage kept: ``b/32 + ceil(C_i/B)/C_i``."""
    return float(memory_saving_exact(c_in, B, b))


def speed_ratio_exact(c_in: int, B: int, eta=0) -> Fraction:
    _positive(C_i=c_in, B=B)
    eta = Fraction(eta)
    if eta < 0:
        raise ConfigError(f"eta must be >= 0, got {eta}")
    if c_in % B == 0:
        return (1 - Fraction(1, B)) / (1 + eta)
    return Fraction(c_in - num_blocks(c_in, B), c_in * (1 + eta))


def speed_ratio_threshold(c_in: int, B: int, eta: float = 0.0) -> float:
    """Largest ``T_int / T_FP`` for which the block path beats FP32 convolution.

    Uses ``(1 - 1/B) / (1 + eta)`` when B divides C_i and the general
    ``(C_i - ceil(C_i/B)) / (C_i (1 + eta))`` otherwise; the two agree
    whenever both apply.
    """
    return float(speed_ratio_exact(c_in, B, eta))


def mac_counts(weight_shape: Sequence[int], B: int,
               out_hw: Sequence[int] = (1, 1)) -> tuple[int, int]:
    """(fp_macs, int_macs) for a full layer evaluation.

    Per filter and output pixel there are ``C_i*K_h*K_w`` integer MACs and
    ``ceil(C_i/B)*K_h*K_w`` floating point ones.
    """
    c_out, c_in, kh, kw = (int(v) for v in weight_shape)
    _positive(C_o=c_out, C_i=c_in, K_h=kh, K_w=kw, B=B)
    positions = c_out * int(out_hw[0]) * int(out_hw[1])
    return positions * num_blocks(c_in, B) * kh * kw, positions * c_in * kh * kw


def max_speedup(c_in: int, B: int) -> int:
    _positive(C_i=c_in, B=B)
    return min(c_in, B)


def _decimal(x) -> Decimal:
    x = Fraction(x)
    return Decimal(x.numerator) / Decimal(x.denominator)


def round_half_up(x, places: int) -> Decimal:
    """Decimal rounding with ties away from zero, as printed tables do."""
    return _decimal(x).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


def round_sig(x, digits: int = 3) -> Decimal:
    d = _decimal(x)
    if d == 0:
        return d
    return round_half_up(x, digits - 1 - d.adjusted())


def format_percent(p) -> str:
    """Render a ratio as a percentage to 3 significant figures."""
    return f"{round_sig(Fraction(p) * 100, 3)}%"


def format_ratio(r) -> str:
    return str(round_half_up(Fraction(r), 3))


@dataclass(frozen=True)
class CostReport:
    memory_saving_ratio: float
    fp_macs: int
    int_macs: int
    speed_ratio_threshold: float
    eta: float
    max_speedup: int
    fp_macs_per_filter_position: int
    int_macs_per_filter_position: int

    def as_dict(self) -> dict:
        return asdict(self)


def cost_report(weight_shape: Sequence[int], B: int, b: int,
                out_hw: Sequence[int] = (1, 1), eta: float = 0.0) -> CostReport:
    c_out, c_in, kh, kw = (int(v) for v in weight_shape)
    fp_macs, int_macs = mac_counts(weight_shape, B, out_hw)
    per_fp, per_int = mac_counts((1, c_in, kh, kw), B)
    return CostReport(
        memory_saving_ratio=memory_saving(c_in, B, b),
        fp_macs=fp_macs,
        int_macs=int_macs,
        speed_ratio_threshold=speed_ratio_threshold(c_in, B, eta),
        eta=float(eta),
        max_speedup=max_speedup(c_in, B),
        fp_macs_per_filter_position=per_fp,
        int_macs_per_filter_position=per_int,
    )

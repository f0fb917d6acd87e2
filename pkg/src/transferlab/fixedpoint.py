"""Fixed-point formats and the saturating round-to-nearest-even quantiser."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["FixedPointFormat", "quantise_value", "quantise_array", "on_grid", "default_integer_bits"]


def default_integer_bits(bitwidth: int) -> int:
    """Integer bits (sign included) used for a given total bitwidth: 1 at 4, 2 at 8, 4 otherwise."""
    if bitwidth == 4:
        return 1
    if bitwidth == 8:
        return 2
    return 4


@dataclass(frozen=True)
class FixedPointFormat:
    """Signed fixed point with ``bitwidth`` bits of which ``integer_bits`` sit left of the point."""

    bitwidth: int
    integer_bits: int

    def __post_init__(self):
        if self.bitwidth < 2:
            raise ValueError(f"bitwidth must be >= 2, got {self.bitwidth}")
        if not 1 <= self.integer_bits <= self.bitwidth:
            raise ValueError(f"integer_bits must lie in [1, {self.bitwidth}], got {self.integer_bits}")

    @classmethod
    def for_bitwidth(cls, bitwidth: int) -> FixedPointFormat:
        return cls(bitwidth, default_integer_bits(bitwidth))

    @property
    def fraction_bits(self) -> int:
        return self.bitwidth - self.integer_bits

    @property
    def step(self) -> float:
        return 2.0 ** -self.fraction_bits

    @property
    def k_min(self) -> int:
        return -(2 ** (self.bitwidth - 1))

    @property
    def k_max(self) -> int:
        return 2 ** (self.bitwidth - 1) - 1

    @property
    def min_value(self) -> float:
        return self.k_min * self.step

    @property
    def max_value(self) -> float:
        return self.k_max * self.step

    def grid(self) -> np.ndarray:
        """Every representable value, ascending.  Only sensible for small bitwidths."""
        if self.bitwidth > 16:
            raise ValueError("grid enumeration is limited to bitwidth <= 16")
        return np.arange(self.k_min, self.k_max + 1, dtype=np.float64) * self.step

    def __str__(self) -> str:
        return f"Q{self.integer_bits}.{self.fraction_bits}"


def quantise_array(x, fmt: FixedPointFormat) -> np.ndarray:
    """Round onto ``fmt``'s grid (ties to even) and saturate; keeps the input's float dtype."""
    arr = np.asarray(x)
    dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.dtype(np.float32)
    scale = 2.0 ** fmt.fraction_bits
    k = np.clip(np.rint(arr.astype(np.float64) * scale), fmt.k_min, fmt.k_max)
    out = (k / scale).astype(dtype)
    if dtype == np.float32:
        # Wide formats: the top grid point can round up past max_value in float32.
        hi = np.float32(fmt.max_value)
        if float(hi) > fmt.max_value:
            hi = np.nextafter(hi, np.float32(0))
            out = np.minimum(out, hi)
    return out


def quantise_value(x: float, fmt: FixedPointFormat) -> float:
    return float(quantise_array(np.float64(x), fmt))


def on_grid(x, fmt: FixedPointFormat) -> np.ndarray:
    """Elementwise: is ``x * 2**f`` an integer within the format's code range?"""
    k = np.asarray(x, dtype=np.float64) * 2.0 ** fmt.fraction_bits
    return (k == np.round(k)) & (k >= fmt.k_min) & (k <= fmt.k_max)

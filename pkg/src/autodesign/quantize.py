"""Symmetric linear quantizer used by quantization-aware training and HAQ."""

import numpy as np

from .errors import InputError

MIN_BITS = 1
MAX_BITS = 8


def check_bits(bits):
    if isinstance(bits, bool) or int(bits) != bits or not MIN_BITS <= bits <= MAX_BITS:
        raise InputError(f"bitwidth must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits!r}")
    return int(bits)


def quant_levels(bits):
    """Largest representable magnitude index, 2^(bits-1) - 1 (0 for binary)."""
    return 2 ** (bits - 1) - 1


def quant_scale(x, bits):
    """Grid spacing s for tensor `x`. The 1-bit grid {-m, +m} has spacing 2m."""
    m = float(np.max(np.abs(x))) if np.size(x) else 0.0
    if check_bits(bits) == 1:
        return 2 * m
    return m / quant_levels(bits)


def linear_quantize(x, bits):
    """Quantize `x` onto a symmetric uniform grid spanning [-max|x|, max|x|].

    1-bit quantization is binarization: sign(x) * max|x|. All-zero input is
    returned unchanged. The extreme grid points are pinned to exactly
    +-max|x| so that quantizing an already-quantized tensor is a no-op.
    """
    bits = check_bits(bits)
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InputError("cannot quantize non-finite values")
    m = float(np.max(np.abs(x))) if x.size else 0.0
    if m == 0.0:
        return x.copy()
    if bits == 1:
        return np.sign(x) * m
    qmax = quant_levels(bits)
    s = m / qmax
    n = np.clip(np.rint(x / s), -qmax, qmax)
    out = n * s
    top = np.abs(n) == qmax
    out[top] = np.sign(n[top]) * m
    return out

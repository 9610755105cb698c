"""Small dense Hermitian matrices stored as split real/imaginary parts."""

from __future__ import annotations

import numpy as np


def hermitize(re: np.ndarray, im: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mirror the upper triangle of ``(..., n, n)`` arrays onto the lower one.

    The diagonal keeps its real part and gets a zero imaginary part, so the
    result is Hermitian bit for bit.
    """
    n = re.shape[-1]
    re = np.array(re, dtype=np.float64, copy=True)
    im = np.array(im, dtype=np.float64, copy=True)
    for a in range(n):
        im[..., a, a] = 0.0
        for b in range(a + 1, n):
            re[..., b, a] = re[..., a, b]
            im[..., b, a] = -im[..., a, b]
    return re, im


class HermitianMatrix:
    """An ``n x n`` Hermitian matrix; only the upper triangle is authoritative."""

    __slots__ = ("re", "im")

    def __init__(self, re, im=None):
        re = np.asarray(re, dtype=np.float64)
        im = np.zeros_like(re) if im is None else np.asarray(im, dtype=np.float64)
        if re.ndim != 2 or re.shape[0] != re.shape[1] or im.shape != re.shape:
            raise ValueError(f"expected square matrices, got {re.shape} and {im.shape}")
        self.re, self.im = hermitize(re, im)

    @classmethod
    def from_complex(cls, m) -> "HermitianMatrix":
        m = np.asarray(m, dtype=np.complex128)
        return cls(m.real, m.imag)

    @classmethod
    def zeros(cls, n: int) -> "HermitianMatrix":
        return cls(np.zeros((n, n)))

    @property
    def n(self) -> int:
        return self.re.shape[0]

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def conj(self) -> "HermitianMatrix":
        return HermitianMatrix(self.re, -self.im)

    def __add__(self, other: "HermitianMatrix") -> "HermitianMatrix":
        return HermitianMatrix(self.re + other.re, self.im + other.im)

    def __sub__(self, other: "HermitianMatrix") -> "HermitianMatrix":
        return HermitianMatrix(self.re - other.re, self.im - other.im)

    def __neg__(self) -> "HermitianMatrix":
        return HermitianMatrix(-self.re, -self.im)

    def __mul__(self, scalar: float) -> "HermitianMatrix":
        return HermitianMatrix(self.re * scalar, self.im * scalar)

    __rmul__ = __mul__

    def __truediv__(self, scalar: float) -> "HermitianMatrix":
        return HermitianMatrix(self.re / scalar, self.im / scalar)

    def __eq__(self, other) -> bool:
        if not isinstance(other, HermitianMatrix):
            return NotImplemented
        return np.array_equal(self.re, other.re) and np.array_equal(self.im, other.im)

    def allclose(self, other: "HermitianMatrix", **kw) -> bool:
        return np.allclose(self.to_complex(), other.to_complex(), **kw)

    def __repr__(self) -> str:
        return f"HermitianMatrix({self.to_complex()!r})"

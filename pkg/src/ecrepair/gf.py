"""Scalar and small-matrix arithmetic over GF(2^8).

Word size is fixed at 8 bits under the 0x11D reduction polynomial.  Matrices
here are tiny (at most n x k for a coding scheme) and live as tuples of
tuples of ints; the bulk per-byte work happens in :mod:`ecrepair.kernels`.
"""

from __future__ import annotations

from .kernels import EXP_TABLE, GF_POLY, INV_TABLE, LOG_TABLE, MUL_TABLE  # noqa: F401

Matrix = tuple[tuple[int, ...], ...]

WORD_BITS = 8


class SingularMatrixError(ValueError):
    """Raised when a matrix that must be invertible is not."""


def gf_add(a: int, b: int) -> int:
    return a ^ b


def gf_mul(a: int, b: int) -> int:
    return int(MUL_TABLE[a, b])


def gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("0 has no inverse in GF(256)")
    return int(INV_TABLE[a])


def gf_div(a: int, b: int) -> int:
    return gf_mul(a, gf_inv(b))


def gf_pow(a: int, e: int) -> int:
    if e == 0:
        return 1
    if a == 0:
        return 0
    return int(EXP_TABLE[(int(LOG_TABLE[a]) * e) % 255])


def identity(k: int) -> Matrix:
    return tuple(tuple(1 if i == j else 0 for j in range(k)) for i in range(k))


def mat_mul(a: Matrix, b: Matrix) -> Matrix:
    rows, inner, cols = len(a), len(b), len(b[0])
    out = [[0] * cols for _ in range(rows)]
    for i in range(rows):
        for m in range(inner):
            coef = a[i][m]
            if coef == 0:
                continue
            brow = b[m]
            orow = out[i]
            for j in range(cols):
                orow[j] ^= gf_mul(coef, brow[j])
    return tuple(tuple(row) for row in out)


def mat_vec(a: Matrix, v: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(
        _fold(row, v) for row in a
    )


def _fold(row: tuple[int, ...], v: tuple[int, ...]) -> int:
    acc = 0
    for coef, x in zip(row, v):
        if coef:
            acc ^= gf_mul(coef, x)
    return acc


def mat_inv(m: Matrix) -> Matrix:
    """Gauss-Jordan inversion; raises SingularMatrixError when rank-deficient."""
    size = len(m)
    a = [list(row) for row in m]
    inv = [list(row) for row in identity(size)]
    for col in range(size):
        pivot = next((r for r in range(col, size) if a[r][col]), None)
        if pivot is None:
            raise SingularMatrixError("matrix is singular over GF(256)")
        if pivot != col:
            a[col], a[pivot] = a[pivot], a[col]
            inv[col], inv[pivot] = inv[pivot], inv[col]
        scale = gf_inv(a[col][col])
        if scale != 1:
            a[col] = [gf_mul(scale, x) for x in a[col]]
            inv[col] = [gf_mul(scale, x) for x in inv[col]]
        for r in range(size):
            if r == col:
                continue
            factor = a[r][col]
            if factor == 0:
                continue
            arow, acol = a[r], a[col]
            irow, icol = inv[r], inv[col]
            for j in range(size):
                arow[j] ^= gf_mul(factor, acol[j])
                irow[j] ^= gf_mul(factor, icol[j])
    return tuple(tuple(row) for row in inv)


def systematic_rs_generator(n: int, k: int) -> Matrix:
    """Systematic n x k generator whose every k-row submatrix is invertible.

    Built by evaluating the k-term polynomial at n distinct field points
    (a Vandermonde matrix) and normalising the top k rows to the identity.
    Supports n <= 256; any k rows remain independent because they are a
    k-row Vandermonde slice times a fixed invertible matrix.
    """
    if not 0 < k < n:
        raise ValueError(f"need 0 < k < n, got n={n} k={k}")
    if n > 256:
        raise ValueError(f"GF(256) construction supports n <= 256, got n={n}")
    vand = tuple(tuple(gf_pow(x, j) for j in range(k)) for x in range(n))
    top_inv = mat_inv(vand[:k])
    gen = mat_mul(vand, top_inv)
    assert gen[:k] == identity(k)
    return gen

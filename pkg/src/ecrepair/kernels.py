"""GF(256) byte kernels: numba-compiled hot loops with a pure-numpy fallback.

Everything that touches whole blocks or slices funnels through the three
kernels below (single-coefficient multiply, multiply-accumulate, and matrix
apply).  The backend is picked once at import time:

    ECREPAIR_KERNELS=numba   force the jit path (ImportError if numba missing)
    ECREPAIR_KERNELS=numpy   force the table-lookup numpy path
    unset / auto             numba when importable, numpy otherwise

``benchmarks/bench_kernels.py`` compares the two paths.
"""

from __future__ import annotations

import os

import numpy as np

# Reduction polynomial x^8 + x^4 + x^3 + x^2 + 1.
GF_POLY = 0x11D
FIELD_SIZE = 256


def _build_tables() -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    exp = np.zeros(512, dtype=np.uint8)
    log = np.zeros(256, dtype=np.int64)
    x = 1
    for i in range(255):
        exp[i] = x
        log[x] = i
        x <<= 1
        if x & 0x100:
            x ^= GF_POLY
    exp[255:510] = exp[:255]
    mul = np.zeros((256, 256), dtype=np.uint8)
    for a in range(1, 256):
        mul[a, 1:] = exp[(log[a] + log[1:]) % 255]
    inv = np.zeros(256, dtype=np.uint8)
    inv[1:] = exp[255 - log[1:]]
    return exp, log, mul, inv


EXP_TABLE, LOG_TABLE, MUL_TABLE, INV_TABLE = _build_tables()


def _select_backend() -> str:
    choice = os.environ.get("ECREPAIR_KERNELS", "auto").lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(f"ECREPAIR_KERNELS must be numba|numpy|auto, got {choice!r}")
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise
        return "numpy"
    return "numba"


BACKEND = _select_backend()


# -- numpy fallback ----------------------------------------------------------

def _np_mul_into(out: np.ndarray, coef: int, src: np.ndarray) -> None:
    if coef == 0:
        out[:] = 0
    elif coef == 1:
        out[:] = src
    else:
        np.take(MUL_TABLE[coef], src, out=out)


def _np_xor_mul_into(acc: np.ndarray, coef: int, src: np.ndarray) -> None:
    if coef == 0:
        return
    if coef == 1:
        np.bitwise_xor(acc, src, out=acc)
    else:
        np.bitwise_xor(acc, MUL_TABLE[coef][src], out=acc)


def _np_matrix_apply(out: np.ndarray, coefs: np.ndarray, src: np.ndarray) -> None:
    out[:] = 0
    for i in range(coefs.shape[0]):
        for j in range(coefs.shape[1]):
            _np_xor_mul_into(out[i], int(coefs[i, j]), src[j])


# -- numba path --------------------------------------------------------------

if BACKEND == "numba":
    from numba import njit

    @njit(nogil=True, cache=True)
    def _nb_mul_into(out, coef, src, table):
        row = table[coef]
        for i in range(out.shape[0]):
            out[i] = row[src[i]]

    @njit(nogil=True, cache=True)
    def _nb_xor_mul_into(acc, coef, src, table):
        if coef == 0:
            return
        row = table[coef]
        for i in range(acc.shape[0]):
            acc[i] ^= row[src[i]]

    @njit(nogil=True, cache=True)
    def _nb_matrix_apply(out, coefs, src, table):
        out[:] = 0
        for i in range(coefs.shape[0]):
            for j in range(coefs.shape[1]):
                c = coefs[i, j]
                if c == 0:
                    continue
                row = table[c]
                acc = out[i]
                blk = src[j]
                for t in range(acc.shape[0]):
                    acc[t] ^= row[blk[t]]

    def mul_into(out: np.ndarray, coef: int, src: np.ndarray) -> None:
        _nb_mul_into(out, coef, src, MUL_TABLE)

    def xor_mul_into(acc: np.ndarray, coef: int, src: np.ndarray) -> None:
        _nb_xor_mul_into(acc, coef, src, MUL_TABLE)

    def matrix_apply(out: np.ndarray, coefs: np.ndarray, src: np.ndarray) -> None:
        _nb_matrix_apply(out, coefs, src, MUL_TABLE)

else:
    mul_into = _np_mul_into
    xor_mul_into = _np_xor_mul_into
    matrix_apply = _np_matrix_apply


def as_byte_array(data, *, writable: bool = False) -> np.ndarray:
    """View bytes-like data as a contiguous uint8 array (copy only if needed)."""
    if isinstance(data, np.ndarray):
        arr = data if data.dtype == np.uint8 else data.view(np.uint8)
    else:
        arr = np.frombuffer(data, dtype=np.uint8)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    if writable and not arr.flags.writeable:
        arr = arr.copy()
    return arr

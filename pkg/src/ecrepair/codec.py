"""Systematic Reed-Solomon codec over GF(256).

A stripe is n blocks coded from k data blocks, words at equal offsets encoded
together, so any byte range of a block can be reconstructed from the same
byte range of any k blocks.  Every repair scheme in this package reduces to
two operations defined here: solving for decoding coefficients and folding
``acc ^ coef * local`` slice by slice.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from . import gf
from .kernels import as_byte_array, matrix_apply, xor_mul_into


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class CodingScheme:
    """An (n, k) systematic RS code with its generator matrix.

    The top k generator rows are the identity; any k rows form an invertible
    matrix, so any k of the n coded blocks reconstruct the stripe.
    """

    n: int
    k: int
    w: int = 8
    generator: gf.Matrix = field(repr=False, default=())

    def __post_init__(self):
        if self.w != 8:
            raise CodecError("only w=8 words are supported")
        if not 0 < self.k < self.n:
            raise CodecError(f"need 0 < k < n, got n={self.n} k={self.k}")
        if self.n > (1 << self.w) + 1:
            raise CodecError(f"RS codes need n <= 2^w + 1, got n={self.n}")
        if not self.generator:
            object.__setattr__(self, "generator", gf.systematic_rs_generator(self.n, self.k))
        if len(self.generator) != self.n or any(len(r) != self.k for r in self.generator):
            raise CodecError("generator must be an n x k matrix")
        if self.generator[: self.k] != gf.identity(self.k):
            raise CodecError("generator is not systematic")

    @property
    def parity_count(self) -> int:
        return self.n - self.k

    def parity_rows(self) -> np.ndarray:
        return np.array(self.generator[self.k :], dtype=np.uint8)

    def rows_for(self, indices: Sequence[int]) -> gf.Matrix:
        return tuple(self.generator[i] for i in indices)


@lru_cache(maxsize=64)
def rs_scheme(n: int, k: int) -> CodingScheme:
    return CodingScheme(n=n, k=k)


@dataclass(frozen=True)
class Block:
    """A stored block: globally unique id plus its bytes."""

    id: str
    data: bytes


@dataclass(frozen=True)
class DecodingCoefficients:
    """Per-target linear combinations over an ordered helper set.

    ``rows[j][i]`` scales helper i's block in the combination that rebuilds
    ``targets[j]``; the fold is XOR-associative so helpers may apply their
    term in any hop order.
    """

    targets: tuple[int, ...]
    helpers: tuple[int, ...]
    rows: gf.Matrix

    def matrix(self) -> np.ndarray:
        return np.array(self.rows, dtype=np.uint8)

    def row_for(self, target: int) -> tuple[int, ...]:
        return self.rows[self.targets.index(target)]


def _stacked(blocks: Sequence, length: int | None = None) -> np.ndarray:
    arrays = [as_byte_array(b) for b in blocks]
    sizes = {a.shape[0] for a in arrays}
    if len(sizes) != 1:
        raise CodecError(f"blocks have mismatched lengths: {sorted(sizes)}")
    if length is not None and sizes != {length}:
        raise CodecError(f"expected blocks of {length} bytes, got {sizes.pop()}")
    return np.stack(arrays)


def encode_stripe(scheme: CodingScheme, data_blocks: Sequence) -> list[np.ndarray]:
    """Encode k equal-length data blocks into the full stripe of n blocks.

    The first k outputs are the inputs themselves (views, not copies).
    """
    if len(data_blocks) != scheme.k:
        raise CodecError(f"need exactly k={scheme.k} data blocks, got {len(data_blocks)}")
    stacked = _stacked(data_blocks)
    parity = np.empty((scheme.parity_count, stacked.shape[1]), dtype=np.uint8)
    matrix_apply(parity, scheme.parity_rows(), stacked)
    return [as_byte_array(b) for b in data_blocks] + list(parity)


def decoding_coefficients(
    scheme: CodingScheme, targets: Sequence[int], helpers: Sequence[int]
) -> DecodingCoefficients:
    """Solve for the coefficients that rebuild each target from the helpers.

    Inverts the k x k generator submatrix of the helper rows; for a valid MDS
    generator this cannot be singular, so a SingularMatrixError here means
    the scheme itself is malformed.
    """
    targets = tuple(targets)
    helpers = tuple(helpers)
    if len(helpers) != scheme.k:
        raise CodecError(f"need exactly k={scheme.k} helpers, got {len(helpers)}")
    if not targets:
        raise CodecError("need at least one target")
    overlap = set(targets) & set(helpers)
    if overlap:
        raise CodecError(f"targets and helpers overlap: {sorted(overlap)}")
    for idx in (*targets, *helpers):
        if not 0 <= idx < scheme.n:
            raise CodecError(f"block index {idx} outside stripe of width {scheme.n}")
    helper_rows = scheme.rows_for(helpers)
    inverse = gf.mat_inv(helper_rows)
    rows = gf.mat_mul(scheme.rows_for(targets), inverse)
    return DecodingCoefficients(targets=targets, helpers=helpers, rows=rows)


def combine(acc, local, coef: int) -> np.ndarray:
    """Return ``acc XOR coef * local`` elementwise (new buffer)."""
    acc = as_byte_array(acc)
    local = as_byte_array(local)
    if acc.shape != local.shape:
        raise CodecError(f"length mismatch: {acc.shape[0]} vs {local.shape[0]}")
    out = acc.copy()
    xor_mul_into(out, coef, local)
    return out


def combine_into(acc: np.ndarray, local: np.ndarray, coef: int) -> None:
    """In-place ``acc ^= coef * local`` for hot paths; lengths must match."""
    if acc.shape != local.shape:
        raise CodecError(f"length mismatch: {acc.shape[0]} vs {local.shape[0]}")
    xor_mul_into(acc, coef, local)


def reconstruct(
    scheme: CodingScheme,
    targets: Sequence[int],
    helpers: Sequence[int],
    helper_blocks: Sequence,
) -> list[np.ndarray]:
    """Rebuild the target blocks from k helper blocks in one matrix apply."""
    coeffs = decoding_coefficients(scheme, targets, helpers)
    stacked = _stacked(helper_blocks)
    out = np.empty((len(targets), stacked.shape[1]), dtype=np.uint8)
    matrix_apply(out, coeffs.matrix(), stacked)
    return list(out)


def decode_stripe(scheme: CodingScheme, available: Mapping[int, object]) -> list[np.ndarray]:
    """Recover the k data blocks from any k available blocks of the stripe."""
    if len(available) < scheme.k:
        raise CodecError(f"need k={scheme.k} blocks to decode, got {len(available)}")
    helpers = sorted(available)[: scheme.k]
    blocks = [available[i] for i in helpers]
    data: list[np.ndarray | None] = [None] * scheme.k
    missing = [i for i in range(scheme.k) if i not in set(helpers)]
    for idx, block in zip(helpers, blocks):
        if idx < scheme.k:
            data[idx] = as_byte_array(block)
    if missing:
        for idx, rebuilt in zip(missing, reconstruct(scheme, missing, helpers, blocks)):
            data[idx] = rebuilt
    return data  # type: ignore[return-value]

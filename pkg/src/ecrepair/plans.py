"""Repair plans: who sends which slice to whom, for each repair scheme.

A plan is an immutable description of one repair session.  Five schemes are
supported:

* ``conventional`` - all k helpers ship whole blocks to one dedicated
  requestor, which decodes every target locally and forwards the other
  reconstructed blocks.
* ``ppr`` - binary combining tree of partial sums over helpers plus the
  requestor, one block-level round per tree level.
* ``rp-basic`` - slices pipelined down the linear helper path to the
  requestor, successive slices overlapping on disjoint links.
* ``rp-cyclic`` - slices grouped by rotations of the helper cycle so the
  requestor reads from k-1 helpers in parallel.
* ``rp-multi`` - bundles of f same-offset slices pipelined down the path;
  the last helper fans the reconstructed slices out to the f requestors.

Plan builders validate structure; byte movement lives in
:mod:`ecrepair.execute` and timing analysis in :mod:`ecrepair.sim`.
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

from .codec import CodingScheme, decoding_coefficients
from .stripes import StripeMetadata

CONVENTIONAL = "conventional"
PPR = "ppr"
RP_BASIC = "rp-basic"
RP_CYCLIC = "rp-cyclic"
RP_MULTI = "rp-multi"

SCHEMES = (CONVENTIONAL, PPR, RP_BASIC, RP_CYCLIC, RP_MULTI)


class PlanError(ValueError):
    pass


class Endpoint(NamedTuple):
    """Where a reconstructed block is delivered.

    ``node`` is the transport-level identity; host/port are only needed by
    the socket transport and stay None in-process.
    """

    node: str
    host: str | None = None
    port: int | None = None


class HelperSlot(NamedTuple):
    node: str
    block_index: int
    block_id: str


@dataclass(frozen=True)
class SliceSpec:
    """Slice geometry: a block is ``per_block`` slices of ``slice_size`` bytes."""

    slice_size: int
    per_block: int

    def __post_init__(self):
        if self.slice_size < 1 or self.per_block < 1:
            raise PlanError(f"invalid slice spec {self.slice_size}x{self.per_block}")

    @property
    def block_size(self) -> int:
        return self.slice_size * self.per_block

    @classmethod
    def for_block(cls, block_size: int, slice_size: int) -> "SliceSpec":
        if block_size % slice_size:
            raise PlanError(f"block size {block_size} not a multiple of slice size {slice_size}")
        return cls(slice_size=slice_size, per_block=block_size // slice_size)


@dataclass(frozen=True)
class RepairPlan:
    scheme: str
    session: bytes
    stripe_id: str
    code: CodingScheme = field(repr=False)
    targets: tuple[int, ...]
    helpers: tuple[HelperSlot, ...]
    coefficients: tuple[tuple[int, ...], ...]
    requestors: tuple[Endpoint, ...]
    slices: SliceSpec

    @property
    def k(self) -> int:
        return len(self.helpers)

    @property
    def fail_count(self) -> int:
        return len(self.targets)

    def helper_nodes(self) -> tuple[str, ...]:
        return tuple(slot.node for slot in self.helpers)

    # -- cyclic geometry ----------------------------------------------------

    def rotation_of(self, slice_index: int) -> int:
        """Rotation (starting-helper position) handling this slice."""
        return slice_index % (self.k - 1)

    def cyclic_role(self, position: int, slice_index: int) -> tuple[str, int]:
        """(role, hop_position) of the helper at ``position`` for one slice.

        hop_position counts 0 for the originator through k-1 for the helper
        that delivers the combined slice to the requestor.
        """
        rotation = self.rotation_of(slice_index)
        offset = (position - rotation) % self.k
        if offset == 0:
            return "originate", 0
        if offset == self.k - 1:
            return "deliver", offset
        return "forward", offset

    # -- ppr geometry ---------------------------------------------------------

    def ppr_edges(self) -> list[tuple[int, int, int]]:
        return ppr_tree_edges(self.k)

    def to_wire(self) -> dict:
        return {
            "scheme": self.scheme,
            "session": self.session.hex(),
            "stripe_id": self.stripe_id,
            "code": {"n": self.code.n, "k": self.code.k},
            "targets": list(self.targets),
            "helpers": [list(slot) for slot in self.helpers],
            "coefficients": [list(row) for row in self.coefficients],
            "requestors": [list(ep) for ep in self.requestors],
            "slice_size": self.slices.slice_size,
            "slices_per_block": self.slices.per_block,
        }

    @classmethod
    def from_wire(cls, doc: dict) -> "RepairPlan":
        from .codec import rs_scheme

        return cls(
            scheme=doc["scheme"],
            session=bytes.fromhex(doc["session"]),
            stripe_id=doc["stripe_id"],
            code=rs_scheme(doc["code"]["n"], doc["code"]["k"]),
            targets=tuple(doc["targets"]),
            helpers=tuple(HelperSlot(*slot) for slot in doc["helpers"]),
            coefficients=tuple(tuple(row) for row in doc["coefficients"]),
            requestors=tuple(Endpoint(*ep) for ep in doc["requestors"]),
            slices=SliceSpec(doc["slice_size"], doc["slices_per_block"]),
        )


def ppr_tree_edges(k: int) -> list[tuple[int, int, int]]:
    """Combining-tree sends as (source_position, dest_position, round).

    Positions 0..k-1 are helpers in path order; position k is the requestor.
    Strides double each round; a send past the end folds into the requestor.
    The number of rounds is ceil(log2(k + 1)).
    """
    edges = []
    stride = 1
    rounds = 0
    while stride <= k:
        rounds += 1
        sender = stride - 1
        while sender < k:
            edges.append((sender, min(sender + stride, k), rounds))
            sender += 2 * stride
        stride *= 2
    return edges


def new_session() -> bytes:
    return uuid.uuid4().bytes


def _resolve_helpers(stripe: StripeMetadata, path: Sequence[str]) -> tuple[HelperSlot, ...]:
    placement = stripe.node_to_index()
    slots = []
    for node in path:
        if node not in placement:
            raise PlanError(f"node {node} holds no block of stripe {stripe.stripe_id}")
        index = placement[node]
        slots.append(
            HelperSlot(node=node, block_index=index, block_id=stripe.block_at(index))
        )
    return tuple(slots)


def _base_checks(
    stripe: StripeMetadata,
    code: CodingScheme,
    targets: Sequence[int],
    path: Sequence[str],
    requestors: Sequence[Endpoint],
) -> tuple[HelperSlot, ...]:
    target_set = set(targets)
    if not target_set:
        raise PlanError("no repair targets")
    if len(target_set) != len(targets):
        raise PlanError("duplicate repair targets")
    if len(targets) > code.n - code.k:
        raise PlanError(
            f"{len(targets)} failures exceed the n-k={code.n - code.k} tolerance; stripe unrecoverable"
        )
    if len(path) != code.k:
        raise PlanError(f"path must list exactly k={code.k} helpers, got {len(path)}")
    if len(set(path)) != len(path):
        raise PlanError("helper path contains duplicate nodes")
    slots = _resolve_helpers(stripe, path)
    if target_set & {slot.block_index for slot in slots}:
        raise PlanError("a target block appears on the helper path")
    if len(requestors) != len(targets):
        raise PlanError(f"need one requestor per target ({len(targets)}), got {len(requestors)}")
    requestor_nodes = [ep.node for ep in requestors]
    if len(set(requestor_nodes)) != len(requestor_nodes):
        raise PlanError("requestor nodes must be distinct")
    if set(requestor_nodes) & set(path):
        raise PlanError("a requestor node sits on the helper path")
    return slots


def _build(
    scheme: str,
    stripe: StripeMetadata,
    code: CodingScheme,
    targets: Sequence[int],
    path: Sequence[str],
    requestors: Sequence[Endpoint],
    spec: SliceSpec,
    session: bytes | None,
) -> RepairPlan:
    slots = _base_checks(stripe, code, targets, path, requestors)
    coeffs = decoding_coefficients(code, targets, [slot.block_index for slot in slots])
    return RepairPlan(
        scheme=scheme,
        session=session or new_session(),
        stripe_id=stripe.stripe_id,
        code=code,
        targets=tuple(targets),
        helpers=slots,
        coefficients=coeffs.rows,
        requestors=tuple(requestors),
        slices=spec,
    )


def plan_basic(
    stripe: StripeMetadata,
    target: int,
    path: Sequence[str],
    requestor: Endpoint,
    spec: SliceSpec,
    *,
    session: bytes | None = None,
) -> RepairPlan:
    """Linear path: slice t flows helper 1 -> ... -> helper k -> requestor."""
    code = stripe.code
    return _build(RP_BASIC, stripe, code, [target], path, [requestor], spec, session)


def plan_cyclic(
    stripe: StripeMetadata,
    target: int,
    helpers: Sequence[str],
    requestor: Endpoint,
    spec: SliceSpec,
    *,
    session: bytes | None = None,
) -> RepairPlan:
    """Rotated cyclic paths; the requestor reads from min(k-1, slices) helpers."""
    code = stripe.code
    if code.k < 2:
        raise PlanError("cyclic repair needs k >= 2")
    return _build(RP_CYCLIC, stripe, code, [target], helpers, [requestor], spec, session)


def plan_multiblock(
    stripe: StripeMetadata,
    targets: Sequence[int],
    path: Sequence[str],
    requestors: Sequence[Endpoint],
    spec: SliceSpec,
    *,
    session: bytes | None = None,
) -> RepairPlan:
    """Bundles of f same-offset slices down one path; one local read per helper."""
    code = stripe.code
    return _build(RP_MULTI, stripe, code, targets, path, requestors, spec, session)


def plan_conventional(
    stripe: StripeMetadata,
    targets: Sequence[int],
    helpers: Sequence[str],
    requestors: Sequence[Endpoint],
    spec: SliceSpec,
    *,
    session: bytes | None = None,
) -> RepairPlan:
    """Whole-block pulls into requestors[0], which decodes and forwards."""
    code = stripe.code
    return _build(CONVENTIONAL, stripe, code, targets, helpers, requestors, spec, session)


def plan_ppr(
    stripe: StripeMetadata,
    target: int,
    helpers: Sequence[str],
    requestor: Endpoint,
    spec: SliceSpec,
    *,
    session: bytes | None = None,
) -> RepairPlan:
    """Binary combining tree; single-block only (multi-block PPR is undefined)."""
    code = stripe.code
    return _build(PPR, stripe, code, [target], helpers, [requestor], spec, session)

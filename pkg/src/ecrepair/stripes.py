"""Stripe bookkeeping: which blocks form a stripe and where they live."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .codec import CodingScheme, rs_scheme


class StripeError(ValueError):
    pass


@dataclass(frozen=True)
class StripeMetadata:
    """One stripe: n block ids in generator-row order and their node placement."""

    stripe_id: str
    code: CodingScheme = field(repr=False)
    block_ids: tuple[str, ...]
    nodes: tuple[str, ...]

    def __post_init__(self):
        n = self.code.n
        if len(self.block_ids) != n:
            raise StripeError(f"stripe {self.stripe_id}: expected {n} block ids")
        if len(self.nodes) != n:
            raise StripeError(f"stripe {self.stripe_id}: expected {n} node placements")
        if len(set(self.block_ids)) != n:
            raise StripeError(f"stripe {self.stripe_id}: duplicate block ids")
        if len(set(self.nodes)) != n:
            raise StripeError(f"stripe {self.stripe_id}: blocks must sit on n distinct nodes")

    def node_to_index(self) -> dict[str, int]:
        return {node: i for i, node in enumerate(self.nodes)}

    def index_of_block(self, block_id: str) -> int:
        try:
            return self.block_ids.index(block_id)
        except ValueError:
            raise StripeError(f"block {block_id} not in stripe {self.stripe_id}") from None

    def node_of_index(self, index: int) -> str:
        return self.nodes[index]

    def block_at(self, index: int) -> str:
        return self.block_ids[index]

    def rack_counts(self, topology: Mapping[str, str]) -> dict[str, int]:
        counts: dict[str, int] = {}
        for node in self.nodes:
            rack = topology[node]
            counts[rack] = counts.get(rack, 0) + 1
        return counts

    def to_record(self) -> dict:
        return {
            "stripe_id": self.stripe_id,
            "scheme": {"name": "rs", "n": self.code.n, "k": self.code.k},
            "blocks": [[bid, node] for bid, node in zip(self.block_ids, self.nodes)],
        }

    @classmethod
    def from_record(cls, record: dict) -> "StripeMetadata":
        scheme = record["scheme"]
        blocks = record["blocks"]
        return cls(
            stripe_id=record["stripe_id"],
            code=rs_scheme(scheme["n"], scheme["k"]),
            block_ids=tuple(bid for bid, _ in blocks),
            nodes=tuple(node for _, node in blocks),
        )


def make_stripe(
    stripe_id: str, n: int, k: int, nodes: Sequence[str], block_ids: Sequence[str] | None = None
) -> StripeMetadata:
    """Convenience constructor with generated block ids."""
    if block_ids is None:
        block_ids = tuple(f"{stripe_id}.b{i}" for i in range(n))
    return StripeMetadata(
        stripe_id=stripe_id,
        code=rs_scheme(n, k),
        block_ids=tuple(block_ids),
        nodes=tuple(nodes),
    )

"""Helper selection and path construction for repair sessions.

Three concerns live here:

* spreading load across stripes: least-recently-selected helper choice via
  an expected-linear quickselect over selection timestamps;
* hierarchical topologies: a path that enters and leaves each rack at most
  once, consuming remote racks in descending helper-count order, which
  minimises cross-rack links;
* arbitrary heterogeneity: a pruned depth-first search for the helper
  ordering that minimises the maximum link weight (weight = inverse
  bandwidth), exploring a vanishing fraction of the permutation space.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence


class PathSelectionError(ValueError):
    pass


# -- greedy least-recently-selected helpers -----------------------------------


def _quickselect_smallest(keys: list[tuple], k: int) -> list[tuple]:
    """The k smallest keys via repeated partitioning, expected O(n)."""
    lo, hi = 0, len(keys)
    while hi - lo > 1:
        pivot = keys[(lo + hi) // 2]
        left, mid, right = [], [], []
        for key in keys[lo:hi]:
            if key < pivot:
                left.append(key)
            elif key > pivot:
                right.append(key)
            else:
                mid.append(key)
        keys[lo:hi] = left + mid + right
        if k <= lo + len(left):
            hi = lo + len(left)
        elif k >= lo + len(left) + len(mid):
            lo = lo + len(left) + len(mid)
        else:
            break
    return keys[:k]


class HelperTimestamps:
    """Last-selected counter per node; selection and update are one atomic step.

    Nodes never selected carry timestamp 0.  Ties break by ascending node id
    so selections are deterministic and reproducible.
    """

    def __init__(self):
        self._stamps: dict[str, int] = {}
        self._counter = 0
        self._lock = threading.Lock()

    def stamp(self, node: str) -> int:
        return self._stamps.get(node, 0)

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(self._stamps)

    def select(self, available: Iterable[str], k: int) -> list[str]:
        nodes = list(available)
        if len(nodes) < k:
            raise PathSelectionError(
                f"need {k} helpers but only {len(nodes)} available; stripe unrecoverable"
            )
        with self._lock:
            keys = [(self._stamps.get(node, 0), node) for node in nodes]
            chosen = sorted(_quickselect_smallest(keys, k))
            # Each selected node gets its own counter value (in least-recent
            # order), so repeated selections rotate through nodes strictly;
            # a shared per-round value would let low ids win every tie.
            for _, node in chosen:
                self._counter += 1
                self._stamps[node] = self._counter
            return [node for _, node in chosen]


def select_helpers_greedy(available: Iterable[str], ts: HelperTimestamps, k: int) -> list[str]:
    """k least-recently-selected nodes; updates their timestamps."""
    return ts.select(available, k)


# -- rack-aware path (hierarchical topologies) ---------------------------------


def rack_aware_path(
    topology: Mapping[str, str], requestor: str, available: Iterable[str], k: int
) -> list[str]:
    """Order k helpers so the path crosses as few rack boundaries as possible.

    Helpers sharing the requestor's rack go nearest the requestor; remote
    racks are consumed whole, largest first, so each rack has at most one
    cross-rack in-edge and one out-edge.  Returns the helpers in path order
    (first sender first); the requestor is appended by the caller.
    """
    nodes = sorted(set(available))
    if requestor in nodes:
        raise PathSelectionError("requestor cannot serve as its own helper")
    if len(nodes) < k:
        raise PathSelectionError(f"need {k} helpers, only {len(nodes)} available")
    if requestor not in topology:
        raise PathSelectionError(f"requestor {requestor} has no rack assignment")
    racks: dict[str, list[str]] = {}
    for node in nodes:
        if node not in topology:
            raise PathSelectionError(f"helper {node} has no rack assignment")
        racks.setdefault(topology[node], []).append(node)
    home = topology[requestor]
    order = [home] if home in racks else []
    remote = sorted(
        (rack for rack in racks if rack != home),
        key=lambda rack: (-len(racks[rack]), rack),
    )
    order.extend(remote)
    path: list[str] = []  # built back-to-front: first appended ends nearest R
    for rack in order:
        for node in racks[rack]:
            path.append(node)
            if len(path) == k:
                return path[::-1]
    raise AssertionError("unreachable: enough helpers were checked above")


def cross_rack_links(path: Sequence[str], requestor: str, topology: Mapping[str, str]) -> int:
    hops = list(path) + [requestor]
    return sum(1 for a, b in zip(hops, hops[1:]) if topology[a] != topology[b])


# -- weighted minimax path ------------------------------------------------------


@dataclass
class LinkWeightMatrix:
    """Directed link weights in seconds-per-block (inverse bandwidth).

    Missing entries fall back to ``default``; stragglers are just nodes whose
    links carry large weights.  Node weights fold into every out-edge of the
    node, taking the bottleneck (max) of node and link weight.
    """

    weights: dict[tuple[str, str], float] = field(default_factory=dict)
    default: float = 1.0

    def weight(self, src: str, dst: str) -> float:
        return self.weights.get((src, dst), self.default)

    def with_node_weights(self, node_weights: Mapping[str, float], nodes: Iterable[str]):
        merged = dict(self.weights)
        everyone = set(nodes) | set(node_weights)
        for src, w in node_weights.items():
            for dst in everyone:
                if dst != src:
                    merged[(src, dst)] = max(self.weight(src, dst), w)
        return LinkWeightMatrix(weights=merged, default=self.default)

    @classmethod
    def from_probe_rows(cls, rows: Iterable[tuple[str, str, float]], default: float = 1.0):
        """Rows of (src, dst, Mb/s) measurements; weight is inverse bandwidth."""
        weights = {}
        for src, dst, mbps in rows:
            mbps = float(mbps)
            if mbps <= 0:
                raise PathSelectionError(f"non-positive bandwidth {mbps} for {src}->{dst}")
            weights[(src, dst)] = 1.0 / mbps
        return cls(weights=weights, default=default)

    @classmethod
    def from_probe_csv(cls, path, default: float = 1.0):
        with open(path, newline="") as handle:
            reader = csv.reader(handle)
            rows = []
            for row in reader:
                if not row or row[0].strip().lower() in ("src", "source"):
                    continue
                rows.append((row[0].strip(), row[1].strip(), float(row[2])))
        return cls.from_probe_rows(rows, default=default)


@dataclass(frozen=True)
class WeightedPathResult:
    path: tuple[str, ...]
    bottleneck: float
    expanded: int


def weighted_path_search(
    weights: LinkWeightMatrix, requestor: str, available: Iterable[str], k: int
) -> WeightedPathResult:
    """Minimax-optimal helper ordering by pruned depth-first search.

    Extends the path at its head; any candidate whose entering link already
    weighs at least as much as the best complete path's maximum cannot
    improve it and is cut.  Candidates are tried cheapest link first (ties by
    node id), which tightens the bound quickly; the reported ``expanded``
    count is the number of path extensions performed.
    """
    nodes = sorted(set(available))
    if requestor in nodes:
        raise PathSelectionError("requestor cannot serve as its own helper")
    if len(nodes) < k:
        raise PathSelectionError(f"need {k} helpers, only {len(nodes)} available")

    best_path: list[str] = []
    best_max = float("inf")
    expanded = 0
    path: list[str] = [requestor]  # head is path[-1] growing backwards
    in_path: set[str] = set()
    path_max: list[float] = [0.0]

    def extend():
        nonlocal best_max, expanded
        head = path[-1]
        current_max = path_max[-1]
        if len(path) == k + 1:
            best_path[:] = path[::-1]
            best_max = current_max
            return
        candidates = sorted(
            ((weights.weight(node, head), node) for node in nodes if node not in in_path)
        )
        for w, node in candidates:
            if w >= best_max:
                break  # every later candidate enters on a heavier link
            expanded += 1
            path.append(node)
            in_path.add(node)
            path_max.append(max(current_max, w))
            extend()
            path_max.pop()
            in_path.remove(node)
            path.pop()

    extend()
    helpers = tuple(best_path[:-1])  # best_path runs first sender .. requestor
    return WeightedPathResult(path=helpers, bottleneck=best_max, expanded=expanded)


def weighted_path(
    weights: LinkWeightMatrix, requestor: str, available: Iterable[str], k: int
) -> list[str]:
    return list(weighted_path_search(weights, requestor, available, k).path)


def brute_force_minimax(
    weights: LinkWeightMatrix, requestor: str, available: Iterable[str], k: int
) -> float:
    """Exhaustive minimax over every ordered k-subset (test oracle)."""
    from itertools import permutations

    nodes = sorted(set(available))
    best = float("inf")
    for perm in permutations(nodes, k):
        hops = list(perm) + [requestor]
        worst = max(weights.weight(a, b) for a, b in zip(hops, hops[1:]))
        best = min(best, worst)
    return best


def brute_force_node_count(available: int, k: int) -> int:
    """Search-tree size of the unpruned search: sum of falling factorials."""
    total = 0
    for depth in range(1, k + 1):
        count = 1
        for i in range(depth):
            count *= available - i
        total += count
    return total


def aggregate_requestor_weights(
    weights: LinkWeightMatrix, requestors: Sequence[str], label: str = "~aggregate"
) -> tuple[LinkWeightMatrix, str]:
    """Fold f requestors into one pseudo-requestor for multi-block planning.

    Experimental: the in-edge from each helper is the worst (max) of its
    edges to the real requestors; no optimality claim is made.
    """
    merged = dict(weights.weights)
    sources = {src for src, _ in weights.weights}
    for src in sources:
        candidates = [weights.weight(src, r) for r in requestors]
        if candidates:
            merged[(src, label)] = max(candidates)
    return LinkWeightMatrix(weights=merged, default=weights.default), label


# -- full-node recovery composition ---------------------------------------------

PLAIN = "plain"
RACK_AWARE = "rack-aware"
WEIGHTED = "weighted"
PATH_POLICIES = (PLAIN, RACK_AWARE, WEIGHTED)


@dataclass(frozen=True)
class RepairSelection:
    stripe_id: str
    target_index: int
    path: tuple[str, ...]
    requestor: str


def full_recovery_selections(
    failures: Iterable[tuple],
    timestamps: HelperTimestamps,
    mode: str = PLAIN,
    *,
    topology: Mapping[str, str] | None = None,
    weights: LinkWeightMatrix | None = None,
    selection: str = "greedy",
) -> list[RepairSelection]:
    """Per-stripe helper choice and ordering for a multi-stripe recovery.

    ``failures`` yields (stripe_metadata, failed_block_index, requestor_node);
    requestors are assigned by the caller in advance.  ``selection`` is
    ``greedy`` (least recently selected) or ``first-k`` (lowest node ids, the
    unscheduled baseline).
    """
    if mode not in PATH_POLICIES:
        raise PathSelectionError(f"unknown path policy {mode!r}")
    if mode == RACK_AWARE and topology is None:
        raise PathSelectionError("rack-aware mode needs a topology")
    if mode == WEIGHTED and weights is None:
        raise PathSelectionError("weighted mode needs a link weight matrix")
    out = []
    for stripe, failed_index, requestor in failures:
        k = stripe.code.k
        available = [
            node for i, node in enumerate(stripe.nodes) if i != failed_index and node != requestor
        ]
        if selection == "greedy":
            chosen = timestamps.select(available, k)
        elif selection == "first-k":
            if len(available) < k:
                raise PathSelectionError("not enough helpers")
            chosen = sorted(available)[:k]
        else:
            raise PathSelectionError(f"unknown selection policy {selection!r}")
        if mode == PLAIN:
            path = list(chosen)
        elif mode == RACK_AWARE:
            path = rack_aware_path(topology, requestor, chosen, k)
        else:
            path = weighted_path(weights, requestor, chosen, k)
        out.append(
            RepairSelection(
                stripe_id=stripe.stripe_id,
                target_index=failed_index,
                path=tuple(path),
                requestor=requestor,
            )
        )
    return out

"""Deterministic timeslot simulator for repair plans.

Model: one timeslot is the time to push one block across one link.  Every
node owns an egress port and an ingress port, each able to carry one block
per timeslot; a transfer occupies the sender's egress, the receiver's
ingress, and the directed (src, dst) pair, each for ``units/slices_per_block``
timeslots scaled by that resource's weight.  Transfers on disjoint resources
proceed concurrently; computation and disk time cost nothing.

All arithmetic is exact: durations are integer ticks of 1/(slices * L) of a
timeslot, where L clears every weight denominator, and results come back as
``fractions.Fraction``.  The hot scheduling loop is numba-compiled when the
kernel backend allows it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .plans import (
    CONVENTIONAL,
    PPR,
    RP_BASIC,
    RP_CYCLIC,
    RP_MULTI,
    SCHEMES,
    Endpoint,
    HelperSlot,
    RepairPlan,
    SliceSpec,
    ppr_tree_edges,
)


class SimError(ValueError):
    pass


def _as_fraction(value) -> Fraction:
    f = Fraction(value)
    if f < 0:
        raise SimError(f"weights must be nonnegative, got {value}")
    return f


@dataclass(frozen=True)
class LinkModel:
    """Per-resource weights; weight w means 1/w blocks per timeslot.

    ``link_weights`` keys are directed (src, dst) node pairs; ``egress`` and
    ``ingress`` key single nodes.  Anything unspecified has weight 1.  A
    straggler is just a node or link with a large weight.
    """

    link_weights: Mapping[tuple[str, str], Fraction] = field(default_factory=dict)
    egress: Mapping[str, Fraction] = field(default_factory=dict)
    ingress: Mapping[str, Fraction] = field(default_factory=dict)

    def normalized(self) -> "LinkModel":
        return LinkModel(
            link_weights={k: _as_fraction(v) for k, v in self.link_weights.items()},
            egress={k: _as_fraction(v) for k, v in self.egress.items()},
            ingress={k: _as_fraction(v) for k, v in self.ingress.items()},
        )

    def denominators(self) -> Iterable[int]:
        for mapping in (self.link_weights, self.egress, self.ingress):
            for value in mapping.values():
                yield _as_fraction(value).denominator


@dataclass
class TransferSchedule:
    """Flat transfer table in emission order plus the computed timings."""

    nodes: list[str]
    src: np.ndarray
    dst: np.ndarray
    units: np.ndarray
    dep_offsets: np.ndarray
    deps: np.ndarray
    eg_occ: np.ndarray = None
    in_occ: np.ndarray = None
    ln_occ: np.ndarray = None
    start: np.ndarray = None
    finish: np.ndarray = None
    ticks_per_slot: int = 0

    def __len__(self) -> int:
        return len(self.src)


@dataclass(frozen=True)
class SimResult:
    completion_time: Fraction
    link_busy: dict[tuple[str, str], Fraction]
    node_reads: dict[str, Fraction]
    schedule: TransferSchedule = field(repr=False)


# -- transfer builders --------------------------------------------------------


class _Builder:
    def __init__(self):
        self.nodes: list[str] = []
        self._index: dict[str, int] = {}
        self.src: list[int] = []
        self.dst: list[int] = []
        self.units: list[int] = []
        self.deps: list[int] = []
        self.dep_offsets: list[int] = [0]
        self.reads: dict[str, int] = {}

    def node(self, name: str) -> int:
        idx = self._index.get(name)
        if idx is None:
            idx = len(self.nodes)
            self._index[name] = idx
            self.nodes.append(name)
        return idx

    def add(self, src: int, dst: int, units: int, deps: Sequence[int] = ()) -> int:
        self.src.append(src)
        self.dst.append(dst)
        self.units.append(units)
        self.deps.extend(deps)
        self.dep_offsets.append(len(self.deps))
        return len(self.src) - 1

    def schedule(self) -> TransferSchedule:
        return TransferSchedule(
            nodes=self.nodes,
            src=np.asarray(self.src, dtype=np.int64),
            dst=np.asarray(self.dst, dtype=np.int64),
            units=np.asarray(self.units, dtype=np.int64),
            dep_offsets=np.asarray(self.dep_offsets, dtype=np.int64),
            deps=np.asarray(self.deps, dtype=np.int64),
        )


def _build_basic(plan: RepairPlan) -> _Builder:
    b = _Builder()
    path = [b.node(n) for n in plan.helper_nodes()]
    requestor = b.node(plan.requestors[0].node)
    hops = path[1:] + [requestor]
    count = plan.slices.per_block
    for node in plan.helper_nodes():
        b.reads[node] = count
    for _ in range(count):
        prev = -1
        for m, dst in enumerate(hops):
            prev = b.add(path[m], dst, 1, () if prev < 0 else (prev,))
    return b


def _build_conventional(plan: RepairPlan) -> _Builder:
    b = _Builder()
    helpers = [b.node(n) for n in plan.helper_nodes()]
    primary = b.node(plan.requestors[0].node)
    count = plan.slices.per_block
    for node in plan.helper_nodes():
        b.reads[node] = count
    receives = [b.add(h, primary, count) for h in helpers]
    # The dedicated requestor decodes only once it holds all k blocks, then
    # forwards whole reconstructed blocks to the other requestors.
    for extra in plan.requestors[1:]:
        b.add(primary, b.node(extra.node), count, receives)
    return b


def _build_ppr(plan: RepairPlan) -> _Builder:
    b = _Builder()
    k = plan.k
    positions = [b.node(n) for n in plan.helper_nodes()]
    positions.append(b.node(plan.requestors[0].node))
    count = plan.slices.per_block
    for node in plan.helper_nodes():
        b.reads[node] = count
    sent_to: dict[int, list[int]] = {}
    for src_pos, dst_pos, _round in ppr_tree_edges(k):
        deps = sent_to.get(src_pos, ())
        idx = b.add(positions[src_pos], positions[dst_pos], count, deps)
        sent_to.setdefault(dst_pos, []).append(idx)
    return b


def _build_multi(plan: RepairPlan) -> _Builder:
    b = _Builder()
    path = [b.node(n) for n in plan.helper_nodes()]
    requestors = [b.node(ep.node) for ep in plan.requestors]
    count = plan.slices.per_block
    f = plan.fail_count
    for node in plan.helper_nodes():
        b.reads[node] = count
    last = path[-1]
    for _ in range(count):
        prev = -1
        for m in range(len(path) - 1):
            prev = b.add(path[m], path[m + 1], f, () if prev < 0 else (prev,))
        deps = () if prev < 0 else (prev,)
        for r in requestors:
            b.add(last, r, 1, deps)
    return b


def _build_cyclic(plan: RepairPlan) -> _Builder:
    b = _Builder()
    k = plan.k
    if k < 2:
        raise SimError("cyclic plans need k >= 2")
    path = [b.node(n) for n in plan.helper_nodes()]
    requestor = b.node(plan.requestors[0].node)
    count = plan.slices.per_block
    for node in plan.helper_nodes():
        b.reads[node] = count
    groups = math.ceil(count / (k - 1))
    rotations = [min(k - 1, count - g * (k - 1)) for g in range(groups)]
    # pending[i] holds the last-hop transfer of rotation i in the previous
    # group; its delivery interleaves with the next group's sends at the
    # step where the end helper's egress sits idle.
    pending: list[int | None] = [None] * (k - 1)
    for g in range(groups):
        current: list[int] = [-1] * rotations[g]
        for step in range(k - 1):
            for i in range(rotations[g]):
                src = path[(i + step) % k]
                dst = path[(i + step + 1) % k]
                prev = current[i]
                current[i] = b.add(src, dst, 1, () if prev < 0 else (prev,))
            if g > 0 and step < rotations[g - 1]:
                dep = pending[step]
                b.add(path[(step - 1) % k], requestor, 1, (dep,))
        pending = current  # type: ignore[assignment]
    for i in range(rotations[-1]):
        b.add(path[(i - 1) % k], requestor, 1, (pending[i],))
    return b


_BUILDERS = {
    RP_BASIC: _build_basic,
    CONVENTIONAL: _build_conventional,
    PPR: _build_ppr,
    RP_MULTI: _build_multi,
    RP_CYCLIC: _build_cyclic,
}


# -- engine -------------------------------------------------------------------


def _engine(src, dst, dep_offsets, deps, eg_occ, in_occ, ln_occ, num_nodes):
    count = src.shape[0]
    start = np.zeros(count, dtype=np.int64)
    finish = np.zeros(count, dtype=np.int64)
    eg_avail = np.zeros(num_nodes, dtype=np.int64)
    in_avail = np.zeros(num_nodes, dtype=np.int64)
    pair_avail = np.zeros(num_nodes * num_nodes, dtype=np.int64)
    for t in range(count):
        at = 0
        for d in range(dep_offsets[t], dep_offsets[t + 1]):
            df = finish[deps[d]]
            if df > at:
                at = df
        s, d2 = src[t], dst[t]
        pair = s * num_nodes + d2
        if eg_avail[s] > at:
            at = eg_avail[s]
        if in_avail[d2] > at:
            at = in_avail[d2]
        if pair_avail[pair] > at:
            at = pair_avail[pair]
        occ = eg_occ[t]
        if in_occ[t] > occ:
            occ = in_occ[t]
        if ln_occ[t] > occ:
            occ = ln_occ[t]
        start[t] = at
        finish[t] = at + occ
        eg_avail[s] = at + eg_occ[t]
        in_avail[d2] = at + in_occ[t]
        pair_avail[pair] = at + ln_occ[t]
    return start, finish


if kernels.BACKEND == "numba":
    from numba import njit

    _engine_compiled = njit(cache=True)(_engine)
else:
    _engine_compiled = _engine


def simulate(plan: RepairPlan, links: LinkModel | None = None) -> SimResult:
    """Run one plan over the link model and return its exact completion time."""
    builder = _BUILDERS.get(plan.scheme)
    if builder is None:
        raise SimError(f"unknown scheme {plan.scheme!r}")
    b = builder(plan)
    sched = b.schedule()
    links = (links or LinkModel()).normalized()

    scale = math.lcm(1, *links.denominators())
    count = plan.slices.per_block
    ticks_per_slot = count * scale

    def _weight_ticks(fraction: Fraction) -> int:
        return int(fraction * scale)

    num_nodes = len(sched.nodes)
    eg_w = np.full(num_nodes, scale, dtype=np.int64)
    in_w = np.full(num_nodes, scale, dtype=np.int64)
    for i, name in enumerate(sched.nodes):
        if name in links.egress:
            eg_w[i] = _weight_ticks(links.egress[name])
        if name in links.ingress:
            in_w[i] = _weight_ticks(links.ingress[name])
    eg_occ = sched.units * eg_w[sched.src]
    in_occ = sched.units * in_w[sched.dst]
    ln_occ = sched.units * np.int64(scale)
    if links.link_weights:
        index = {name: i for i, name in enumerate(sched.nodes)}
        for (u, v), w in links.link_weights.items():
            if u in index and v in index:
                mask = (sched.src == index[u]) & (sched.dst == index[v])
                ln_occ = np.where(mask, sched.units * np.int64(_weight_ticks(w)), ln_occ)

    start, finish = _engine_compiled(
        sched.src, sched.dst, sched.dep_offsets, sched.deps, eg_occ, in_occ, ln_occ, num_nodes
    )
    sched.eg_occ, sched.in_occ, sched.ln_occ = eg_occ, in_occ, ln_occ
    sched.start, sched.finish = start, finish
    sched.ticks_per_slot = ticks_per_slot

    completion = Fraction(int(finish.max()), ticks_per_slot) if len(sched) else Fraction(0)
    busy: dict[tuple[str, str], Fraction] = {}
    for i in range(len(sched)):
        key = (sched.nodes[sched.src[i]], sched.nodes[sched.dst[i]])
        busy[key] = busy.get(key, Fraction(0)) + Fraction(int(ln_occ[i]), ticks_per_slot)
    reads = {node: Fraction(slices, count) for node, slices in b.reads.items()}
    return SimResult(
        completion_time=completion, link_busy=busy, node_reads=reads, schedule=sched
    )


def assert_capacity_respected(sched: TransferSchedule) -> None:
    """Check no port or pair ever runs two transfers at once (test support)."""
    intervals: dict[tuple[str, int], list[tuple[int, int]]] = {}
    for i in range(len(sched)):
        at = int(sched.start[i])
        intervals.setdefault(("eg", int(sched.src[i])), []).append((at, at + int(sched.eg_occ[i])))
        intervals.setdefault(("in", int(sched.dst[i])), []).append((at, at + int(sched.in_occ[i])))
        pair = int(sched.src[i]) * len(sched.nodes) + int(sched.dst[i])
        intervals.setdefault(("ln", pair), []).append((at, at + int(sched.ln_occ[i])))
    for spans in intervals.values():
        spans.sort()
        for (_, prev_end), (begin, _) in zip(spans, spans[1:]):
            if begin < prev_end:
                raise AssertionError("overlapping transfers on one resource")


# -- closed forms -------------------------------------------------------------


def analytic_time(scheme: str, k: int, slices: int | None = None, fails: int = 1) -> Fraction:
    """Closed-form completion time in timeslots for a repair scheme.

    ``slices`` is required for the pipelined schemes.  The cyclic form is
    only defined when (k-1) divides the slice count; other cases must go
    through :func:`simulate`.
    """
    if scheme not in SCHEMES:
        raise SimError(f"unknown scheme {scheme!r}")
    if k < 1:
        raise SimError("k must be >= 1")
    if fails < 1:
        raise SimError("fails must be >= 1")
    if scheme == CONVENTIONAL:
        return Fraction(k + fails - 1)
    if scheme == PPR:
        if fails != 1:
            raise SimError("ppr is single-block only")
        return Fraction(math.ceil(math.log2(k + 1)))
    if slices is None or slices < 1:
        raise SimError(f"{scheme} needs a positive slice count")
    per_block = Fraction(1) + Fraction(k - 1, slices)
    if scheme == RP_BASIC:
        if fails != 1:
            raise SimError("rp-basic is single-block only")
        return per_block
    if scheme == RP_CYCLIC:
        if fails != 1:
            raise SimError("rp-cyclic is single-block only")
        if k < 2:
            raise SimError("rp-cyclic needs k >= 2")
        if slices % (k - 1):
            raise SimError(
                f"cyclic closed form undefined for slices={slices}, k={k}; simulate instead"
            )
        return per_block
    return fails * per_block  # RP_MULTI


# -- synthetic plans and sweeps ------------------------------------------------


def synthetic_plan(scheme: str, k: int, slices: int, fails: int = 1) -> RepairPlan:
    """A structurally valid plan for timing studies (no real coefficients)."""
    from .codec import rs_scheme

    if scheme not in SCHEMES:
        raise SimError(f"unknown scheme {scheme!r}")
    if scheme in (RP_BASIC, RP_CYCLIC, PPR) and fails != 1:
        raise SimError(f"{scheme} is single-block only")
    code = rs_scheme(k + fails, k)
    helpers = tuple(
        HelperSlot(node=f"h{i}", block_index=i, block_id=f"synthetic.b{i}") for i in range(k)
    )
    requestors = tuple(Endpoint(node=f"r{j}") for j in range(fails))
    return RepairPlan(
        scheme=scheme,
        session=bytes(16),
        stripe_id="synthetic",
        code=code,
        targets=tuple(range(k, k + fails)),
        helpers=helpers,
        coefficients=tuple((0,) * k for _ in range(fails)),
        requestors=requestors,
        slices=SliceSpec(slice_size=1, per_block=slices),
    )


def sweep(
    schemes: Sequence[str],
    ks: Sequence[int],
    slice_counts: Sequence[int],
    fail_counts: Sequence[int] = (1,),
    links: LinkModel | None = None,
) -> list[tuple[str, int, int, int, Fraction]]:
    """Cartesian timing table: (scheme, k, slices, fails, timeslots) rows.

    Single-target schemes appear once per (k, slices) with fails=1; invalid
    combinations (cyclic with k < 2) are skipped.  Output is sorted and
    deterministic.
    """
    rows = []
    for scheme in sorted(set(schemes)):
        if scheme not in SCHEMES:
            raise SimError(f"unknown scheme {scheme!r}")
        per_scheme_fails = sorted(set(fail_counts)) if scheme in (CONVENTIONAL, RP_MULTI) else [1]
        for k in sorted(set(ks)):
            if scheme == RP_CYCLIC and k < 2:
                continue
            for count in sorted(set(slice_counts)):
                for fails in per_scheme_fails:
                    plan = synthetic_plan(scheme, k, count, fails)
                    result = simulate(plan, links)
                    rows.append((scheme, k, count, fails, result.completion_time))
    return rows

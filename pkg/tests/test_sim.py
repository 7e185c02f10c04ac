"""Timeslot simulator versus the closed-form repair-time analyses."""

from fractions import Fraction

import pytest

from ecrepair import sim
from ecrepair.plans import CONVENTIONAL, PPR, RP_BASIC, RP_CYCLIC, RP_MULTI


def run(scheme, k, slices, fails=1, links=None):
    return sim.simulate(sim.synthetic_plan(scheme, k, slices, fails), links)


def test_basic_k4_s6_is_one_and_a_half_timeslots():
    assert run(RP_BASIC, 4, 6).completion_time == Fraction(3, 2)


def test_basic_unsliced_degenerates_to_k_timeslots():
    for k in (1, 4, 10):
        assert run(RP_BASIC, k, 1).completion_time == k


def test_basic_large_slice_count_approaches_one():
    assert run(RP_BASIC, 10, 2048).completion_time == 1 + Fraction(9, 2048)


def test_conventional_takes_k_timeslots():
    assert run(CONVENTIONAL, 4, 6).completion_time == 4


def test_conventional_multiblock_takes_k_plus_f_minus_one():
    assert run(CONVENTIONAL, 4, 6, fails=2).completion_time == 5
    assert run(CONVENTIONAL, 1, 1, fails=1).completion_time == 1


def test_ppr_takes_log_timeslots():
    assert run(PPR, 4, 6).completion_time == 3
    assert run(PPR, 1, 4).completion_time == 1
    assert run(PPR, 10, 6).completion_time == 4


def test_cyclic_k4_s6_matches_basic_form():
    assert run(RP_CYCLIC, 4, 6).completion_time == Fraction(3, 2)


def test_cyclic_single_group_schedule():
    # slices = k-1: one group, delivery cannot overlap anything, so the
    # completion is phase1 + phase2 = 2(k-1)/s = 2.
    for k in (3, 5, 8):
        assert run(RP_CYCLIC, k, k - 1).completion_time == 2


def test_cyclic_requestor_indegree():
    for k, s in ((4, 6), (6, 12), (6, 3), (2, 5)):
        result = run(RP_CYCLIC, k, s)
        senders = {
            result.schedule.nodes[result.schedule.src[i]]
            for i in range(len(result.schedule))
            if result.schedule.nodes[result.schedule.dst[i]] == "r0"
        }
        assert len(senders) == min(k - 1, s)


def test_multi_k4_s6_f2_takes_three_timeslots():
    assert run(RP_MULTI, 4, 6, fails=2).completion_time == 3


def test_multi_f1_equals_basic():
    for k, s in ((4, 6), (10, 64)):
        assert run(RP_MULTI, k, s, 1).completion_time == run(RP_BASIC, k, s).completion_time


def test_multi_unsliced_worse_than_conventional():
    # Without slicing the multi-block pipeline costs f*k, above the k+f-1
    # of conventional repair.
    assert run(RP_MULTI, 4, 1, fails=2).completion_time == 8
    assert run(CONVENTIONAL, 4, 1, fails=2).completion_time == 5


@pytest.mark.parametrize("scheme", [RP_BASIC, CONVENTIONAL, PPR, RP_CYCLIC, RP_MULTI])
def test_simulation_matches_analytic_sample_grid(scheme):
    for k in (2, 3, 5, 8, 13):
        for s in (1, 6, 64):
            fail_options = (1, 2, 4) if scheme in (CONVENTIONAL, RP_MULTI) else (1,)
            for f in fail_options:
                if scheme == RP_CYCLIC and s % (k - 1):
                    continue
                expected = sim.analytic_time(scheme, k, s, f)
                assert run(scheme, k, s, f).completion_time == expected, (scheme, k, s, f)


def test_analytic_cyclic_refuses_nondivisible():
    with pytest.raises(sim.SimError):
        sim.analytic_time(RP_CYCLIC, 4, 7)
    # ... but the simulator still computes a deterministic schedule.
    first = run(RP_CYCLIC, 4, 7).completion_time
    assert first == run(RP_CYCLIC, 4, 7).completion_time
    assert first >= 1 + Fraction(3, 7)


def test_analytic_validation():
    with pytest.raises(sim.SimError):
        sim.analytic_time("nope", 4, 4)
    with pytest.raises(sim.SimError):
        sim.analytic_time(RP_BASIC, 4, None)
    with pytest.raises(sim.SimError):
        sim.analytic_time(PPR, 4, 4, fails=2)
    with pytest.raises(sim.SimError):
        sim.analytic_time(RP_BASIC, 0, 4)


def test_completion_monotone_in_slices_and_fails():
    for scheme in (RP_BASIC, RP_MULTI):
        previous = None
        for s in (1, 2, 4, 8, 64, 512):
            now = run(scheme, 6, s, 2 if scheme == RP_MULTI else 1).completion_time
            if previous is not None:
                assert now <= previous
            previous = now
    previous = None
    for f in (1, 2, 3, 4):
        now = run(RP_MULTI, 6, 32, f).completion_time
        if previous is not None:
            assert now >= previous
        previous = now


@pytest.mark.parametrize("scheme", [RP_BASIC, CONVENTIONAL, PPR, RP_CYCLIC, RP_MULTI])
def test_capacity_respected(scheme):
    for k, s, f in ((4, 6, 2), (7, 13, 3), (2, 5, 1)):
        if scheme in (RP_BASIC, RP_CYCLIC, PPR):
            f = 1
        result = run(scheme, k, s, f)
        sim.assert_capacity_respected(result.schedule)


def test_link_load_balance_basic():
    # Every link on the path carries exactly one block of traffic.
    result = run(RP_BASIC, 6, 24)
    assert set(result.link_busy.values()) == {Fraction(1)}
    assert len(result.link_busy) == 6


def test_node_reads_single_read_property():
    multi = run(RP_MULTI, 5, 10, fails=3)
    assert all(blocks == 1 for blocks in multi.node_reads.values())
    # Repairing the same three blocks one at a time costs three reads/helper.
    total = Fraction(0)
    for _ in range(3):
        single = run(RP_BASIC, 5, 10)
        total += single.node_reads["h0"]
    assert total == 3


def test_weighted_link_slows_basic_path():
    links = sim.LinkModel(link_weights={("h1", "r0"): Fraction(10)})
    slow = run(RP_BASIC, 2, 2, links=links).completion_time
    # Two slices serialized over the weighted final link: 1/2 + 2*5.
    assert slow == Fraction(21, 2)
    assert run(RP_BASIC, 2, 2).completion_time == Fraction(3, 2)


def test_weighted_ports_slow_a_node():
    # Doubling the second helper's egress weight makes it the pacing hop:
    # its sends run back-to-back at 2/s from 1/s, the last finishing at
    # (1 + 2s)/s, then two more 1/s hops drain the final slice.
    links = sim.LinkModel(egress={"h1": Fraction(2)})
    slowed = run(RP_BASIC, 4, 8, links=links).completion_time
    assert slowed == Fraction(1 + 2 * 8, 8) + Fraction(2, 8)
    links = sim.LinkModel(ingress={"r0": Fraction(3)})
    choked = run(CONVENTIONAL, 4, 8, links=links).completion_time
    assert choked == 12  # k blocks through a one-third-speed ingress


def test_weighted_edge_favors_cyclic_over_basic():
    # All helper->requestor pairs at a tenth of the capacity: the cyclic
    # version spreads deliveries over k-1 slow pairs in parallel.
    k, s = 6, 30
    pairs = {(f"h{i}", "r0"): Fraction(10) for i in range(k)}
    links = sim.LinkModel(link_weights=pairs)
    basic = run(RP_BASIC, k, s, links=links).completion_time
    cyclic = run(RP_CYCLIC, k, s, links=links).completion_time
    assert basic >= 10
    assert cyclic * 2 <= basic


def test_sweep_sorted_and_matches_examples():
    rows = sim.sweep([RP_BASIC], [6, 10, 12], [2048])
    assert [ts for _, _, _, _, ts in rows] == [
        1 + Fraction(k - 1, 2048) for k in (6, 10, 12)
    ]
    # With 2048 slices the repair time is within 0.6% of one timeslot for
    # every k: near-constant in the coding parameters.
    assert all(abs(float(ts) - 1.0) < 0.006 for _, _, _, _, ts in rows)
    conventional = sim.sweep([CONVENTIONAL], [12, 6, 10], [1])
    assert [int(ts) for _, _, _, _, ts in conventional] == [6, 10, 12]
    assert sim.sweep([], [], []) == []
    assert rows == sorted(rows)


def test_sweep_rejects_unknown_scheme():
    with pytest.raises(sim.SimError):
        sim.sweep(["bogus"], [4], [4])

import pickle

import pytest

from fencesim.sim import CausalityError, Simulator


def test_same_time_events_fire_in_schedule_order():
    sim = Simulator()
    fired = []
    sim.schedule(0, lambda: fired.append("a"))
    sim.schedule(0, lambda: fired.append("b"))
    sim.run_until_idle()
    assert fired == ["a", "b"]


def test_scheduling_into_the_past_is_rejected():
    sim = Simulator()
    sim.schedule(10, lambda: None)
    sim.run_until_idle()
    with pytest.raises(CausalityError):
        sim.schedule(9, lambda: None)


def test_earlier_event_fires_first():
    sim = Simulator()
    fired = []
    sim.schedule(5, lambda: fired.append("a"))
    sim.schedule(3, lambda: fired.append("b"))
    sim.run_until_idle()
    assert fired == ["b", "a"]


def test_run_until_idle_on_empty_queue_returns_zero():
    assert Simulator().run_until_idle() == 0


def test_single_event_returns_its_time():
    sim = Simulator()
    sim.schedule(7, lambda: None)
    assert sim.run_until_idle() == 7


def test_chain_of_three_events():
    sim = Simulator()

    def hop(n):
        if n < 2:
            sim.after(10, (hop, n + 1))

    sim.schedule(0, (hop, 0))
    assert sim.run_until_idle() == 20
    assert sim.processed == 3


def test_handler_scheduling_into_past_aborts_run():
    sim = Simulator()
    sim.schedule(5, lambda: sim.schedule(1, lambda: None))
    with pytest.raises(CausalityError):
        sim.run_until_idle()


def test_step_returns_events_in_time_order():
    sim = Simulator()
    for t in (4, 1, 4, 2):
        sim.schedule(t, None)  # inert markers
    times = [sim.step().fire_time for _ in range(4)]
    assert times == sorted(times)
    assert sim.pending() == 0


def test_simulator_pickles_before_running():
    sim = Simulator(seed=3)
    sim.schedule(1, None)
    clone = pickle.loads(pickle.dumps(sim))
    assert clone.run_until_idle() == 1
    assert clone.rng.integers(1 << 30) == Simulator(seed=3).rng.integers(1 << 30)

"""Tensor state machine tests: table soundness and randomized walks."""

import random

import pytest

from chunkstar.fsm import (
    PINNING_STATES,
    TensorLifecycle,
    TensorState,
    TransitionError,
    Trigger,
    legal_triggers,
    next_state,
)


def test_core_lifecycle_path():
    """Parameter tensor over one iteration: FREE -> HOLD (init) ->
    COMPUTE -> HOLD_AFTER_FWD -> COMPUTE -> HOLD_AFTER_BWD, then the
    optimizer releases the stale payload and the updated one arrives."""
    t = TensorLifecycle(0)
    assert t.state is TensorState.FREE
    t.fire(Trigger.INIT)
    assert t.state is TensorState.HOLD
    t.fire(Trigger.ACCESS_FOR_COMPUTE)
    assert t.state is TensorState.COMPUTE
    t.fire(Trigger.FINISH_FWD)
    assert t.state is TensorState.HOLD_AFTER_FWD
    t.fire(Trigger.ACCESS_FOR_COMPUTE)
    t.fire(Trigger.FINISH_BWD_GRAD_OVERWRITE)
    assert t.state is TensorState.HOLD_AFTER_BWD
    t.fire(Trigger.RELEASE)
    assert t.state is TensorState.FREE
    t.fire(Trigger.ALLGATHER_ARRIVAL)
    assert t.state is TensorState.HOLD


def test_optimizer_state_lifecycle_path():
    """Optimizer tensors cycle HOLD -> COMPUTE -> HOLD through ADAM."""
    t = TensorLifecycle(1)
    t.fire(Trigger.INIT)
    t.fire(Trigger.ADAM_ACCESS)
    assert t.state is TensorState.COMPUTE
    t.fire(Trigger.ADAM_FINISH)
    assert t.state is TensorState.HOLD


def test_post_fwd_reset_path():
    t = TensorLifecycle(2)
    t.fire(Trigger.INIT)
    t.fire(Trigger.ACCESS_FOR_COMPUTE)
    t.fire(Trigger.FINISH_FWD)
    t.fire(Trigger.POST_FWD_RESET)
    assert t.state is TensorState.HOLD


def test_allgather_arrival_populates_free_tensor():
    t = TensorLifecycle(0)
    t.fire(Trigger.ALLGATHER_ARRIVAL)
    assert t.state is TensorState.HOLD


def test_remote_release_after_fwd():
    """A remote chunk's tensors are dropped once its group passes FWD."""
    assert next_state(TensorState.HOLD_AFTER_FWD, Trigger.RELEASE) is TensorState.FREE


def test_only_compute_pins():
    assert PINNING_STATES == {TensorState.COMPUTE}


@pytest.mark.parametrize("state", list(TensorState))
def test_illegal_triggers_raise(state):
    legal = legal_triggers(state)
    for trigger in Trigger:
        if trigger in legal:
            assert next_state(state, trigger) in TensorState
        else:
            with pytest.raises(TransitionError):
                next_state(state, trigger)


def test_compute_cannot_be_released_mid_flight():
    with pytest.raises(TransitionError):
        next_state(TensorState.COMPUTE, Trigger.RELEASE)
    with pytest.raises(TransitionError):
        next_state(TensorState.COMPUTE, Trigger.ADAM_ACCESS)


def test_double_gradient_write_is_illegal():
    with pytest.raises(TransitionError):
        next_state(TensorState.HOLD_AFTER_BWD, Trigger.FINISH_BWD_GRAD_OVERWRITE)


def test_lifecycle_counts_transitions():
    t = TensorLifecycle(7)
    t.fire(Trigger.INIT)
    t.fire(Trigger.ACCESS_FOR_COMPUTE)
    assert t.transitions == 2


def test_randomized_legal_walks_never_error():
    """Random legal walks across the whole table stay inside the state set
    and always agree with next_state."""
    rng = random.Random(99)
    for _ in range(2000):
        t = TensorLifecycle(0)
        for _ in range(rng.randint(1, 30)):
            options = sorted(legal_triggers(t.state))
            trigger = rng.choice(options)
            expected = next_state(t.state, trigger)
            t.fire(trigger)
            assert t.state is expected


def test_randomized_illegal_injections_caught():
    rng = random.Random(100)
    caught = 0
    for _ in range(500):
        t = TensorLifecycle(0)
        for _ in range(rng.randint(1, 10)):
            legal = legal_triggers(t.state)
            illegal = [tr for tr in Trigger if tr not in legal]
            if illegal and rng.random() < 0.5:
                with pytest.raises(TransitionError):
                    t.fire(rng.choice(illegal))
                caught += 1
            else:
                t.fire(rng.choice(sorted(legal)))
    assert caught > 100

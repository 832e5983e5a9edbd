"""Tensor lifecycle state machine.

Every chunk-managed tensor is always in exactly one lifecycle state, and
the runtime drives it only through the triggers below.  Chunk movability
is derived from the states of the tensors a chunk hosts, so an illegal
transition here means corrupted accounting everywhere downstream —
transitions are therefore validated strictly and raise on violation.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Tuple


class TensorState(str, Enum):
    FREE = "free"                       # payload absent / invalid
    COMPUTE = "compute"                 # operand of the running operator
    HOLD = "hold"                       # valid payload, no operator attached
    HOLD_AFTER_FWD = "hold_after_fwd"   # valid, last touched by a forward op
    HOLD_AFTER_BWD = "hold_after_bwd"   # valid, gradient written over payload


class Trigger(str, Enum):
    INIT = "init"
    ACCESS_FOR_COMPUTE = "access_for_compute"
    FINISH_FWD = "finish_fwd"
    POST_FWD_RESET = "post_fwd_reset"
    FINISH_BWD_GRAD_OVERWRITE = "finish_bwd_grad_overwrite"
    RELEASE = "release"
    ADAM_ACCESS = "adam_access"
    ADAM_FINISH = "adam_finish"
    ALLGATHER_ARRIVAL = "allgather_arrival"


class TransitionError(RuntimeError):
    """Raised when a trigger fires on a tensor whose state does not allow it."""


# (current state, trigger) -> next state
_TRANSITIONS: Dict[Tuple[TensorState, Trigger], TensorState] = {
    (TensorState.FREE, Trigger.INIT): TensorState.HOLD,
    (TensorState.HOLD, Trigger.ACCESS_FOR_COMPUTE): TensorState.COMPUTE,
    (TensorState.HOLD_AFTER_FWD, Trigger.ACCESS_FOR_COMPUTE): TensorState.COMPUTE,
    (TensorState.COMPUTE, Trigger.FINISH_FWD): TensorState.HOLD_AFTER_FWD,
    (TensorState.HOLD_AFTER_FWD, Trigger.POST_FWD_RESET): TensorState.HOLD,
    (TensorState.COMPUTE, Trigger.FINISH_BWD_GRAD_OVERWRITE): TensorState.HOLD_AFTER_BWD,
    (TensorState.HOLD_AFTER_BWD, Trigger.RELEASE): TensorState.FREE,
    # A data-parallel rank drops gathered remote payloads once the owning
    # group finishes its forward window, so release is also legal there.
    (TensorState.HOLD_AFTER_FWD, Trigger.RELEASE): TensorState.FREE,
    (TensorState.HOLD, Trigger.ADAM_ACCESS): TensorState.COMPUTE,
    (TensorState.COMPUTE, Trigger.ADAM_FINISH): TensorState.HOLD,
    (TensorState.FREE, Trigger.ALLGATHER_ARRIVAL): TensorState.HOLD,
}

#: States whose presence pins the hosting chunk to its current device.
PINNING_STATES: FrozenSet[TensorState] = frozenset({TensorState.COMPUTE})


def next_state(state: TensorState, trigger: Trigger) -> TensorState:
    """Look up the successor state; raises TransitionError if illegal."""
    try:
        return _TRANSITIONS[(state, trigger)]
    except KeyError:
        raise TransitionError(
            "trigger %s illegal in state %s" % (trigger.value, state.value)) from None


def legal_triggers(state: TensorState) -> FrozenSet[Trigger]:
    return frozenset(t for (s, t) in _TRANSITIONS if s == state)


@dataclass
class TensorLifecycle:
    """Mutable lifecycle record for one tensor."""

    tensor_id: int
    state: TensorState = TensorState.FREE
    transitions: int = field(default=0, repr=False)

    def fire(self, trigger: Trigger) -> TensorState:
        try:
            self.state = next_state(self.state, trigger)
        except TransitionError as exc:
            raise TransitionError("tensor %d: %s" % (self.tensor_id, exc)) from None
        self.transitions += 1
        return self.state

from .base import (
    ControlPolicy,
    HistoricalPolicy,
    Observation,
    Policy,
    RandomPolicy,
    RoundRobinPolicy,
    TariPolicy,
    WhittlePolicy,
    check_decision,
    control_select,
    random_select,
    round_robin_select,
    select_top_k,
    whittle_select,
)
from .tari import TariIndex, tari_index, tari_indices
from .whittle import (
    IndexabilityWarning,
    WhittleModel,
    estimate_transitions,
    mdp_whittle_indices,
    whittle_index,
)

__all__ = [
    "ControlPolicy",
    "HistoricalPolicy",
    "IndexabilityWarning",
    "Observation",
    "Policy",
    "RandomPolicy",
    "RoundRobinPolicy",
    "TariIndex",
    "TariPolicy",
    "WhittleModel",
    "WhittlePolicy",
    "check_decision",
    "control_select",
    "estimate_transitions",
    "mdp_whittle_indices",
    "random_select",
    "round_robin_select",
    "select_top_k",
    "tari_index",
    "tari_indices",
    "whittle_index",
    "whittle_select",
]

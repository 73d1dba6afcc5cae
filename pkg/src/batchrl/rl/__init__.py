"""Update rules for the model zoo and serving-time policies."""

from .actor_critic import ActorCriticConfig, Ddpg, Sac
from .dqn import DiscreteDqn, DqnConfig, NumericalError, ParametricDqn
from .policy import PidController, PolicyDecision, pid_update, select_action, threshold_policy

__all__ = [
    "ActorCriticConfig",
    "Ddpg",
    "DiscreteDqn",
    "DqnConfig",
    "NumericalError",
    "ParametricDqn",
    "PidController",
    "PolicyDecision",
    "Sac",
    "pid_update",
    "select_action",
    "threshold_policy",
]

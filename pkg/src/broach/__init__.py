"""Budget-constrained heat-alert simulation, rewards model, agents and evaluation."""
from . import agents, data, env, evaluation, explain, kernels, policies, rewards, synth  # noqa: F401
from .env import BroachEnv, Episode, World, run_episode  # noqa: F401
from .evaluation import paired_rank_test  # noqa: F401
from .explain import cart_fit  # noqa: F401
from .policies import THRESHOLD_GRID, PolicySpec  # noqa: F401

__version__ = "0.1.0"

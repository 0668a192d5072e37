from .base import EnvContractError, EnvStep, MultiAgentEnv, dump_trajectory
from .cartpole import CartPoleParams, CoupledMultiCartPole
from .decoupled import DecoupledChain, global_q, value_iteration_oracle
from .matrix_game import MatrixGame, matrix_game_tables
from .navigation import BoundedCooperativeNavigation, overlap_graph

ENV_NAMES = ("cartpole", "navigation", "nav2", "decoupled", "matrix_game")


def make_env(name: str, **kw) -> MultiAgentEnv:
    """Build an environment from its config name and keyword overrides.

    ``decoupled`` accepts ``mdp_seed`` (instance draw) plus the
    :meth:`DecoupledChain.random` arguments; ``nav2`` is the two-agent,
    one-landmark navigation layout without the co-location feature.
    """
    kw = dict(kw)
    kw.pop("seed", None)
    if name == "cartpole":
        return CoupledMultiCartPole(**kw)
    if name == "navigation":
        return BoundedCooperativeNavigation(**kw)
    if name == "nav2":
        kw.setdefault("observe_colocated", False)
        kw.setdefault("n_obs_landmarks", 1)
        kw.pop("n", None)
        return BoundedCooperativeNavigation(n=2, layout="pair", **kw)
    if name == "decoupled":
        mdp_seed = kw.pop("mdp_seed", 0)
        return DecoupledChain.random(seed=mdp_seed, **kw)
    if name == "matrix_game":
        kw.pop("n", None)
        return MatrixGame(**kw)
    raise ValueError(f"unknown environment {name!r}; expected one of {ENV_NAMES}")


__all__ = [
    "BoundedCooperativeNavigation", "CartPoleParams", "CoupledMultiCartPole", "DecoupledChain",
    "ENV_NAMES", "EnvContractError", "EnvStep", "MatrixGame", "MultiAgentEnv", "dump_trajectory",
    "global_q", "make_env", "matrix_game_tables", "overlap_graph", "value_iteration_oracle",
]

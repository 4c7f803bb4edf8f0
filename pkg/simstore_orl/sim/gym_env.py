"""Gymnasium adapter around SimStore."""

import dataclasses
from typing import Any, Dict, Optional, Tuple

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from simstore_orl.config import SimConfig
from simstore_orl.sim.features import NUM_FEATURES
from simstore_orl.sim.store import SimStore

_EMPTY_OBSERVATION = np.zeros(NUM_FEATURES, dtype=np.float64)


class SimStoreGymEnv(gym.Env):
    """
    ``reset(seed)`` -> ``(obs, info)``; ``step(a)`` -> ``(obs, reward, terminated, truncated, info)``.

    ``info`` of ``reset`` holds the context of the first pending order; ``info`` of ``step``
    holds the inferred outcome ``y_hat`` of the resolved order plus the simulator's
    own info dict. After termination the returned observation is all zeros.
    """

    metadata = {"render_modes": []}

    def __init__(self, config: Optional[SimConfig] = None):
        super().__init__()
        self.store = SimStore(config)
        self.observation_space = spaces.Box(low=-1.0, high=np.inf, shape=(NUM_FEATURES,),
                                            dtype=np.float64)
        self.action_space = spaces.Discrete(2)

    def _context_info(self) -> Dict[str, Any]:
        context = self.store.pending_context()
        return {} if context is None else dataclasses.asdict(context)

    def reset(self, *, seed: Optional[int] = None,
              options: Optional[Dict[str, Any]] = None) -> Tuple[np.ndarray, Dict[str, Any]]:
        super().reset(seed=seed)
        observation = self.store.reset(seed)
        if observation is None:
            return _EMPTY_OBSERVATION.copy(), {}
        return observation.as_array(), self._context_info()

    def step(self, action) -> Tuple[np.ndarray, float, bool, bool, Dict[str, Any]]:
        result = self.store.step(int(action))
        info = dict(result.info, y_hat=result.y_hat)
        if result.observation is None:
            observation = _EMPTY_OBSERVATION.copy()
        else:
            observation = result.observation.as_array()
        return observation, result.reward, result.terminal, False, info

"""Group-relative advantages."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .env import Episode, Prompt

DEFAULT_STABILITY_DELTA = 1e-6


def group_advantage(rewards: Sequence[float], stability_delta: float = DEFAULT_STABILITY_DELTA) -> np.ndarray:
    """Standardize rewards within one group: (r - mean) / (population std + delta)."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise ValueError(f"group needs at least 2 rewards, got {r.size}")
    if stability_delta <= 0:
        raise ValueError("stability_delta must be positive")
    centered = r - r.mean()
    adv = centered / (r.std() + stability_delta)
    # remove the O(eps) residual mean left by round-off
    return adv - adv.mean()


def broadcast(advantage: float, episode: Episode) -> np.ndarray:
    if not episode.tokens:
        raise ValueError("cannot broadcast an advantage over an empty episode")
    return np.full(len(episode.tokens), float(advantage))


@dataclass
class GroupRollout:
    prompt: Prompt
    episodes: list[Episode]
    advantages: np.ndarray

    @classmethod
    def from_episodes(cls, prompt: Prompt, episodes: list[Episode],
                      stability_delta: float = DEFAULT_STABILITY_DELTA) -> "GroupRollout":
        adv = group_advantage([e.reward for e in episodes], stability_delta)
        return cls(prompt, episodes, adv)

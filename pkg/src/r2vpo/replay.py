"""FIFO replay buffer that evicts whole iterations."""
from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class ExperienceTuple:
    prompt_id: int
    tokens: tuple[int, ...]
    per_token_logp_off: tuple[float, ...]
    reward: float
    advantage: float
    iteration_tag: int

    def __post_init__(self):
        if len(self.tokens) != len(self.per_token_logp_off):
            raise ValueError("tokens and per_token_logp_off must have equal length")


class EmptyBufferError(RuntimeError):
    pass


class ReplayBuffer:
    def __init__(self, capacity_iterations: int = 4):
        if capacity_iterations < 1:
            raise ValueError("capacity_iterations must be >= 1")
        self.capacity_iterations = capacity_iterations
        self._slots: deque[tuple[int, list[ExperienceTuple]]] = deque()

    def push_iteration(self, iteration_tag: int, tuples: Iterable[ExperienceTuple]):
        if self._slots and iteration_tag <= self._slots[-1][0]:
            raise ValueError(f"iteration tag {iteration_tag} is not greater than stored tag {self._slots[-1][0]}")
        bucket = list(tuples)
        if any(t.iteration_tag != iteration_tag for t in bucket):
            raise ValueError("every tuple in a bucket must carry the bucket's iteration tag")
        self._slots.append((iteration_tag, bucket))
        while len(self._slots) > self.capacity_iterations:
            self._slots.popleft()

    @property
    def tags(self) -> list[int]:
        return [tag for tag, _ in self._slots]

    def __len__(self) -> int:
        return sum(len(b) for _, b in self._slots)

    def contents(self) -> list[ExperienceTuple]:
        """All stored tuples, oldest iteration first."""
        return [t for _, bucket in self._slots for t in bucket]

    def sample_uniform(self, batch_size: int, rng: np.random.Generator) -> list[ExperienceTuple]:
        """Uniform draw with replacement over every stored tuple."""
        items = self.contents()
        if not items:
            raise EmptyBufferError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, len(items), size=batch_size)
        return [items[i] for i in idx]

    def to_dict(self) -> dict:
        return {
            "capacity_iterations": self.capacity_iterations,
            "slots": [{"iteration_tag": tag, "tuples": [asdict(t) for t in b]} for tag, b in self._slots],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ReplayBuffer":
        buf = cls(doc["capacity_iterations"])
        for slot in doc["slots"]:
            buf.push_iteration(slot["iteration_tag"], [
                ExperienceTuple(t["prompt_id"], tuple(t["tokens"]), tuple(t["per_token_logp_off"]),
                                t["reward"], t["advantage"], t["iteration_tag"])
                for t in slot["tuples"]
            ])
        return buf


def staleness(item: ExperienceTuple, current_iteration: int) -> int:
    if current_iteration < item.iteration_tag:
        raise ValueError("current iteration precedes the tuple's iteration tag")
    return current_iteration - item.iteration_tag

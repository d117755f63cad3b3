"""On-policy and replay-based off-policy training loops."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dual as dual_mod
from .advantage import group_advantage
from .config import ADAPTIVE, ON_POLICY, PLAIN, R2VPO_OFF, RunConfig, TrainConfig, from_flat
from .env import RARE_TOKEN_BANDIT, Episode, Prompt, TaskSpec, episode_states, generate
from .objective import LossReport, TokenBatch, loss_gradient
from .policy import PolicyParams, softmax_rows
from .replay import ExperienceTuple, ReplayBuffer

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class NumericalAbort(RuntimeError):
    """Raised when a loss, gradient or parameter becomes non-finite."""

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def optimizer_step(params: PolicyParams, gradient: np.ndarray, config: TrainConfig,
                   state: AdamState | None = None) -> PolicyParams:
    """Ascent step on the surrogate. ``state`` is updated in place for adaptive_moments."""
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != params.logits.shape:
        raise ValueError(f"gradient shape {gradient.shape} != params shape {params.logits.shape}")
    if not np.all(np.isfinite(gradient)):
        raise NumericalAbort("non-finite gradient", {"gradient_nonfinite": int((~np.isfinite(gradient)).sum())})
    lr = config.step_size
    if config.optimizer == PLAIN:
        return PolicyParams(params.logits + lr * gradient)
    if config.optimizer == ADAPTIVE:
        if state is None:
            raise ValueError("adaptive_moments needs an AdamState")
        b1, b2 = ADAM_BETAS
        state.t += 1
        state.m[:] = b1 * state.m + (1 - b1) * gradient
        state.v[:] = b2 * state.v + (1 - b2) * gradient**2
        m_hat = state.m / (1 - b1**state.t)
        v_hat = state.v / (1 - b2**state.t)
        return PolicyParams(params.logits + lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS))
    raise ValueError(f"unknown optimizer {config.optimizer!r}")


@dataclass
class MetricsRow:
    iteration: int
    cumulative_rollouts: int
    mean_reward: float
    ratio_variance: float
    lam: float
    clipped_fraction: float
    clamp_events: int
    eureka_prob: float
    wall_ms: float
    gradient_steps: int = 0
    eureka_clipped_fraction: float = math.nan
    sign_flip_fraction: float = 0.0


@dataclass
class RunMetrics:
    rows: list[MetricsRow] = field(default_factory=list)
    final: "TrainerState | None" = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def first_crossing(self, column: str, threshold: float, by: str = "cumulative_rollouts"):
        """Value of ``by`` at the first row where ``column`` >= threshold, or None."""
        for r in self.rows:
            if getattr(r, column) >= threshold:
                return getattr(r, by)
        return None


@dataclass
class TrainerState:
    params: PolicyParams
    dual: dual_mod.DualState
    buffer: ReplayBuffer | None
    adam: AdamState | None
    rngs: dict[str, np.random.Generator]
    iteration: int = 0
    cumulative_rollouts: int = 0


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    data, rollout, replay = np.random.SeedSequence(seed).spawn(3)
    return {"data": np.random.default_rng(data), "rollout": np.random.default_rng(rollout),
            "replay": np.random.default_rng(replay)}


def to_tuples(episodes: list[Episode], advantages: np.ndarray, iteration: int) -> list[ExperienceTuple]:
    return [
        ExperienceTuple(e.prompt.id, tuple(e.tokens), tuple(e.per_token_logp), float(e.reward), float(a), iteration)
        for e, a in zip(episodes, advantages)
    ]


def build_batch(params: PolicyParams, items: list[ExperienceTuple]) -> TokenBatch:
    rows, actions, logp_off, adv, seq, pid = [], [], [], [], [], []
    for i, item in enumerate(items):
        n = len(item.tokens)
        rows.append(episode_states(params, item.prompt_id, item.tokens))
        actions.append(np.asarray(item.tokens, dtype=int))
        logp_off.append(np.asarray(item.per_token_logp_off, dtype=float))
        adv.append(np.full(n, item.advantage))
        seq.append(np.full(n, i))
        pid.append(np.full(n, item.prompt_id))
    return TokenBatch(np.concatenate(rows), np.concatenate(actions), np.concatenate(logp_off),
                      np.concatenate(adv), np.concatenate(seq), np.concatenate(pid))


class Trainer:
    """Runs either loop; holds all mutable state so it can be checkpointed mid-run."""

    def __init__(self, config: TrainConfig, state: TrainerState | None = None):
        self.config = config.resolved()
        self.task, params0, self.prompts = self.config.task.build()
        if state is None:
            buffer = ReplayBuffer(self.config.buffer_capacity) if self.config.algorithm == R2VPO_OFF else None
            adam = AdamState(np.zeros_like(params0.logits), np.zeros_like(params0.logits)) \
                if self.config.optimizer == ADAPTIVE else None
            state = TrainerState(params0, self.config.dual_state(), buffer, adam, make_rngs(self.config.seed))
        self.state = state

    # -- phases -----------------------------------------------------------

    def choose_prompts(self) -> list[Prompt]:
        k = self.config.prompts_per_iteration
        n = len(self.prompts)
        rng = self.state.rngs["data"]
        if k <= n:
            idx = np.sort(rng.choice(n, size=k, replace=False))
        else:
            idx = np.sort(rng.integers(0, n, size=k))
        return [self.prompts[i] for i in idx]

    def collect(self) -> tuple[list[Episode], np.ndarray]:
        """One group of G episodes per chosen prompt, with group-normalized advantages."""
        g = self.config.group_size
        prompts = self.choose_prompts()
        flat = [p for p in prompts for _ in range(g)]
        if not np.all(np.isfinite(self.state.params.logits)):
            raise NumericalAbort("non-finite parameters before rollout", {"iteration": self.state.iteration})
        episodes = generate(self.task, flat, self.state.params, self.state.rngs["rollout"])
        adv = np.concatenate([
            group_advantage([e.reward for e in episodes[i * g:(i + 1) * g]], self.config.stability_delta)
            for i in range(len(prompts))
        ])
        return episodes, adv

    def gradient_step(self, items: list[ExperienceTuple]) -> tuple[LossReport, np.ndarray | None]:
        st = self.state
        batch = build_batch(st.params, items)
        grad, rep = loss_gradient(batch, st.params, self.config.loss_hyper(st.dual.lam))
        if not math.isfinite(rep.loss_value):
            raise NumericalAbort("non-finite loss", self._dump(rep))
        st.params = optimizer_step(st.params, grad, self.config, st.adam)
        if not np.all(np.isfinite(st.params.logits)):
            raise NumericalAbort("non-finite parameters after update", self._dump(rep))
        st.dual = dual_mod.update(st.dual, rep.ratio_variance_estimate)
        return rep, self._eureka_mask(batch)

    def _eureka_mask(self, batch: TokenBatch) -> np.ndarray | None:
        if self.task.kind != RARE_TOKEN_BANDIT:
            return None
        return batch.actions == self.task.params["eureka_index"]

    def _dump(self, rep: LossReport) -> dict:
        return {
            "iteration": self.state.iteration,
            "lambda": self.state.dual.lam,
            "loss_value": rep.loss_value,
            "max_abs_ratio": float(np.max(np.abs(rep.ratios))) if rep.ratios.size else None,
            "clamp_events": rep.clamp_events,
        }

    def eureka_prob(self) -> float:
        if self.task.kind != RARE_TOKEN_BANDIT:
            return math.nan
        p = self.state.params
        rows = p.row_indices(np.arange(p.num_prompts), np.zeros(p.num_prompts, int), np.zeros(p.num_prompts, int))
        probs, _ = softmax_rows(p.table[rows])
        return float(probs[:, self.task.params["eureka_index"]].mean())

    def minibatches(self, items: list[ExperienceTuple]) -> list[list[ExperienceTuple]]:
        """Split whole groups into ``config.minibatches`` contiguous chunks."""
        g = self.config.group_size
        n_groups = len(items) // g
        bounds = np.linspace(0, n_groups, self.config.minibatches + 1).round().astype(int)
        return [items[bounds[i] * g:bounds[i + 1] * g] for i in range(self.config.minibatches)]

    def iterate(self) -> MetricsRow:
        cfg, st = self.config, self.state
        t0 = time.perf_counter()
        episodes, adv = self.collect()
        fresh = to_tuples(episodes, adv, st.iteration)
        if cfg.algorithm in ON_POLICY:
            steps = self.minibatches(fresh)
        else:
            st.buffer.push_iteration(st.iteration, fresh)
            steps = []
            for _ in range(cfg.utd_ratio):
                if cfg.replay_batch_size == 0:
                    steps.append(st.buffer.contents())
                else:
                    steps.append(st.buffer.sample_uniform(cfg.replay_batch_size, st.rngs["replay"]))
        outcomes = [self.gradient_step(items) for items in steps]
        reports = [rep for rep, _ in outcomes]
        st.cumulative_rollouts += len(episodes)
        eureka_clipped = [rep.clipped_mask[mask] for rep, mask in outcomes if mask is not None]
        eureka_clipped = np.concatenate(eureka_clipped) if eureka_clipped else np.zeros(0, bool)
        row = MetricsRow(
            iteration=st.iteration,
            cumulative_rollouts=st.cumulative_rollouts,
            mean_reward=float(np.mean([e.reward for e in episodes])),
            ratio_variance=float(np.mean([r.ratio_variance_estimate for r in reports])),
            lam=st.dual.lam,
            clipped_fraction=float(np.mean([r.clipped_fraction for r in reports])),
            clamp_events=int(sum(r.clamp_events for r in reports)),
            eureka_prob=self.eureka_prob(),
            wall_ms=(time.perf_counter() - t0) * 1e3 if cfg.wall_clock else 0.0,
            gradient_steps=len(reports),
            eureka_clipped_fraction=float(eureka_clipped.mean()) if eureka_clipped.size else math.nan,
            sign_flip_fraction=float(np.mean([r.sign_flip_fraction for r in reports])),
        )
        st.iteration += 1
        return row

    def run(self, iterations: int | None = None, checkpoint_dir: str | Path | None = None,
            run_config: RunConfig | None = None) -> RunMetrics:
        n = self.config.iterations if iterations is None else iterations
        metrics = RunMetrics()
        every = self.config.checkpoint_every
        for _ in range(n):
            metrics.rows.append(self.iterate())
            if checkpoint_dir is not None and every and self.state.iteration % every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"checkpoint_{self.state.iteration:06d}.json",
                                self, run_config)
        metrics.final = self.state
        return metrics


def run_on_policy(config: TrainConfig) -> RunMetrics:
    if config.algorithm not in ON_POLICY:
        raise ValueError(f"run_on_policy needs one of {ON_POLICY}, got {config.algorithm!r}")
    return Trainer(config).run()


def run_off_policy(config: TrainConfig) -> RunMetrics:
    if config.algorithm != R2VPO_OFF:
        raise ValueError(f"run_off_policy needs algorithm {R2VPO_OFF!r}, got {config.algorithm!r}")
    return Trainer(config).run()


def run(config: TrainConfig) -> RunMetrics:
    return run_off_policy(config) if config.algorithm == R2VPO_OFF else run_on_policy(config)


# -- checkpoints --------------------------------------------------------------

def checkpoint_dict(trainer: Trainer, run_config: RunConfig | None = None) -> dict:
    st = trainer.state
    rc = run_config or RunConfig(trainer.config)
    return {
        "config": rc.to_flat(),
        "iteration": st.iteration,
        "cumulative_rollouts": st.cumulative_rollouts,
        "params": st.params.to_dict(),
        "dual": asdict(st.dual),
        "buffer": st.buffer.to_dict() if st.buffer is not None else None,
        "adam": None if st.adam is None else {"m": st.adam.m.ravel().tolist(), "v": st.adam.v.ravel().tolist(),
                                             "t": st.adam.t},
        "rng": {name: g.bit_generator.state for name, g in st.rngs.items()},
    }


def save_checkpoint(path: str | Path, trainer: Trainer, run_config: RunConfig | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(checkpoint_dict(trainer, run_config)))


def load_checkpoint(path: str | Path) -> tuple[Trainer, RunConfig]:
    doc = json.loads(Path(path).read_text())
    rc = from_flat(doc["config"]).resolved()
    params = PolicyParams.from_dict(doc["params"])
    rngs = make_rngs(rc.train.seed)
    for name, g in rngs.items():
        g.bit_generator.state = doc["rng"][name]
    adam = None
    if doc["adam"] is not None:
        shape = params.logits.shape
        adam = AdamState(np.asarray(doc["adam"]["m"]).reshape(shape), np.asarray(doc["adam"]["v"]).reshape(shape),
                         doc["adam"]["t"])
    state = TrainerState(
        params=params,
        dual=dual_mod.DualState(**doc["dual"]),
        buffer=ReplayBuffer.from_dict(doc["buffer"]) if doc["buffer"] is not None else None,
        adam=adam,
        rngs=rngs,
        iteration=doc["iteration"],
        cumulative_rollouts=doc["cumulative_rollouts"],
    )
    return Trainer(rc.train, state), rc

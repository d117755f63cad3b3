"""Run configuration: dataclasses plus a strict flat YAML mapping."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from . import env
from .dual import DualState
from .objective import CLIP, R2VPO, TOKEN_MEAN, SEQUENCE_MEAN, LossHyper
from .policy import PolicyParams

GRPO = "grpo"
GRPO_CH = "grpo_ch"
R2VPO_ON = "r2vpo_on"
R2VPO_OFF = "r2vpo_off"
ALGORITHMS = (GRPO, GRPO_CH, R2VPO_ON, R2VPO_OFF)
ON_POLICY = (GRPO, GRPO_CH, R2VPO_ON)

PLAIN = "plain_gradient"
ADAPTIVE = "adaptive_moments"
DEFAULT_STEP = {PLAIN: 0.05, ADAPTIVE: 0.01}
CLIP_HIGH_DEFAULT = 0.28


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class TaskConfig:
    kind: str = env.SEQUENCE_SUM
    vocab_size: int = 10
    max_len: int = 3
    num_prompts: int = 16
    num_buckets: int = 64
    target_low: int = 8
    target_high: int = 19
    eureka_index: int = 7
    initial_logit_gap: float = 5.0

    def build(self) -> tuple[env.TaskSpec, PolicyParams, list[env.Prompt]]:
        """Task, initial parameters and the prompt dataset."""
        if self.kind == env.RARE_TOKEN_BANDIT:
            task, p0 = env.make_rare_token_bandit(self.vocab_size, self.eureka_index,
                                                  self.initial_logit_gap, self.num_buckets)
            params = PolicyParams.zeros(self.num_prompts, 1, self.num_buckets, self.vocab_size)
            params.logits[:] = p0.logits[0]
        else:
            task = env.make_sequence_sum(self.vocab_size, self.max_len)
            params = PolicyParams.zeros(self.num_prompts, self.max_len, self.num_buckets, self.vocab_size)
        prompts = env.make_prompts(task, self.num_prompts, target_low=self.target_low,
                                   target_high=self.target_high)
        return task, params, prompts


@dataclass
class TrainConfig:
    algorithm: str = GRPO
    group_size: int = 8
    prompts_per_iteration: int = 16
    iterations: int = 500
    step_size: float | None = None
    optimizer: str = PLAIN
    utd_ratio: int = 2
    buffer_capacity: int = 4
    replay_batch_size: int | None = None
    minibatches: int = 1
    lambda_init: float = 0.04
    eta_lambda: float = 1e-3
    trust_delta: float = 0.01
    dual_mode: str = "fixed"
    ema_beta: float = 0.0
    eps_low: float = 0.2
    eps_high: float | None = None
    stability_delta: float = 1e-6
    aggregation: str = TOKEN_MEAN
    seed: int = 0
    checkpoint_every: int = 0
    wall_clock: bool = False
    task: TaskConfig = field(default_factory=TaskConfig)

    def resolved(self) -> "TrainConfig":
        """Copy with every ``None`` default materialized, validated."""
        cfg = dataclasses.replace(self, task=dataclasses.replace(self.task))
        if cfg.step_size is None:
            cfg.step_size = DEFAULT_STEP.get(cfg.optimizer, 0.05)
        if cfg.eps_high is None:
            cfg.eps_high = CLIP_HIGH_DEFAULT if cfg.algorithm == GRPO_CH else cfg.eps_low
        if cfg.replay_batch_size is None:
            cfg.replay_batch_size = cfg.prompts_per_iteration * cfg.group_size
        cfg.validate()
        return cfg

    def validate(self):
        checks = [
            (self.algorithm in ALGORITHMS, "algorithm", f"algorithm must be one of {ALGORITHMS}"),
            (self.group_size >= 2, "group_size", "group_size must be >= 2"),
            (self.prompts_per_iteration >= 1, "prompts_per_iteration", "prompts_per_iteration must be >= 1"),
            (self.iterations >= 0, "iterations", "iterations must be >= 0"),
            (self.step_size is not None and self.step_size > 0, "step_size", "step_size must be positive"),
            (self.optimizer in (PLAIN, ADAPTIVE), "optimizer", f"optimizer must be {PLAIN} or {ADAPTIVE}"),
            (self.utd_ratio >= 1, "utd_ratio", "utd_ratio must be >= 1"),
            (self.buffer_capacity >= 1, "buffer_capacity", "buffer_capacity must be >= 1"),
            (self.replay_batch_size is None or self.replay_batch_size >= 0, "replay_batch_size",
             "replay_batch_size must be >= 0 (0 = whole buffer)"),
            (self.minibatches >= 1, "minibatches", "minibatches must be >= 1"),
            (self.minibatches <= self.prompts_per_iteration, "minibatches",
             "minibatches cannot exceed prompts_per_iteration"),
            (self.eps_low > 0 and (self.eps_high is None or self.eps_high > 0), "eps_low", "clip widths must be positive"),
            (self.stability_delta > 0, "stability_delta", "stability_delta must be positive"),
            (self.aggregation in (TOKEN_MEAN, SEQUENCE_MEAN), "aggregation", "unknown aggregation"),
            (self.checkpoint_every >= 0, "checkpoint_every", "checkpoint_every must be >= 0"),
            (self.task.kind in env.TASK_KINDS, "task", f"task must be one of {env.TASK_KINDS}"),
            (self.task.num_prompts >= 1, "num_prompts", "num_prompts must be >= 1"),
            (self.task.num_buckets >= 1, "num_buckets", "num_buckets must be >= 1"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(msg, key)
        try:
            self.dual_state()
        except ValueError as e:
            raise ConfigError(str(e), "dual_mode") from e

    @property
    def loss_kind(self) -> str:
        return CLIP if self.algorithm in (GRPO, GRPO_CH) else R2VPO

    def loss_hyper(self, lam: float) -> LossHyper:
        return LossHyper(self.loss_kind, self.eps_low, self.eps_high, lam, self.trust_delta, self.aggregation)

    def dual_state(self) -> DualState:
        return DualState(self.lambda_init, self.eta_lambda, self.trust_delta, self.dual_mode, self.ema_beta)


# flat document key -> TaskConfig field
TASK_KEYS = {
    "task": "kind",
    "vocab_size": "vocab_size",
    "max_len": "max_len",
    "num_prompts": "num_prompts",
    "num_buckets": "num_buckets",
    "target_low": "target_low",
    "target_high": "target_high",
    "eureka_index": "eureka_index",
    "initial_logit_gap": "initial_logit_gap",
}
OUTPUT_KEYS = {"out_dir": (str, "runs/out"), "reward_threshold": (float, 0.8)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig) if f.name != "task"}
ALL_KEYS = list(TRAIN_KEYS) + list(TASK_KEYS) + list(OUTPUT_KEYS)


@dataclass
class RunConfig:
    train: TrainConfig
    out_dir: str = "runs/out"
    reward_threshold: float = 0.8

    def to_flat(self) -> dict[str, Any]:
        cfg = self.train
        flat: dict[str, Any] = {}
        for f in fields(TrainConfig):
            if f.name != "task":
                flat[f.name] = getattr(cfg, f.name)
        for key, attr in TASK_KEYS.items():
            flat[key] = getattr(cfg.task, attr)
        flat["out_dir"] = self.out_dir
        flat["reward_threshold"] = self.reward_threshold
        return flat

    def resolved(self) -> "RunConfig":
        return RunConfig(self.train.resolved(), self.out_dir, self.reward_threshold)


def _field_type(name: str):
    hints = {f.name: f.type for f in fields(TrainConfig)} | {f.name: f.type for f in fields(TaskConfig)}
    return hints[name]


def _coerce(key: str, attr: str, value: Any, declared: str) -> Any:
    if value is None and "None" in declared:
        return None
    base = declared.replace(" | None", "")
    if base == "bool":
        if isinstance(value, bool):
            return value
    elif base == "int":
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif base == "float":
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif base == "str":
        if isinstance(value, str):
            return value
    raise ConfigError(f"config key {key!r} expects {base}, got {value!r}", key)


def from_flat(doc: dict[str, Any]) -> RunConfig:
    """Build a RunConfig from a flat mapping. Unknown keys are fatal."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping of key: value")
    for key in doc:
        if key not in ALL_KEYS:
            raise ConfigError(f"unknown config key {key!r}", key)
    train_kwargs, task_kwargs = {}, {}
    for key, value in doc.items():
        if key in TRAIN_KEYS:
            train_kwargs[key] = _coerce(key, key, value, str(_field_type(key)))
        elif key in TASK_KEYS:
            attr = TASK_KEYS[key]
            task_kwargs[attr] = _coerce(key, attr, value, str(_field_type(attr)))
    out = {}
    for key, (typ, default) in OUTPUT_KEYS.items():
        if key in doc:
            out[key] = _coerce(key, key, doc[key], typ.__name__)
    task = TaskConfig(**task_kwargs)
    if task.kind == env.RARE_TOKEN_BANDIT and "max_len" not in task_kwargs:
        task.max_len = 1
    if task.kind == env.RARE_TOKEN_BANDIT and "num_buckets" not in task_kwargs:
        task.num_buckets = 1
    return RunConfig(TrainConfig(**train_kwargs, task=task), **out)


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse override value for {key!r}: {e}", key) from e
    return key, value


def load(path: str | Path | None, overrides: list[str] = (), seed: int | None = None) -> RunConfig:
    """Read a flat YAML run config, apply ``key=value`` overrides, resolve defaults."""
    doc: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"malformed config {path}: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a flat mapping")
    for item in overrides:
        key, value = parse_override(item)
        doc[key] = value
    if seed is not None:
        doc["seed"] = seed
    return from_flat(doc).resolved()


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_flat(), sort_keys=False, default_flow_style=False)


def shipped_config_path(name: str) -> Path:
    """Path of a config shipped inside the package (``configs/<name>.yaml``)."""
    path = Path(__file__).parent / "configs" / f"{name}.yaml"
    if not path.exists():
        raise FileNotFoundError(path)
    return path

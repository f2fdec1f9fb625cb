"""Group Relative Policy Optimization for TinyLM, plus the one-dimension-at-a-time sweep runner."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .evalharness import EmptyDataset, eval_open_ended
from .policy import (
    GroupTooSmall,
    NonFiniteLogits,
    PolicyParams,
    SampleGroup,
    SamplingConfig,
    Vocab,
    _prompt_logits,
    _softmax,
    _step_logits,
    encode_prompt,
    init_params,
    sample_group,
    save_params,
    sequence_logprob_and_grad,
)
from .qpa_extract import Dataset, QAExample
from .reward import RewardConfig, combined_reward, extract_final_answer, tokenize_answer

logger = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "EmptyDataset",
    "GroupTooSmall",
    "NonFiniteLoss",
    "SampleGroup",
    "SweepReport",
    "SweepSpec",
    "TrainConfig",
    "TrainResult",
    "TrainStepReport",
    "TrainerState",
    "compute_advantages",
    "grpo_step",
    "kl_estimate",
    "sweep",
    "train",
]


class ConfigError(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, example_id: str):
        super().__init__(f"non-finite loss at step {step} on example {example_id}")
        self.step = step
        self.example_id = example_id


@dataclass(frozen=True)
class TrainConfig:
    """Trainer knobs.

    ``optimizer`` is ``"sgd"`` (plain gradient descent, the default) or
    ``"adam"``. ``advantage_norm`` is ``"mean"`` (reward minus group mean)
    or ``"std"`` (additionally divided by the group standard deviation).
    The KL penalty enters as an additive loss term; shaping per-token
    rewards with it instead is a documented variant that is not built.
    """

    group_size: int = 8
    learning_rate: float = 1e-4
    kl_coefficient: float = 0.01
    reward_scaling: float = 2.0
    max_steps: int = 150
    batch_size: int = 1
    eval_every: int = 50
    grad_clip_norm: float = 1.0
    seed: int = 0
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    reward_cfg: RewardConfig = field(default_factory=RewardConfig)
    optimizer: str = "sgd"
    advantage_norm: str = "mean"
    eval_threshold: float = 0.65
    feature_dim: int = 256
    hash_seed: int = 0

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ConfigError("group_size must be ≥ 2")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.kl_coefficient < 0:
            raise ConfigError("kl_coefficient must be ≥ 0")
        if not self.reward_scaling > 0:
            raise ConfigError("reward_scaling must be > 0")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be ≥ 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be ≥ 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be ≥ 1")
        if not self.grad_clip_norm > 0:
            raise ConfigError("grad_clip_norm must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.advantage_norm not in ("mean", "std"):
            raise ConfigError(f"unknown advantage_norm {self.advantage_norm!r}")
        if not 0 <= self.eval_threshold <= 1:
            raise ConfigError("eval_threshold must be in [0, 1]")

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrainStepReport:
    step: int
    mean_reward: float
    loss: float
    kl_estimate: float
    grad_norm: float

    def to_record(self) -> dict:
        return {
            "step": self.step,
            "mean_reward": self.mean_reward,
            "loss": self.loss,
            "kl_estimate": self.kl_estimate,
            "grad_norm": self.grad_norm,
        }


@dataclass
class TrainerState:
    params: PolicyParams
    reference: PolicyParams
    cfg: TrainConfig
    step: int = 0
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None

    @classmethod
    def create(cls, params: PolicyParams, cfg: TrainConfig) -> TrainerState:
        return cls(params=params.copy(), reference=params.copy(), cfg=cfg)


def compute_advantages(rewards: Sequence[float], normalize_std: bool = False) -> list[float]:
    """Reward minus the group mean; optionally divided by the group std."""
    if len(rewards) < 2:
        raise GroupTooSmall("need at least 2 rewards per group")
    r = np.asarray(rewards, dtype=np.float64)
    adv = r - r.mean()
    if normalize_std:
        std = r.std()
        adv = adv / std if std > 0 else np.zeros_like(adv)
    # re-center to absorb the rounding left by the mean
    adv = adv - adv.mean()
    return [float(a) for a in adv]


def _prefix_states(params: PolicyParams, tokens: Sequence[int]):
    prev = params.vocab.bos_id
    for t in tokens:
        yield prev, t
        prev = t


def kl_estimate(
    current: PolicyParams, reference: PolicyParams, group: SampleGroup, example: QAExample
) -> float:
    """Mean over sampled tokens of log p_current(token) - log p_reference(token)."""
    f_cur = encode_prompt(example, current)
    f_ref = encode_prompt(example, reference)
    base_cur = _prompt_logits(current, f_cur)
    base_ref = _prompt_logits(reference, f_ref)
    total = 0.0
    count = 0
    for gen in group.generations:
        for prev, tok in _prefix_states(current, gen.tokens):
            p_cur = _softmax(_step_logits(current, base_cur, prev))[tok]
            p_ref = _softmax(_step_logits(reference, base_ref, prev))[tok]
            with np.errstate(divide="ignore", invalid="ignore"):
                total += float(np.log(p_cur) - np.log(p_ref))
            count += 1
    return total / count if count else 0.0


def _kl_grad(
    current: PolicyParams, reference: PolicyParams, group: SampleGroup, example: QAExample
) -> np.ndarray:
    """Gradient of the mean exact per-position KL(current || reference) over
    the prefixes visited by the group; a deterministic, low-variance stand-in
    for differentiating the sampled estimator."""
    d = current.feature_dim
    features = encode_prompt(example, current)
    base_cur = _prompt_logits(current, features)
    base_ref = _prompt_logits(reference, encode_prompt(example, reference))
    grad = np.zeros_like(current.weight_matrix)
    residual_sum = np.zeros(len(current.vocab))
    count = 0
    for gen in group.generations:
        for prev, _ in _prefix_states(current, gen.tokens):
            p = _softmax(_step_logits(current, base_cur, prev))
            q = _softmax(_step_logits(reference, base_ref, prev))
            log_ratio = np.log(p) - np.log(q)
            kl = float(p @ log_ratio)
            g = p * (log_ratio - kl)
            residual_sum += g
            grad[:, d + prev] += g
            count += 1
    grad[:, :d] += np.outer(residual_sum, features)
    return grad / count if count else grad


def score_group(group: SampleGroup, example: QAExample, cfg: TrainConfig) -> list[float]:
    """Pre-scaling rewards; fills in scaled rewards and advantages on the group."""
    raw = [
        combined_reward(extract_final_answer(g.text, cfg.reward_cfg), example.answer, cfg.reward_cfg).reward
        for g in group.generations
    ]
    group.rewards = [cfg.reward_scaling * r for r in raw]
    group.advantages = compute_advantages(group.rewards, normalize_std=cfg.advantage_norm == "std")
    return raw


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed % (1 << 64), step]).generate_state(1, np.uint64)[0])


def grpo_step(
    state: TrainerState, batch: Sequence[QAExample], learning_rate: float | None = None
) -> TrainStepReport:
    """One update: sample, score, center, accumulate, clip, descend.

    Loss per step is ``-(1/(B*K)) * sum(A * logprob) + kl_coefficient * mean(kl)``.
    """
    cfg = state.cfg
    params = state.params
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    step = state.step + 1
    seed = _step_seed(cfg.seed, step)
    scale = 1.0 / (len(batch) * cfg.group_size)

    grad = np.zeros_like(params.weight_matrix)
    pg_loss = 0.0
    kl_total = 0.0
    rewards_seen: list[float] = []
    for example in batch:
        try:
            group = sample_group(params, example, cfg.group_size, cfg.sampling, seed)
            rewards_seen += score_group(group, example, cfg)
            features = encode_prompt(example, params)
            for gen, adv in zip(group.generations, group.advantages):
                if adv == 0.0:
                    continue
                lp, g = sequence_logprob_and_grad(params, example, gen.tokens, features)
                pg_loss -= scale * adv * lp
                grad -= scale * adv * g
            kl = kl_estimate(params, state.reference, group, example)
            kl_total += kl
            if cfg.kl_coefficient > 0:
                grad += (cfg.kl_coefficient / len(batch)) * _kl_grad(params, state.reference, group, example)
        except NonFiniteLogits as exc:
            raise NonFiniteLoss(step, example.question_id) from exc
        if not (math.isfinite(pg_loss) and math.isfinite(kl) and np.all(np.isfinite(grad))):
            raise NonFiniteLoss(step, example.question_id)

    kl_mean = kl_total / len(batch)
    loss = pg_loss + cfg.kl_coefficient * kl_mean
    grad_norm = float(np.linalg.norm(grad))
    if grad_norm > cfg.grad_clip_norm:
        grad = grad * (cfg.grad_clip_norm / grad_norm)
    _apply_update(state, grad, lr)
    state.step = step
    if not np.all(np.isfinite(state.params.weight_matrix)):
        raise NonFiniteLoss(step, batch[-1].question_id)
    return TrainStepReport(
        step=step,
        mean_reward=float(np.mean(rewards_seen)),
        loss=float(loss),
        kl_estimate=float(kl_mean),
        grad_norm=grad_norm,
    )


def _apply_update(state: TrainerState, grad: np.ndarray, lr: float) -> None:
    w = state.params.weight_matrix
    if state.cfg.optimizer == "sgd":
        w -= lr * grad
        return
    b1, b2, eps = 0.9, 0.999, 1e-8
    if state.adam_m is None:
        state.adam_m = np.zeros_like(w)
        state.adam_v = np.zeros_like(w)
    t = state.step + 1
    state.adam_m = b1 * state.adam_m + (1 - b1) * grad
    state.adam_v = b2 * state.adam_v + (1 - b2) * grad * grad
    m_hat = state.adam_m / (1 - b1**t)
    v_hat = state.adam_v / (1 - b2**t)
    w -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainResult:
    final_params: PolicyParams
    best_params: PolicyParams
    log: list[dict]
    best_step: int = 0
    best_score: float = float("-inf")


def vocab_from_dataset(data: Dataset) -> Vocab:
    words = sorted({w for ex in data for w in tokenize_answer(ex.answer)})
    return Vocab.from_words(words)


def _dumps(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False)


def train(
    train_set: Dataset,
    val_set: Dataset,
    cfg: TrainConfig,
    params: PolicyParams | None = None,
    metrics_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    lr_schedule: Callable[[int], float] | None = None,
    selection_metric: str = "val_mean_reward",
    on_eval: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run ``cfg.max_steps`` GRPO steps over seeded-shuffled batches.

    Every ``eval_every`` steps (and at the last step) the policy is scored
    on ``val_set`` with greedy open-ended decoding and the best-scoring
    parameters are retained. The reference policy is the initial snapshot.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptyDataset("train and validation sets must be non-empty")
    if selection_metric not in ("val_mean_reward", "val_top1"):
        raise ConfigError(f"unknown selection metric {selection_metric!r}")
    if params is None:
        params = init_params(vocab_from_dataset(train_set), cfg.feature_dim, cfg.hash_seed)
    state = TrainerState.create(params, cfg)
    examples = list(train_set)

    log: list[dict] = []
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    def emit(record: dict) -> None:
        log.append(record)
        if sink:
            sink.write(_dumps(record) + "\n")

    best = params.copy()
    best_score = float("-inf")
    best_step = 0
    order: list[int] = []
    epoch = 0
    try:
        for step in range(1, cfg.max_steps + 1):
            batch = []
            while len(batch) < cfg.batch_size:
                if not order:
                    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed % (1 << 64), epoch])))
                    order = list(rng.permutation(len(examples)))
                    epoch += 1
                batch.append(examples[order.pop(0)])
            lr = lr_schedule(step) if lr_schedule else None
            report = grpo_step(state, batch, learning_rate=lr)
            emit(report.to_record())

            if step % cfg.eval_every == 0 or step == cfg.max_steps:
                ev = eval_open_ended(
                    state.params, val_set, cfg.reward_cfg, cfg.eval_threshold, max_tokens=cfg.sampling.max_tokens
                )
                rec = {"step": step, "split": "val", "mean_reward": ev.mean_reward, "top1": ev.top1_accuracy}
                emit(rec)
                if on_eval:
                    on_eval(rec)
                score = ev.mean_reward if selection_metric == "val_mean_reward" else ev.top1_accuracy
                if ckpt_dir:
                    save_params(state.params, ckpt_dir / f"step-{step:04d}.tlm")
                if score > best_score:
                    best_score = score
                    best_step = step
                    best = state.params.copy()
                    if ckpt_dir:
                        save_params(best, ckpt_dir / "best.tlm")
    finally:
        if sink:
            sink.close()
    return TrainResult(state.params, best, log, best_step, best_score)


# -- sweeps ------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    base: TrainConfig
    dimension: str
    values: tuple
    selection_metric: str = "val_mean_reward"

    def __post_init__(self) -> None:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        if self.dimension not in names:
            raise ConfigError(f"unknown sweep dimension {self.dimension!r}")
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        if self.selection_metric not in ("val_mean_reward", "val_top1"):
            raise ConfigError(f"unknown selection metric {self.selection_metric!r}")
        object.__setattr__(self, "values", tuple(self.values))


@dataclass
class SweepRow:
    value: object
    selection: float | None = None
    final: float | None = None
    error: str | None = None
    best: bool = False

    def to_record(self, dimension: str, metric: str) -> dict:
        return {
            "dimension": dimension,
            "value": self.value,
            "metric": metric,
            "selection": self.selection,
            "final": self.final,
            "best": self.best,
            "error": self.error,
        }


@dataclass
class SweepReport:
    dimension: str
    selection_metric: str
    rows: list[SweepRow]

    @property
    def winner(self) -> SweepRow | None:
        return next((r for r in self.rows if r.best), None)

    def adopt(self, base: TrainConfig) -> TrainConfig:
        """``base`` with the swept field set to the winning value."""
        if self.winner is None:
            return base
        return base.replace(**{self.dimension: self.winner.value})

    def to_tsv(self) -> str:
        lines = [f"{self.dimension}\t{self.selection_metric}\tfinal_{self.selection_metric}\tbest"]
        for r in self.rows:
            if r.error is not None:
                lines.append(f"{r.value}\tERROR\tERROR\t{r.error}")
            else:
                lines.append(f"{r.value}\t{r.selection:.4f}\t{r.final:.4f}\t{'*' if r.best else ''}")
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        return "".join(_dumps(r.to_record(self.dimension, self.selection_metric)) + "\n" for r in self.rows)


def sweep(
    spec: SweepSpec,
    train_set: Dataset,
    val_set: Dataset,
    params: PolicyParams | None = None,
) -> SweepReport:
    """Train once per candidate value with everything else fixed at ``spec.base``."""
    def sort_key(v):
        return (0, v, "") if isinstance(v, (int, float)) else (1, 0, str(v))

    rows = []
    for value in sorted(spec.values, key=sort_key):
        row = SweepRow(value)
        try:
            cfg = spec.base.replace(**{spec.dimension: value})
            result = train(
                train_set, val_set, cfg, params=params.copy() if params is not None else None,
                selection_metric=spec.selection_metric,
            )
            row.selection = result.best_score
            final_eval = eval_open_ended(
                result.final_params, val_set, cfg.reward_cfg, cfg.eval_threshold, max_tokens=cfg.sampling.max_tokens
            )
            row.final = final_eval.mean_reward if spec.selection_metric == "val_mean_reward" else final_eval.top1_accuracy
        except Exception as exc:  # a failing row must not abort the sweep
            logger.warning("sweep row %s=%r failed: %s", spec.dimension, value, exc)
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    scored = [r for r in rows if r.error is None]
    if scored:
        max(scored, key=lambda r: r.selection).best = True
    return SweepReport(spec.dimension, spec.selection_metric, rows)


def sequential_sweep(
    base: TrainConfig,
    stages: Sequence[tuple[str, Sequence]],
    train_set: Dataset,
    val_set: Dataset,
    params: PolicyParams | None = None,
    selection_metric: str = "val_mean_reward",
) -> tuple[TrainConfig, list[SweepReport]]:
    """Sweep one dimension per stage; each stage's base adopts earlier winners."""
    reports = []
    for dimension, values in stages:
        report = sweep(SweepSpec(base, dimension, tuple(values), selection_metric), train_set, val_set, params)
        reports.append(report)
        base = report.adopt(base)
    return base, reports

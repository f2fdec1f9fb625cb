"""Question-pause-answer mining from educational TV transcripts and GRPO training of a tiny answer policy."""

from __future__ import annotations

from .evalharness import EvalReport, McqItem, eval_mcq, eval_open_ended, make_mcq
from .grpo import SweepSpec, TrainConfig, compute_advantages, grpo_step, kl_estimate, sweep, train
from .policy import PolicyParams, SamplingConfig, Vocab, init_params, load_params, save_params
from .qpa_extract import Dataset, QAExample, QpaConfig, build_examples, split_dataset
from .reward import RewardConfig, combined_reward, levenshtein, token_f1
from .transcript import Cue, CueList, parse_transcript

__version__ = "0.1.0"

__all__ = [
    "Cue",
    "CueList",
    "Dataset",
    "EvalReport",
    "McqItem",
    "PolicyParams",
    "QAExample",
    "QpaConfig",
    "RewardConfig",
    "SamplingConfig",
    "SweepSpec",
    "TrainConfig",
    "Vocab",
    "build_examples",
    "combined_reward",
    "compute_advantages",
    "eval_mcq",
    "eval_open_ended",
    "grpo_step",
    "init_params",
    "kl_estimate",
    "levenshtein",
    "load_params",
    "make_mcq",
    "parse_transcript",
    "save_params",
    "split_dataset",
    "sweep",
    "token_f1",
    "train",
]

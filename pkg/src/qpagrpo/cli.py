"""Command-line entry point: extract, stats, split, train, eval, sweep, reward and synth.

Every subcommand reads an optional JSON run config (``--config``) and
accepts dotted overrides for any key in it, e.g. ``--train.group_size 8``.
Exit status: 0 on success, 1 on errors, 2 when extraction yields no
examples.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .evalharness import EmptyDataset, InsufficientAnswers, eval_mcq, eval_open_ended, make_mcq
from .grpo import ConfigError, NonFiniteLoss, SweepSpec, TrainConfig, sequential_sweep, sweep, train
from .policy import SamplingConfig, Vocab, init_params, load_params
from .qpa_extract import Dataset, InsufficientEpisodes, QpaConfig, build_examples, dataset_stats, split_dataset
from .reward import EmptyGold, RewardConfig, combined_reward, tokenize_answer
from .synthetic import make_curriculum, write_episode_fixtures
from .transcript import TranscriptError, parse_transcript

logger = logging.getLogger("qpagrpo")

EXIT_OK, EXIT_ERROR, EXIT_EMPTY = 0, 1, 2
TRANSCRIPT_SUFFIXES = (".srt", ".vtt")

# fields that live elsewhere in the run config rather than under "train"
_TRAIN_EXCLUDED = ("seed", "reward_cfg", "reward_scaling", "sampling")


class CliError(Exception):
    """A user-facing failure; the message is printed and the exit status is 1."""


@dataclass
class Paths:
    transcripts_dir: str = "transcripts"
    dataset_out: str = "dataset.jsonl"
    checkpoints_dir: str = "checkpoints"
    logs_dir: str = "logs"
    vocab: str | None = None

    def __post_init__(self) -> None:
        for f in ("transcripts_dir", "dataset_out", "checkpoints_dir", "logs_dir"):
            if not getattr(self, f):
                raise ConfigError(f"paths.{f} must be non-empty")


@dataclass
class EvalSettings:
    n_options: int = 4
    mcq_mode: str = "score_options"
    threshold: float = 0.65
    max_tokens: int = 16


@dataclass
class RunConfig:
    seed: int = 0
    qpa: QpaConfig = field(default_factory=QpaConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: Paths = field(default_factory=Paths)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "qpa": dataclasses.asdict(self.qpa),
            "reward": dataclasses.asdict(self.reward),
            "train": _train_section(self.train),
            "paths": dataclasses.asdict(self.paths),
            "eval": dataclasses.asdict(self.eval),
        }


def _train_section(cfg: TrainConfig) -> dict:
    out = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg) if f.name not in _TRAIN_EXCLUDED}
    out["sampling"] = dataclasses.asdict(cfg.sampling)
    return out


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section or 'config'}: {', '.join(unknown)}")


def _coerce(value, like):
    """Match ``value`` to the type of the default ``like`` where that is unambiguous."""
    if isinstance(like, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}")
        return value
    if isinstance(like, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(like, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def _build_section(cls, section: str, given: dict, exclude=()):
    defaults = cls()
    allowed = [f.name for f in dataclasses.fields(cls) if f.name not in exclude]
    _check_keys(section, given, allowed)
    kwargs = {k: _coerce(v, getattr(defaults, k)) for k, v in given.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def run_config_from_dict(data: dict) -> RunConfig:
    """Validate a nested JSON document into a :class:`RunConfig`; unknown keys are errors."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys("", data, ("seed", "qpa", "reward", "train", "paths", "eval"))
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    qpa = _build_section(QpaConfig, "qpa", data.get("qpa", {}))
    reward = _build_section(RewardConfig, "reward", data.get("reward", {}))
    train_given = dict(data.get("train", {}))
    sampling = _build_section(SamplingConfig, "train.sampling", train_given.pop("sampling", {}))
    train_cfg = _build_section(TrainConfig, "train", train_given, exclude=_TRAIN_EXCLUDED)
    train_cfg = train_cfg.replace(seed=seed, sampling=sampling, reward_cfg=reward, reward_scaling=reward.scaling)
    paths = _build_section(Paths, "paths", data.get("paths", {}))
    ev = _build_section(EvalSettings, "eval", data.get("eval", {}))
    return RunConfig(seed, qpa, reward, train_cfg, paths, ev)


def _parse_override_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Fold ``--a.b value`` / ``--a.b=value`` pairs into a nested config dict."""
    data = json.loads(json.dumps(data))
    i = 0
    while i < len(overrides):
        token = overrides[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument {token!r}")
        key = token[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(overrides):
                raise ConfigError(f"override {token} needs a value")
            raw = overrides[i + 1]
            i += 2
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-object key {key!r}")
        node[parts[-1]] = _parse_override_value(raw)
    return data


def load_run_config(path: str | None, overrides: list[str]) -> RunConfig:
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return run_config_from_dict(apply_overrides(data, overrides))


def _load_dataset(path: str) -> Dataset:
    try:
        return Dataset.read_jsonl(path)
    except OSError as exc:
        raise CliError(f"cannot read dataset {path}: {exc}") from exc


def _load_vocab(path: str) -> Vocab:
    try:
        return Vocab(tuple(json.loads(Path(path).read_text(encoding="utf-8"))))
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        raise CliError(f"cannot read vocab {path}: {exc}") from exc


def _answer_vocab(*datasets: Dataset) -> Vocab:
    words = sorted({w for d in datasets for ex in d for w in tokenize_answer(ex.answer)})
    return Vocab.from_words(words)


# -- subcommands -------------------------------------------------------------


def cmd_extract(args, cfg: RunConfig) -> int:
    src = Path(args.transcripts_dir or cfg.paths.transcripts_dir)
    out = Path(args.out or cfg.paths.dataset_out)
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in TRANSCRIPT_SUFFIXES) if src.is_dir() else []
    if not files:
        print(f"no transcripts found in {src}", file=sys.stderr)
        return EXIT_ERROR
    parts = []
    failures = 0
    for path in files:
        try:
            cues = parse_transcript(path.read_bytes(), episode_id=path.stem, source=str(path))
        except TranscriptError as exc:
            failures += 1
            logger.warning("skipping %s: %s", path, exc)
            continue
        ds = build_examples(cues, cfg.qpa)
        parts.append(ds)
        print(f"{path.stem}: cues={len(cues)} examples={len(ds)} skipped={len(ds.skips)}")
    if failures == len(files):
        print("every transcript failed to parse", file=sys.stderr)
        return EXIT_ERROR
    dataset = Dataset.concat(parts)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset.write_jsonl(out)
    skip_path = out.with_name(out.stem + ".skips.jsonl")
    skip_path.write_text("".join(json.dumps(s, ensure_ascii=False) + "\n" for s in dataset.skips), encoding="utf-8")
    print(f"episodes={len(parts)} examples={len(dataset)}")
    if len(dataset) == 0:
        print("no examples extracted", file=sys.stderr)
        return EXIT_EMPTY
    return EXIT_OK


def cmd_stats(args, cfg: RunConfig) -> int:
    stats = dataset_stats(_load_dataset(args.dataset))
    if args.json:
        Path(args.json).write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    print(f"examples={stats['n_examples']} episodes={stats['n_episodes']} "
          f"questions_per_episode={stats['questions_per_episode']:.2f}")
    for name in ("category", "modality", "reasoning"):
        counts, pct = stats[f"{name}_counts"], stats[f"{name}_pct"]
        print(f"{name}:")
        for key in counts:
            print(f"  {key:<18}{counts[key]:>6}{pct[key]:>8.1f}%")
    return EXIT_OK


def cmd_split(args, cfg: RunConfig) -> int:
    data = _load_dataset(args.dataset)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    parts = split_dataset(data, tuple(args.ratios), cfg.seed)
    for name, part in zip(("train", "val", "test"), parts):
        part.write_jsonl(out_dir / f"{name}.jsonl")
        print(f"{name}: episodes={len(part.episodes)} examples={len(part)}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    train_set = _load_dataset(args.dataset)
    val_set = _load_dataset(args.val) if args.val else train_set
    vocab_path = args.vocab or cfg.paths.vocab
    vocab = _load_vocab(vocab_path) if vocab_path else _answer_vocab(train_set, val_set)
    params = init_params(vocab, cfg.train.feature_dim, cfg.train.hash_seed)
    ckpt_dir = Path(cfg.paths.checkpoints_dir)
    logs_dir = Path(cfg.paths.logs_dir)
    logs_dir.mkdir(parents=True, exist_ok=True)

    def on_eval(rec: dict) -> None:
        print(f"step={rec['step']} val_mean_reward={rec['mean_reward']:.4f} top1={rec['top1']:.2f}", flush=True)

    try:
        result = train(
            train_set, val_set, cfg.train, params=params,
            metrics_path=logs_dir / "metrics.jsonl", checkpoint_dir=ckpt_dir, on_eval=on_eval,
        )
    except NonFiniteLoss as exc:
        print(f"non-finite loss at step {exc.step} on example {exc.example_id}", file=sys.stderr)
        return EXIT_ERROR
    rewards = [r["mean_reward"] for r in result.log if "loss" in r]
    tail = rewards[-100:]
    print(f"done steps={len(rewards)} best_step={result.best_step} best_val_mean_reward={result.best_score:.4f} "
          f"train_mean_reward_last{len(tail)}={sum(tail) / len(tail):.4f}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    data = _load_dataset(args.dataset)
    try:
        params = load_params(args.checkpoint)
    except (OSError, ValueError) as exc:
        print(f"cannot load checkpoint {args.checkpoint}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    vocab_path = args.vocab or cfg.paths.vocab
    if vocab_path and _load_vocab(vocab_path).tokens != params.vocab.tokens:
        print(f"checkpoint vocab does not match {vocab_path}", file=sys.stderr)
        return EXIT_ERROR
    covered = sum(params.vocab.encode_text(ex.answer) is not None for ex in data)
    if covered == 0:
        print("checkpoint vocab covers none of the dataset answers", file=sys.stderr)
        return EXIT_ERROR
    if covered < len(data):
        logger.warning("%d of %d answers contain out-of-vocabulary words", len(data) - covered, len(data))

    run_open = args.open_ended or not args.mcq
    report: dict = {}
    if run_open:
        rep = eval_open_ended(params, data, cfg.reward, cfg.eval.threshold, cfg.seed, cfg.eval.max_tokens,
                              split_name=f"{Path(args.dataset).stem}:open_ended")
        report["open_ended"] = rep.to_dict()
        print(rep.format_table())
    if args.mcq:
        items = make_mcq(data, cfg.eval.n_options, cfg.seed)
        rep = eval_mcq(params, items, cfg.eval.mcq_mode, cfg.seed, cfg.eval.max_tokens,
                       split_name=f"{Path(args.dataset).stem}:mcq")
        report["mcq"] = rep.to_dict()
        print(rep.format_table())
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    try:
        spec = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read sweep spec {args.spec}: {exc}") from exc
    _check_keys("sweep spec", spec, ("train", "val", "vocab", "selection_metric", "dimension", "values", "stages"))
    if "stages" in spec and "dimension" in spec:
        raise ConfigError("sweep spec takes either 'stages' or 'dimension'/'values', not both")
    stages = spec.get("stages") or [{"dimension": spec.get("dimension"), "values": spec.get("values")}]
    train_set = _load_dataset(spec["train"])
    val_set = _load_dataset(spec["val"]) if spec.get("val") else train_set
    vocab = _load_vocab(spec["vocab"]) if spec.get("vocab") else _answer_vocab(train_set, val_set)
    params = init_params(vocab, cfg.train.feature_dim, cfg.train.hash_seed)
    metric = spec.get("selection_metric", "val_mean_reward")
    pairs = [(s["dimension"], tuple(s["values"] or ())) for s in stages]
    for dim, values in pairs:
        SweepSpec(cfg.train, dim, values, metric)  # validate every stage before running any

    if len(pairs) == 1:
        reports = [sweep(SweepSpec(cfg.train, pairs[0][0], pairs[0][1], metric), train_set, val_set, params)]
    else:
        _, reports = sequential_sweep(cfg.train, pairs, train_set, val_set, params, metric)
    logs_dir = Path(cfg.paths.logs_dir)
    logs_dir.mkdir(parents=True, exist_ok=True)
    all_failed = False
    with open(logs_dir / "sweep.jsonl", "w", encoding="utf-8") as fh:
        for rep in reports:
            fh.write(rep.to_jsonl())
            print(rep.to_tsv(), end="")
            all_failed |= all(r.error is not None for r in rep.rows)
    return EXIT_ERROR if all_failed else EXIT_OK


def cmd_reward(args, cfg: RunConfig) -> int:
    try:
        breakdown = combined_reward(args.pred, args.gold, cfg.reward)
    except EmptyGold as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps(breakdown.to_dict()))
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out_dir)
    if args.kind == "episodes":
        for path in write_episode_fixtures(out, seed=cfg.seed, perturbed=args.perturbed):
            print(path)
        return EXIT_OK
    train_set, heldout, vocab = make_curriculum(seed=cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    train_set.write_jsonl(out / "train.jsonl")
    heldout.write_jsonl(out / "heldout.jsonl")
    (out / "vocab.json").write_text(json.dumps(list(vocab.tokens)) + "\n", encoding="utf-8")
    print(f"train={len(train_set)} heldout={len(heldout)} vocab={len(vocab)}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors share the generic error status
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qpagrpo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log skip reasons and progress")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("extract", parents=[common], help="mine Q-P-A examples from transcripts")
    p.add_argument("transcripts_dir", nargs="?")
    p.add_argument("--out")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("stats", parents=[common], help="category/modality/reasoning breakdown")
    p.add_argument("dataset")
    p.add_argument("--json", help="also write the statistics here")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", parents=[common], help="episode-level train/val/test split")
    p.add_argument("dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ratios", type=float, nargs=3, default=(0.8, 0.1, 0.1))
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common], help="GRPO training")
    p.add_argument("dataset")
    p.add_argument("--val")
    p.add_argument("--vocab", help="JSON token list; default: words of the answers")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="open-ended and/or MCQ evaluation")
    p.add_argument("dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--open-ended", action="store_true")
    p.add_argument("--mcq", action="store_true")
    p.add_argument("--vocab")
    p.add_argument("--report", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="one-dimension-at-a-time hyperparameter sweep")
    p.add_argument("spec")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("reward", parents=[common], help="score one prediction against a gold answer")
    p.add_argument("--pred", required=True, help="predicted answer text")
    p.add_argument("--gold", required=True, help="gold answer text")
    p.set_defaults(func=cmd_reward)

    p = sub.add_parser("synth", parents=[common], help="write synthetic episodes or the training curriculum")
    p.add_argument("kind", choices=("episodes", "curriculum"))
    p.add_argument("out_dir")
    p.add_argument("--perturbed", action="store_true", help="episodes: write the sub-threshold-pause episode")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_ERROR
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s", force=True,
    )
    try:
        cfg = load_run_config(args.config, extra)
        print(f"seed={cfg.seed}", file=sys.stderr)
        return args.func(args, cfg)
    except (ConfigError, CliError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (EmptyDataset, InsufficientAnswers, InsufficientEpisodes, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

"""TinyLM: a linear-softmax autoregressive policy with exact analytic gradients.

The next-token logits are ``W @ [prompt_features; onehot(prev_token)]`` where
the prompt features are an L2-normalized hashed bag of context, question and
frame-bucket tokens. Small enough that every GRPO code path can be checked
against brute-force oracles.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .qpa_extract import QAExample
from .reward import tokenize_answer

BOS = "<bos>"
EOS = "<eos>"
FRAME_BUCKET_MS = 10_000
TLM_MAGIC = b"TLM\x00"
TLM_VERSION = 1


class NonFiniteLogits(FloatingPointError):
    pass


class GroupTooSmall(ValueError):
    pass


class InvalidToken(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        if len(tokens) < 3:
            raise ValueError("vocab needs at least 3 tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocab tokens must be unique")
        if tokens.count(BOS) != 1 or tokens.count(EOS) != 1:
            raise ValueError("vocab must contain BOS and EOS exactly once")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(tokens)})

    @classmethod
    def from_words(cls, words: Sequence[str]) -> Vocab:
        rest = [w for w in dict.fromkeys(words) if w not in (BOS, EOS)]
        return cls((BOS, EOS, *rest))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        return self._index[token]

    @property
    def bos_id(self) -> int:
        return self._index[BOS]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    def encode_text(self, text: str) -> list[int] | None:
        """Token ids for ``text`` plus EOS, or None if any word is out of vocabulary."""
        words = tokenize_answer(text)
        if any(w not in self._index for w in words):
            return None
        return [self._index[w] for w in words] + [self.eos_id]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i not in (self.bos_id, self.eos_id))


@dataclass
class PolicyParams:
    """Weights of shape ``(len(vocab), feature_dim + len(vocab))``.

    ``feature_dim`` is the width of the hashed prompt features; the
    remaining ``len(vocab)`` columns take the previous-token one-hot.
    """

    weight_matrix: np.ndarray
    feature_dim: int
    vocab: Vocab
    hash_seed: int = 0

    def __post_init__(self) -> None:
        self.weight_matrix = np.asarray(self.weight_matrix, dtype=np.float64)
        v = len(self.vocab)
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if self.weight_matrix.shape != (v, self.feature_dim + v):
            raise ValueError(
                f"weight_matrix shape {self.weight_matrix.shape} != {(v, self.feature_dim + v)}"
            )
        if not np.all(np.isfinite(self.weight_matrix)):
            raise ValueError("weight_matrix has non-finite entries")

    def copy(self) -> PolicyParams:
        return PolicyParams(self.weight_matrix.copy(), self.feature_dim, self.vocab, self.hash_seed)


def init_params(vocab: Vocab, feature_dim: int = 256, hash_seed: int = 0) -> PolicyParams:
    """Zero weights, i.e. the uniform policy."""
    v = len(vocab)
    return PolicyParams(np.zeros((v, feature_dim + v)), feature_dim, vocab, hash_seed)


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    top_p: float = 0.9
    max_tokens: int = 16

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class Generation:
    tokens: tuple[int, ...]
    text: str
    logprob: float


@dataclass
class SampleGroup:
    example_id: str
    generations: list[Generation]
    rewards: list[float] = field(default_factory=list)
    advantages: list[float] = field(default_factory=list)


# -- prompt encoding ---------------------------------------------------------


@lru_cache(maxsize=65536)
def hash_bucket(token: str, hash_seed: int, dim: int) -> int:
    """blake2b-64 of the UTF-8 token keyed by ``str(hash_seed)``, little-endian, mod dim."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=str(hash_seed).encode("ascii")).digest()
    return int.from_bytes(digest, "little") % dim


def prompt_tokens(example: QAExample) -> list[str]:
    toks = tokenize_answer(example.context_text) + tokenize_answer(example.question)
    toks += [f"frame:{ts // FRAME_BUCKET_MS}" for ts in example.frame_refs]
    return toks


def encode_prompt(example: QAExample, params: PolicyParams) -> np.ndarray:
    vec = np.zeros(params.feature_dim)
    for tok in prompt_tokens(example):
        vec[hash_bucket(tok, params.hash_seed, params.feature_dim)] += 1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


# -- distributions -----------------------------------------------------------


def _softmax(logits: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise NonFiniteLogits("non-finite logits")
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def _prompt_logits(params: PolicyParams, features: np.ndarray) -> np.ndarray:
    return params.weight_matrix[:, : params.feature_dim] @ features


def _step_logits(params: PolicyParams, base: np.ndarray, prev_token: int) -> np.ndarray:
    return base + params.weight_matrix[:, params.feature_dim + prev_token]


def next_token_dist(
    params: PolicyParams, features: np.ndarray, prev_token: int, temperature: float = 1.0
) -> np.ndarray:
    if not 0 <= prev_token < len(params.vocab):
        raise InvalidToken(f"prev_token {prev_token} out of range")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    logits = _step_logits(params, _prompt_logits(params, features), prev_token)
    return _softmax(logits / temperature)


def nucleus_filter(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Keep the smallest highest-probability prefix with mass >= top_p, renormalized.

    Ties in probability are ordered by token id.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if top_p >= 1.0:
        return probs.copy()
    order = np.lexsort((np.arange(len(probs)), -probs))
    cum = np.cumsum(probs[order])
    cut = int(np.searchsorted(cum, top_p - 1e-12, side="left")) + 1
    keep = order[: min(cut, len(probs))]
    out = np.zeros_like(probs)
    out[keep] = probs[keep]
    return out / out.sum()


def _sampling_dist(p: np.ndarray, bos_id: int, top_p: float) -> np.ndarray:
    q = p.copy()
    q[bos_id] = 0.0
    total = q.sum()
    if total <= 0:
        raise NonFiniteLogits("all probability mass on BOS")
    return nucleus_filter(q / total, top_p)


def _member_rng(seed: int, example_id: str, member: int) -> np.random.Generator:
    ss = np.random.SeedSequence([seed % (1 << 64), zlib.crc32(example_id.encode("utf-8")), member])
    return np.random.Generator(np.random.Philox(ss))


def rollout(
    params: PolicyParams,
    features: np.ndarray,
    cfg: SamplingConfig,
    rng: np.random.Generator,
) -> Generation:
    vocab = params.vocab
    base = _prompt_logits(params, features)
    prev = vocab.bos_id
    tokens: list[int] = []
    logprob = 0.0
    for _ in range(cfg.max_tokens):
        p = _softmax(_step_logits(params, base, prev) / cfg.temperature)
        q = _sampling_dist(p, vocab.bos_id, cfg.top_p)
        cdf = np.cumsum(q)
        tok = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        tok = min(tok, len(q) - 1)
        while q[tok] == 0.0:  # guards the float edge at the top of the cdf
            tok -= 1
        logprob += float(np.log(p[tok]))
        tokens.append(tok)
        if tok == vocab.eos_id:
            break
        prev = tok
    else:
        # truncated: the forced EOS is scored so logprobs match sequence_logprob
        p = _softmax(_step_logits(params, base, prev) / cfg.temperature)
        logprob += float(np.log(p[vocab.eos_id]))
        tokens.append(vocab.eos_id)
    return Generation(tuple(tokens), vocab.decode(tokens), logprob)


def sample_group(
    params: PolicyParams,
    example: QAExample,
    K: int,
    cfg: SamplingConfig | None = None,
    seed: int = 0,
) -> SampleGroup:
    """K independent rollouts; member ``j`` draws from its own Philox stream
    keyed by ``(seed, crc32(question_id), j)``."""
    if K < 2:
        raise GroupTooSmall("group size K must be >= 2")
    cfg = cfg or SamplingConfig()
    features = encode_prompt(example, params)
    gens = [rollout(params, features, cfg, _member_rng(seed, example.question_id, j)) for j in range(K)]
    return SampleGroup(example.question_id, gens)


def greedy_decode(params: PolicyParams, example: QAExample, max_tokens: int = 16) -> Generation:
    vocab = params.vocab
    base = _prompt_logits(params, encode_prompt(example, params))
    prev = vocab.bos_id
    tokens: list[int] = []
    logprob = 0.0
    for _ in range(max_tokens):
        p = _softmax(_step_logits(params, base, prev))
        masked = p.copy()
        masked[vocab.bos_id] = -1.0
        tok = int(np.argmax(masked))
        logprob += float(np.log(p[tok]))
        tokens.append(tok)
        if tok == vocab.eos_id:
            break
        prev = tok
    else:
        p = _softmax(_step_logits(params, base, prev))
        logprob += float(np.log(p[vocab.eos_id]))
        tokens.append(vocab.eos_id)
    return Generation(tuple(tokens), vocab.decode(tokens), logprob)


# -- scoring and gradients ---------------------------------------------------


def _check_tokens(params: PolicyParams, tokens: Sequence[int]) -> None:
    v = len(params.vocab)
    eos = params.vocab.eos_id
    if not tokens or tokens[-1] != eos:
        raise InvalidToken("token sequence must be EOS-terminated")
    for t in tokens:
        if not 0 <= t < v or t == params.vocab.bos_id:
            raise InvalidToken(f"invalid token id {t}")
    if eos in tokens[:-1]:
        raise InvalidToken("EOS before end of sequence")


def sequence_logprob(
    params: PolicyParams, example: QAExample, tokens: Sequence[int], features: np.ndarray | None = None
) -> float:
    _check_tokens(params, tokens)
    if features is None:
        features = encode_prompt(example, params)
    base = _prompt_logits(params, features)
    prev = params.vocab.bos_id
    total = 0.0
    for t in tokens:
        p = _softmax(_step_logits(params, base, prev))
        total += float(np.log(p[t]))
        prev = t
    return total


def sequence_logprob_and_grad(
    params: PolicyParams, example: QAExample, tokens: Sequence[int], features: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Log-probability of ``tokens`` and its exact gradient w.r.t. the weights.

    Each step contributes ``(onehot(token) - probs) ⊗ [features; onehot(prev)]``.
    """
    _check_tokens(params, tokens)
    if features is None:
        features = encode_prompt(example, params)
    d = params.feature_dim
    base = _prompt_logits(params, features)
    grad = np.zeros_like(params.weight_matrix)
    # prompt-column gradient is (sum of residuals) ⊗ features
    residual_sum = np.zeros(len(params.vocab))
    prev = params.vocab.bos_id
    total = 0.0
    for t in tokens:
        p = _softmax(_step_logits(params, base, prev))
        total += float(np.log(p[t]))
        r = -p
        r[t] += 1.0
        residual_sum += r
        grad[:, d + prev] += r
        prev = t
    grad[:, :d] += np.outer(residual_sum, features)
    if not np.isfinite(total):
        raise NonFiniteLogits("sequence has zero probability")
    return total, grad


# -- checkpoints -------------------------------------------------------------


def save_params(params: PolicyParams, path: str | Path) -> None:
    """Write a ``.tlm`` checkpoint: magic, u32 header length, JSON header,
    then the weight matrix as row-major little-endian float64."""
    header = json.dumps(
        {
            "version": TLM_VERSION,
            "vocab": list(params.vocab.tokens),
            "feature_dim": params.feature_dim,
            "hash_seed": params.hash_seed,
            "shape": list(params.weight_matrix.shape),
        },
        ensure_ascii=False,
    ).encode("utf-8")
    body = np.ascontiguousarray(params.weight_matrix, dtype="<f8").tobytes()
    Path(path).write_bytes(TLM_MAGIC + struct.pack("<I", len(header)) + header + body)


def load_params(path: str | Path) -> PolicyParams:
    blob = Path(path).read_bytes()
    if blob[:4] != TLM_MAGIC:
        raise ValueError(f"{path}: not a .tlm checkpoint")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    if header.get("version") != TLM_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    rows, cols = header["shape"]
    body = blob[8 + hlen:]
    if len(body) != rows * cols * 8:
        raise ValueError(f"{path}: truncated weight matrix")
    weights = np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)
    return PolicyParams(weights, header["feature_dim"], Vocab(tuple(header["vocab"])), header["hash_seed"])

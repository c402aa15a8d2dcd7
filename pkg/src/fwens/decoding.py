"""Autoregressive generation from the ensemble mixture."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .model import EnsembleTransformer, TokenDistribution


@dataclass(frozen=True)
class DecodeConfig:
    """Greedy, or sampled with top-k, then top-p, then temperature."""

    mode: str = "greedy"
    temperature: float = 0.5
    top_p: float = 0.99
    top_k: int = 5

    def __post_init__(self):
        if self.mode not in ("greedy", "sampled"):
            raise ConfigError(f"decode mode must be 'greedy' or 'sampled', got {self.mode!r}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ConfigError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")

    @classmethod
    def sampled(cls, temperature=0.5, top_p=0.99, top_k=5) -> "DecodeConfig":
        return cls("sampled", temperature, top_p, top_k)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Generation:
    prompt: np.ndarray
    tokens: list[int] = field(default_factory=list)
    member_probs: list[np.ndarray] = field(default_factory=list)
    ended: bool = False

    @property
    def steps(self) -> list[TokenDistribution]:
        return [TokenDistribution(p) for p in self.member_probs]

    @property
    def sequence(self) -> np.ndarray:
        return np.concatenate([self.prompt, np.asarray(self.tokens, dtype=self.prompt.dtype)])


def filter_distribution(p: np.ndarray, decode: DecodeConfig) -> np.ndarray:
    """Renormalised sampling distribution after top-k, top-p, temperature."""
    p = np.asarray(p, dtype=np.float64)
    order = np.argsort(-p, kind="stable")
    keep = order[: decode.top_k]
    kp = p[keep] / p[keep].sum()
    cut = int(np.searchsorted(np.cumsum(kp), decode.top_p - 1e-12)) + 1
    keep = keep[: max(1, min(cut, keep.size))]
    with np.errstate(divide="ignore"):
        logits = np.log(p[keep]) / decode.temperature
    w = np.exp(logits - logits.max())
    out = np.zeros_like(p)
    out[keep] = w / w.sum()
    return out


def choose_token(p: np.ndarray, decode: DecodeConfig, rng: np.random.Generator | None) -> int:
    if decode.mode == "greedy":
        return int(np.argmax(p))
    q = filter_distribution(p, decode)
    c = np.cumsum(q)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), q.size - 1))


def generate_batch(
    model: EnsembleTransformer,
    prefixes: Sequence[Sequence[int]],
    decode: DecodeConfig = DecodeConfig(),
    max_new: int = 4,
    seeds: Sequence[int] | None = None,
    stop_token: int | None = None,
    chunk_size: int = 256,
) -> list[Generation]:
    """Generate continuations for many prompts.

    Rows are right-padded; causal masking makes padding invisible to the
    real positions, so each row reads logits at its own last token.
    Row ``i`` samples with ``default_rng(seeds[i])``.
    """
    if max_new < 1:
        raise ConfigError(f"max_new must be >= 1, got {max_new}")
    n = len(prefixes)
    if seeds is not None and len(seeds) != n:
        raise ConfigError("need one seed per prefix")
    results = [Generation(np.asarray(p, dtype=np.int64)) for p in prefixes]
    for lo in range(0, n, chunk_size):
        chunk = results[lo: lo + chunk_size]
        rngs = None
        if decode.mode == "sampled":
            rngs = [np.random.default_rng(seeds[lo + j] if seeds is not None else lo + j) for j in range(len(chunk))]
        _generate_chunk(model, chunk, decode, max_new, rngs, stop_token)
    return results


def _generate_chunk(model, chunk, decode, max_new, rngs, stop_token):
    max_len = model.config.max_seq_len
    lengths = np.array([g.prompt.size for g in chunk])
    buf = np.zeros((len(chunk), min(max_len, lengths.max() + max_new)), dtype=np.int64)
    for j, g in enumerate(chunk):
        buf[j, : g.prompt.size] = g.prompt
    active = np.ones(len(chunk), dtype=bool)
    for _ in range(max_new):
        active &= lengths < max_len
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        width = int(lengths[rows].max())
        probs = model.last_token_probs(buf[rows, :width], lengths[rows])
        for k, j in enumerate(rows):
            step = probs[:, k]
            mixture = step.mean(axis=0)
            tok = choose_token(mixture, decode, None if rngs is None else rngs[j])
            g = chunk[j]
            g.member_probs.append(step)
            g.tokens.append(tok)
            buf[j, lengths[j]] = tok
            lengths[j] += 1
            if stop_token is not None and tok == stop_token:
                g.ended = True
                active[j] = False


def generate(
    model: EnsembleTransformer,
    prefix: Sequence[int],
    decode: DecodeConfig = DecodeConfig(),
    max_new: int = 4,
    seed: int = 0,
    stop_token: int | None = None,
) -> Generation:
    return generate_batch(model, [prefix], decode, max_new, seeds=[seed], stop_token=stop_token)[0]

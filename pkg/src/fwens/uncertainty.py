"""Predictive entropy and its aleatoric / epistemic split, in bits.

For one generation step with member distributions ``p_1..p_M``:

    predictive = H(mean_m p_m)
    aleatoric  = mean_m H(p_m)
    epistemic  = predictive - aleatoric      (mutual information, >= 0)
"""

from __future__ import annotations

from dataclasses import astuple, dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .decoding import DecodeConfig, Generation, generate_batch
from .errors import DataError, DomainError
from .model import EnsembleTransformer, TokenDistribution

FEATURE_NAMES = ("first_predictive", "first_aleatoric", "mean_predictive", "mean_aleatoric")


@dataclass(frozen=True)
class UncertaintyTriple:
    predictive: float
    aleatoric: float
    epistemic: float


@dataclass(frozen=True)
class UncertaintyFeatures:
    first_predictive: float
    first_aleatoric: float
    mean_predictive: float
    mean_aleatoric: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self))


def _check_distribution(p: np.ndarray) -> None:
    if np.any(p < 0):
        raise DomainError("distribution has negative entries")
    s = p.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > 1e-4):
        raise DomainError(f"distribution sums to {np.ravel(s)[0]:.6f}, not 1")


def _entropy_bits(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def entropy(p) -> float | np.ndarray:
    """Shannon entropy in bits along the last axis (0 log 0 = 0)."""
    p = np.asarray(p, dtype=np.float64)
    _check_distribution(p)
    h = _entropy_bits(p)
    return float(h) if h.ndim == 0 else h


def decompose_probs(member_probs: np.ndarray) -> np.ndarray:
    """Vectorised split for ``(..., M, V)`` member probabilities.

    Returns ``(..., 3)`` holding predictive, aleatoric, epistemic.
    """
    p = np.asarray(member_probs, dtype=np.float64)
    _check_distribution(p)
    predictive = _entropy_bits(p.mean(axis=-2))
    aleatoric = _entropy_bits(p).mean(axis=-1)
    epistemic = predictive - aleatoric
    # Jensen guarantees >= 0; only rounding noise is clipped
    epistemic = np.where((epistemic < 0) & (epistemic > -1e-12), 0.0, epistemic)
    return np.stack([predictive, aleatoric, epistemic], axis=-1)


def decompose(d: TokenDistribution) -> UncertaintyTriple:
    _check_distribution(d.mixture)
    pred, ale, epi = decompose_probs(d.member_probs)
    return UncertaintyTriple(float(pred), float(ale), float(epi))


def summarize_sequence(triples: Sequence[UncertaintyTriple]) -> UncertaintyFeatures:
    """First-token and mean predictive / aleatoric uncertainty over generated tokens."""
    if len(triples) == 0:
        raise DataError("cannot summarise an empty generation")
    pred = np.array([t.predictive for t in triples])
    ale = np.array([t.aleatoric for t in triples])
    return UncertaintyFeatures(float(pred[0]), float(ale[0]), float(pred.mean()), float(ale.mean()))


def step_triples(steps: Sequence[TokenDistribution] | Sequence[np.ndarray]) -> list[UncertaintyTriple]:
    out = []
    for s in steps:
        probs = s.member_probs if isinstance(s, TokenDistribution) else s
        pred, ale, epi = decompose_probs(probs)
        out.append(UncertaintyTriple(float(pred), float(ale), float(epi)))
    return out


def features_from_steps(steps) -> UncertaintyFeatures:
    return summarize_sequence(step_triples(steps))


class UncertaintyFeaturizer(TransformerMixin, BaseEstimator):
    """Maps per-example step distributions to the 4 uncertainty features.

    ``transform`` accepts a list of :class:`~fwens.decoding.Generation`
    objects or of per-step ``(M, V)`` probability lists.
    """

    def fit(self, X, y=None):
        self.n_features_out_ = len(FEATURE_NAMES)
        return self

    def transform(self, X) -> np.ndarray:
        rows = []
        for item in X:
            steps = item.member_probs if isinstance(item, Generation) else item
            rows.append(features_from_steps(steps).as_array())
        return np.array(rows).reshape(len(rows), len(FEATURE_NAMES))

    def get_feature_names_out(self, input_features=None):
        return np.array(FEATURE_NAMES, dtype=object)


def sample_based_distribution(
    model: EnsembleTransformer,
    prefix: Sequence[int],
    M_samples: int = 4,
    decode: DecodeConfig = DecodeConfig.sampled(),
    seed: int = 0,
    max_new: int = 4,
    stop_token: int | None = None,
) -> list[TokenDistribution]:
    """Per-step pseudo-ensembles from repeated sampling of one model.

    Step ``t`` stacks the model's step-``t`` distribution from every sampled
    trajectory still running at ``t``.
    """
    gens = sample_trajectories(model, [prefix], M_samples, decode, seed, max_new, stop_token)[0]
    return trajectories_to_steps(gens)


def sample_trajectories(model, prefixes, M_samples=4, decode=DecodeConfig.sampled(), seed=0,
                        max_new=4, stop_token=None) -> list[list[Generation]]:
    if model.M != 1:
        raise DataError(f"sample-based uncertainty needs a single-member model, got M={model.M}")
    if decode.mode != "sampled":
        raise DataError("sample-based uncertainty needs sampled decoding")
    n = len(prefixes)
    tiled = [p for p in prefixes for _ in range(M_samples)]
    seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(n * M_samples)]
    gens = generate_batch(model, tiled, decode, max_new, seeds=seeds, stop_token=stop_token)
    return [gens[i * M_samples:(i + 1) * M_samples] for i in range(n)]


def trajectories_to_steps(gens: Sequence[Generation]) -> list[TokenDistribution]:
    longest = max(len(g.member_probs) for g in gens)
    steps = []
    for t in range(longest):
        rows = [g.member_probs[t][0] for g in gens if len(g.member_probs) > t]
        steps.append(TokenDistribution(np.stack(rows)))
    return steps

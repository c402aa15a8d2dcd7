"""Shared-weight linear layers with rank-1 per-member fast weights.

Member ``i`` of an :class:`EnsembleLinear` uses the weight

    W_i = (U + (alpha / r) * B @ A) * outer(r_i, s_i)

without ever materialising ``W_i``: ``((x * r_i) @ (U + dU)) * s_i + b_i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

log = logging.getLogger(__name__)

SCHEMES = ("he", "xavier")
MODES = ("vanilla", "batch_ensemble", "lora_ensemble")


@dataclass(frozen=True)
class InitSpec:
    """How fast weights are drawn.

    ``std_scale`` multiplies the scheme's standard deviation; 0 gives
    constant fast weights equal to ``mean``.
    """

    scheme: str = "he"
    mean: float = 1.0
    seed: int = 0
    std_scale: float = 1.0

    def std(self, fan_in: int, fan_out: int) -> float:
        if self.scheme == "he":
            var = 2.0 / fan_in
        elif self.scheme == "xavier":
            var = 2.0 / (fan_in + fan_out)
        else:
            raise ConfigError(f"unknown init scheme {self.scheme!r}; expected one of {SCHEMES}")
        return self.std_scale * float(np.sqrt(var))


class LoraAdapter:
    """Low-rank update ``(alpha / rank) * B @ A`` for an ``m x n`` weight."""

    def __init__(self, m: int, n: int, rank: int = 8, alpha: float = 32.0, seed: int = 0, dtype=None):
        if rank < 1:
            raise ConfigError(f"adapter rank must be >= 1, got {rank}")
        if not alpha > 0:
            raise ConfigError(f"adapter alpha must be positive, got {alpha}")
        dtype = dtype or T.get_default_dtype()
        rng = np.random.default_rng(seed)
        self.rank = rank
        self.alpha = float(alpha)
        self.A = Tensor(rng.normal(0.0, np.sqrt(1.0 / rank), size=(rank, n)), requires_grad=True, dtype=dtype)
        # zero B: the adapter contributes nothing until trained
        self.B = Tensor(np.zeros((m, rank)), requires_grad=True, dtype=dtype)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> Tensor:
        return (self.B @ self.A) * self.scale

    def delta_array(self) -> np.ndarray:
        return (self.B.data @ self.A.data) * self.scale


class EnsembleLinear:
    """``M`` members sharing one slow weight ``U`` of shape ``(m, n)``.

    Inputs carry the member axis first: ``x`` is ``(M, ..., m)`` and the
    output is ``(M, ..., n)``.
    """

    def __init__(self, m: int, n: int, M: int = 1, U: np.ndarray | None = None, seed: int = 0, dtype=None):
        if M < 1:
            raise ConfigError(f"ensemble size must be >= 1, got {M}")
        dtype = dtype or T.get_default_dtype()
        self.m, self.n, self.M = m, n, M
        if U is None:
            U = np.random.default_rng(seed).normal(0.0, 1.0 / np.sqrt(m), size=(m, n))
        if tuple(np.shape(U)) != (m, n):
            raise ShapeError(f"slow weight must have shape {(m, n)}, got {np.shape(U)}")
        self.U = Tensor(U, requires_grad=True, dtype=dtype)
        self.fast_r = Tensor(np.ones((M, m)), dtype=dtype)
        self.fast_s = Tensor(np.ones((M, n)), dtype=dtype)
        self.bias = Tensor(np.zeros((M, n)), requires_grad=True, dtype=dtype)
        self.adapter: LoraAdapter | None = None

    # -- construction helpers -------------------------------------------
    def init_fast_weights(self, spec: InitSpec = InitSpec()) -> None:
        """Draw ``fast_r`` and ``fast_s`` i.i.d. from normal(mean, scheme variance)."""
        std = spec.std(self.m, self.n)
        rng = np.random.default_rng(spec.seed)
        r = rng.normal(spec.mean, std, size=(self.M, self.m)) if std > 0 else np.full((self.M, self.m), spec.mean)
        s = rng.normal(spec.mean, std, size=(self.M, self.n)) if std > 0 else np.full((self.M, self.n), spec.mean)
        self.fast_r = Tensor(r, requires_grad=self.fast_r.requires_grad, dtype=self.dtype)
        self.fast_s = Tensor(s, requires_grad=self.fast_s.requires_grad, dtype=self.dtype)

    def attach_adapter(self, rank: int = 8, alpha: float = 32.0, seed: int = 0) -> LoraAdapter:
        self.adapter = LoraAdapter(self.m, self.n, rank, alpha, seed=seed, dtype=self.dtype)
        return self.adapter

    def merge_adapter(self) -> bool:
        """Fold the adapter into ``U``. Returns False (and warns) if there is none."""
        if self.adapter is None:
            log.warning("merge_adapter called on a layer without an adapter; nothing to merge")
            return False
        if np.any(self.adapter.B.data):
            merged = self.U.data + self.adapter.delta_array().astype(self.dtype)
            self.U = Tensor(merged, requires_grad=self.U.requires_grad, dtype=self.dtype)
        self.adapter = None
        return True

    @classmethod
    def from_base(cls, base: "EnsembleLinear", M: int) -> "EnsembleLinear":
        """New ``M``-member layer whose slow weight and biases copy a 1-member base."""
        layer = cls(base.m, base.n, M, U=base.U.data.copy(), dtype=base.dtype)
        layer.bias = Tensor(np.repeat(base.bias.data[:1], M, axis=0), requires_grad=True, dtype=base.dtype)
        return layer

    # -- parameters -----------------------------------------------------
    @property
    def dtype(self):
        return self.U.dtype

    def parameters(self) -> dict[str, Tensor]:
        params = {"U": self.U, "fast_r": self.fast_r, "fast_s": self.fast_s, "bias": self.bias}
        if self.adapter is not None:
            params["lora_A"] = self.adapter.A
            params["lora_B"] = self.adapter.B
        return params

    def set_trainable(self, names: Iterable[str]) -> None:
        names = set(names)
        for key, p in self.parameters().items():
            p.requires_grad = key in names

    def num_trainable(self) -> int:
        return sum(p.size for p in self.parameters().values() if p.requires_grad)

    def slow_weight(self) -> np.ndarray:
        if self.adapter is None:
            return self.U.data
        return self.U.data + self.adapter.delta_array()

    def effective_weight(self, i: int) -> np.ndarray:
        """Dense weight of member ``i`` (for inspection and oracles)."""
        return self.slow_weight() * np.outer(self.fast_r.data[i], self.fast_s.data[i])

    # -- forward ----------------------------------------------------------
    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim < 2 or x.shape[0] != self.M:
            raise ShapeError(f"expected input with leading member axis {self.M}, got shape {x.shape}")
        if x.shape[-1] != self.m:
            raise ShapeError(f"expected input features {self.m}, got shape {x.shape}")
        lead = x.shape[1:-1]
        x3 = x.reshape(self.M, -1, self.m)
        rows = x3.shape[1]
        W = self.U if self.adapter is None else self.U + self.adapter.delta()
        xr = x3 * self.fast_r.reshape(self.M, 1, self.m)
        h = (xr.reshape(self.M * rows, self.m) @ W).reshape(self.M, rows, self.n)
        out = h * self.fast_s.reshape(self.M, 1, self.n) + self.bias.reshape(self.M, 1, self.n)
        return out.reshape((self.M,) + lead + (self.n,))


class LoraEnsembleLinear:
    """Baseline ensemble in which member ``i`` owns its own adapter ``(A_i, B_i)``."""

    def __init__(self, m: int, n: int, M: int, rank: int = 8, alpha: float = 32.0,
                 U: np.ndarray | None = None, seed: int = 0, dtype=None):
        if rank < 1:
            raise ConfigError(f"adapter rank must be >= 1, got {rank}")
        dtype = dtype or T.get_default_dtype()
        rng = np.random.default_rng(seed)
        if U is None:
            U = rng.normal(0.0, 1.0 / np.sqrt(m), size=(m, n))
        self.m, self.n, self.M, self.rank, self.alpha = m, n, M, rank, float(alpha)
        self.U = Tensor(U, dtype=dtype)
        self.A = Tensor(rng.normal(0.0, np.sqrt(1.0 / rank), size=(M, rank, n)), requires_grad=True, dtype=dtype)
        self.B = Tensor(np.zeros((M, m, rank)), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros((M, n)), requires_grad=True, dtype=dtype)

    @classmethod
    def from_base(cls, base: EnsembleLinear, M: int, rank: int = 8, alpha: float = 32.0, seed: int = 0):
        layer = cls(base.m, base.n, M, rank, alpha, U=base.U.data.copy(), seed=seed, dtype=base.dtype)
        layer.bias = Tensor(np.repeat(base.bias.data[:1], M, axis=0), requires_grad=True, dtype=base.dtype)
        return layer

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def dtype(self):
        return self.U.dtype

    def parameters(self) -> dict[str, Tensor]:
        return {"U": self.U, "lora_A": self.A, "lora_B": self.B, "bias": self.bias}

    def effective_weight(self, i: int) -> np.ndarray:
        return self.U.data + self.scale * (self.B.data[i] @ self.A.data[i])

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim < 2 or x.shape[0] != self.M:
            raise ShapeError(f"expected input with leading member axis {self.M}, got shape {x.shape}")
        lead = x.shape[1:-1]
        x3 = x.reshape(self.M, -1, self.m)
        rows = x3.shape[1]
        base = (x3.reshape(self.M * rows, self.m) @ self.U).reshape(self.M, rows, self.n)
        low = (x3 @ self.B) @ self.A
        out = base + low * self.scale + self.bias.reshape(self.M, 1, self.n)
        return out.reshape((self.M,) + lead + (self.n,))


def make_lora_ensemble(layer_dims: Sequence[tuple[int, int]], M: int, rank: int = 8,
                       alpha: float = 32.0, seed: int = 0) -> list[LoraEnsembleLinear]:
    return [LoraEnsembleLinear(m, n, M, rank, alpha, seed=seed + k) for k, (m, n) in enumerate(layer_dims)]


def param_count(layer_dims: Sequence[tuple[int, int]], M: int, mode: str,
                rank: int = 8, include_bias: bool = False) -> int:
    """Closed-form parameter count for a stack of ``(m, n)`` linear maps.

    vanilla: ``M*m*n``; batch_ensemble: ``m*n + M*(m+n)``;
    lora_ensemble: ``m*n + M*rank*(m+n)``. ``include_bias`` adds ``M*n``.
    """
    if M < 1:
        raise ConfigError(f"ensemble size must be >= 1, got {M}")
    total = 0
    for m, n in layer_dims:
        if mode == "vanilla":
            total += M * m * n
        elif mode == "batch_ensemble":
            total += m * n + M * (m + n)
        elif mode == "lora_ensemble":
            total += m * n + M * rank * (m + n)
        else:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        if include_bias:
            total += M * n
    return total

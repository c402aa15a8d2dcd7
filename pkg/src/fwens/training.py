"""Pre-training of the single base model and ensemble fine-tuning.

Stage ``pretrain`` trains every parameter of a one-member model. Stage
``finetune`` freezes the slow weights, embeddings and norms and trains the
fast weights, per-member biases and low-rank adapters, which are merged into
the slow weights when training ends.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, NumericError
from .layers import EnsembleLinear, InitSpec
from .model import EnsembleTransformer
from .tasks import TokenSequence
from .tensor import Tensor

log = logging.getLogger(__name__)

PAD_ID = 0


@dataclass(frozen=True)
class NoiseInjection:
    sigma2: float = 1.0
    strength: float = 1.0

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ConfigError(f"prior variance must be > 0, got {self.sigma2}")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "finetune"
    epochs: int = 1
    batch_size: int = 32
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    noise_injection: NoiseInjection | None = None
    seed: int = 0
    rank: int = 8
    alpha: float = 32.0
    merge: bool = True
    max_steps: int | None = None

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"stage must be 'pretrain' or 'finetune', got {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: EnsembleTransformer
    metrics: list[dict] = field(default_factory=list)
    steps: int = 0


# -- losses -----------------------------------------------------------------


def loss_next_token(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean natural-log NLL of ``targets`` over masked positions and members.

    ``logits`` is (M, B, T, V); ``targets`` and ``mask`` are (B, T).
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataError("loss mask selects no positions")
    M, B, L, V = logits.shape
    flat = np.flatnonzero(mask.reshape(-1))
    sel = logits.reshape(M, B * L, V)[:, flat]
    return _nll(sel, np.asarray(targets).reshape(-1)[flat])


def _nll(logits: Tensor, targets: np.ndarray) -> Tensor:
    M = logits.shape[0]
    picked = T.take_last(T.log_softmax(logits, axis=-1), np.broadcast_to(targets, (M, targets.size)))
    return -picked.mean()


def anchored_penalty(params: Sequence[Tensor], anchors: Sequence[np.ndarray], sigma2: float,
                     strength: float, n_total: int) -> Tensor:
    """``strength * sum ||theta - anchor||^2 / (2 * sigma2 * n_total)``."""
    if not sigma2 > 0:
        raise ConfigError(f"prior variance must be > 0, got {sigma2}")
    if len(params) != len(anchors):
        raise ConfigError("need one anchor per parameter")
    total = None
    for p, a in zip(params, anchors):
        if p.shape != np.shape(a):
            raise ConfigError(f"anchor shape {np.shape(a)} does not match parameter {p.shape}")
        diff = p - Tensor(a, dtype=p.dtype)
        sq = (diff * diff).sum()
        total = sq if total is None else total + sq
    return total * (strength / (2.0 * sigma2 * n_total))


def draw_anchors(model: EnsembleTransformer, params: dict[str, Tensor], init: InitSpec,
                 seed: int) -> dict[str, np.ndarray]:
    """One anchor per trainable tensor from that tensor's initial distribution."""
    rng = np.random.default_rng([seed, 97])
    linears = model.linears()
    anchors = {}
    for name, p in params.items():
        lname, pname = name.rsplit(".", 1)
        lin = linears.get(lname)
        if pname in ("fast_r", "fast_s"):
            std = init.std(lin.m, lin.n)
            anchors[name] = rng.normal(init.mean, std, size=p.shape)
        elif pname == "lora_A":
            rank = p.shape[-2]
            anchors[name] = rng.normal(0.0, np.sqrt(1.0 / rank), size=p.shape)
        elif pname == "lora_B":
            anchors[name] = np.zeros(p.shape)
        else:
            anchors[name] = p.data.astype(np.float64).copy()
    return anchors


# -- optimiser --------------------------------------------------------------


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


# -- batching ---------------------------------------------------------------


def make_batch(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-padded (inputs, targets, mask); mask marks answer targets."""
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), PAD_ID, dtype=np.int64)
    role = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s.ids
        role[i, : len(s)] = s.role
    return ids[:, :-1], ids[:, 1:], role[:, 1:]


def batch_loss(model: EnsembleTransformer, seqs: Sequence[TokenSequence]) -> Tensor:
    inputs, targets, mask = make_batch(seqs)
    if not mask.any():
        raise DataError("batch contains no answer tokens")
    logits = model.forward(inputs, positions=mask)
    return _nll(logits, targets[mask])


def evaluate_nll(model: EnsembleTransformer, seqs: Sequence[TokenSequence], batch_size: int = 256,
                 mixture: bool = True) -> float:
    """Mean NLL (nats) of answer tokens.

    With ``mixture`` the target probability is the uniform member average;
    otherwise member NLLs are averaged.
    """
    total, count = 0.0, 0
    with T.no_grad():
        for lo in range(0, len(seqs), batch_size):
            inputs, targets, mask = make_batch(seqs[lo: lo + batch_size])
            logits = model.forward(inputs, positions=mask).data.astype(np.float64)
            z = logits - logits.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            tgt = targets[mask]
            picked = np.take_along_axis(logp, np.broadcast_to(tgt, logp.shape[:2])[..., None], axis=-1)[..., 0]
            if mixture:
                mx = picked.max(axis=0)
                nll = -(mx + np.log(np.exp(picked - mx).mean(axis=0)))
            else:
                nll = -picked.mean(axis=0)
            total += float(nll.sum())
            count += tgt.size
    if count == 0:
        raise DataError("no answer tokens to evaluate")
    return total / count


# -- training loop ------------------------------------------------------------


def prepare_stage(model: EnsembleTransformer, config: TrainConfig) -> None:
    if config.stage == "pretrain":
        model.set_trainable(shared=True, linear_names=("U", "bias"))
        return
    if model.config.kind == "lora_ensemble":
        model.set_trainable(shared=False, linear_names=("lora_A", "lora_B", "bias"))
        return
    if any(isinstance(l, EnsembleLinear) and l.adapter is None for l in model.linears().values()):
        model.attach_adapters(config.rank, config.alpha, seed=config.seed)
    model.set_trainable(shared=False, linear_names=("fast_r", "fast_s", "bias", "lora_A", "lora_B"))


def train(
    model: EnsembleTransformer,
    data: Sequence[TokenSequence],
    config: TrainConfig,
    val_data: Sequence[TokenSequence] | None = None,
    log_path: str | Path | None = None,
    init: InitSpec = InitSpec(),
) -> TrainResult:
    if not data:
        raise DataError("training set is empty")
    prepare_stage(model, config)
    params = model.trainable_parameters()
    opt = Adam(list(params.values()), config.lr, config.betas, config.eps)
    noise = config.noise_injection if config.stage == "finetune" else None
    anchors = None
    if noise is not None and noise.strength > 0:
        anchors = draw_anchors(model, params, init, config.seed)
        n_total = sum(p.size for p in params.values())
    result = TrainResult(model)
    steps = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(data))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            if config.max_steps is not None and steps >= config.max_steps:
                break
            batch = [data[i] for i in order[lo: lo + config.batch_size]]
            try:
                nll = batch_loss(model, batch)
                loss = nll
                if anchors is not None:
                    keys = list(params)
                    loss = loss + anchored_penalty([params[k] for k in keys], [anchors[k] for k in keys],
                                                   noise.sigma2, noise.strength, n_total)
                opt.zero_grad()
                loss.backward()
                opt.step()
            except NumericError as exc:
                raise NumericError(f"training diverged at epoch {epoch}, step {steps}: {exc}") from exc
            losses.append(nll.item())
            steps += 1
        record = {"epoch": epoch, "split": "train", "loss": float(np.mean(losses)) if losses else None,
                  "nll": float(np.mean(losses)) if losses else None}
        result.metrics.append(record)
        if val_data:
            v = evaluate_nll(model, val_data, mixture=False)
            result.metrics.append({"epoch": epoch, "split": "val", "loss": v, "nll": v})
        log.info("epoch %d: %s", epoch, result.metrics[-1])
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                for r in result.metrics[-2 if val_data else -1:]:
                    fh.write(json.dumps({"stage": config.stage, **r}) + "\n")
        if config.max_steps is not None and steps >= config.max_steps:
            break
    result.steps = steps
    if config.stage == "finetune" and config.merge:
        model.merge_adapters()
    model.set_trainable(shared=False, linear_names=())
    return result

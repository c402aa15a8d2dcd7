"""Small pre-norm decoder-only transformer whose linear maps are ensembles.

All ``M`` members run in one pass: the shared embedding output is broadcast
along a leading member axis and every linear map is an
:class:`~fwens.layers.EnsembleLinear` (or, for the baseline, a
:class:`~fwens.layers.LoraEnsembleLinear`). Logits come out as
``(M, batch, seq, vocab)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import EnsembleLinear, InitSpec, LoraEnsembleLinear
from .tensor import Tensor

LINEAR_NAMES = ("q", "k", "v", "o", "fc1", "fc2")
NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_seq_len: int = 40
    M: int = 4
    seed: int = 0
    mlp_ratio: int = 4
    kind: str = "batch_ensemble"
    prev_token_emb: bool = True

    def __post_init__(self):
        if self.vocab_size > 256 or self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be in [2, 256], got {self.vocab_size}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.M < 1:
            raise ConfigError(f"ensemble size must be >= 1, got {self.M}")
        if self.kind not in ("batch_ensemble", "lora_ensemble"):
            raise ConfigError(f"unknown model kind {self.kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def linear_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) of every linear map, in parameter order."""
        d, f = self.d_model, self.d_model * self.mlp_ratio
        block = [(d, d)] * 4 + [(d, f), (f, d)]
        return block * self.n_layers + [(d, self.vocab_size)]


@dataclass
class TokenDistribution:
    """Per-member next-token distributions and their uniform mixture (float64)."""

    member_probs: np.ndarray
    mixture: np.ndarray = field(default=None)

    def __post_init__(self):
        self.member_probs = np.asarray(self.member_probs, dtype=np.float64)
        if self.member_probs.ndim != 2:
            raise ShapeError(f"member_probs must be (M, vocab), got {self.member_probs.shape}")
        if self.mixture is None:
            self.mixture = self.member_probs.mean(axis=0)
        self.mixture = np.asarray(self.mixture, dtype=np.float64)

    @property
    def M(self) -> int:
        return self.member_probs.shape[0]


class EnsembleTransformer:
    def __init__(self, config: ModelConfig, dtype=None):
        self.config = config
        dtype = np.dtype(dtype or T.get_default_dtype())
        self.dtype = dtype
        c = config
        ss = np.random.SeedSequence(c.seed)
        seeds = iter(ss.generate_state(4 + len(LINEAR_NAMES) * c.n_layers + 1))
        rng = np.random.default_rng(next(seeds))
        d = c.d_model
        self.tok_emb = Tensor(rng.normal(0, 0.2, size=(c.vocab_size, d)), requires_grad=True, dtype=dtype)
        self.pos_emb = Tensor(rng.normal(0, 0.2, size=(c.max_seq_len, d)), requires_grad=True, dtype=dtype)
        self.prev_emb = None
        if c.prev_token_emb:
            self.prev_emb = Tensor(rng.normal(0, 0.2, size=(c.vocab_size, d)), requires_grad=True, dtype=dtype)
        self.blocks: list[dict] = []
        dims = dict(zip(LINEAR_NAMES, c.linear_dims()[:6]))
        for _ in range(c.n_layers):
            block = {
                "ln1_g": Tensor(np.ones(d), requires_grad=True, dtype=dtype),
                "ln1_b": Tensor(np.zeros(d), requires_grad=True, dtype=dtype),
                "ln2_g": Tensor(np.ones(d), requires_grad=True, dtype=dtype),
                "ln2_b": Tensor(np.zeros(d), requires_grad=True, dtype=dtype),
            }
            for name in LINEAR_NAMES:
                m, n = dims[name]
                block[name] = self._new_linear(m, n, int(next(seeds)))
            # residual projections start small
            for name in ("o", "fc2"):
                lin = block[name]
                lin.U = Tensor(lin.U.data / np.sqrt(2 * c.n_layers), requires_grad=True, dtype=dtype)
            self.blocks.append(block)
        self.lnf_g = Tensor(np.ones(d), requires_grad=True, dtype=dtype)
        self.lnf_b = Tensor(np.zeros(d), requires_grad=True, dtype=dtype)
        self.head = self._new_linear(d, c.vocab_size, int(next(seeds)))

    def _new_linear(self, m: int, n: int, seed: int):
        c = self.config
        if c.kind == "lora_ensemble":
            return LoraEnsembleLinear(m, n, c.M, seed=seed, dtype=self.dtype)
        return EnsembleLinear(m, n, c.M, seed=seed, dtype=self.dtype)

    # -- structure --------------------------------------------------------
    @property
    def M(self) -> int:
        return self.config.M

    def linears(self) -> dict[str, EnsembleLinear | LoraEnsembleLinear]:
        out = {}
        for i, block in enumerate(self.blocks):
            for name in LINEAR_NAMES:
                out[f"blocks.{i}.{name}"] = block[name]
        out["head"] = self.head
        return out

    def shared_parameters(self) -> dict[str, Tensor]:
        """Parameters with no member axis (embeddings and layer norms)."""
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        if self.prev_emb is not None:
            out["prev_emb"] = self.prev_emb
        for i, block in enumerate(self.blocks):
            for key in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                out[f"blocks.{i}.{key}"] = block[key]
        out["lnf_g"] = self.lnf_g
        out["lnf_b"] = self.lnf_b
        return out

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.shared_parameters())
        for lname, lin in self.linears().items():
            for pname, p in lin.parameters().items():
                out[f"{lname}.{pname}"] = p
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.parameters().items() if p.requires_grad}

    def set_trainable(self, shared: bool, linear_names: Sequence[str]) -> None:
        for p in self.shared_parameters().values():
            p.requires_grad = shared
        for lin in self.linears().values():
            for key, p in lin.parameters().items():
                p.requires_grad = key in linear_names

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        """Replace a named parameter (used by checkpoint loading)."""
        parts = name.split(".")
        if name in self.shared_parameters():
            target = self.shared_parameters()[name]
            target.data = np.array(value, dtype=target.dtype).reshape(target.shape)
            return
        lname, pname = ".".join(parts[:-1]), parts[-1]
        lin = self.linears().get(lname)
        if lin is None:
            raise KeyError(f"unknown parameter {name!r}")
        if isinstance(lin, EnsembleLinear) and pname.startswith("lora_") and lin.adapter is None:
            lin.attach_adapter()
        params = lin.parameters()
        if pname not in params:
            raise KeyError(f"unknown parameter {name!r}")
        p = params[pname]
        if tuple(np.shape(value)) != p.shape:
            raise ShapeError(f"{name}: stored shape {np.shape(value)} != model shape {p.shape}")
        p.data = np.array(value, dtype=p.dtype)

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.parameters().values() if p.requires_grad or not trainable_only)

    # -- ensemble construction ----------------------------------------------
    @classmethod
    def from_base(cls, base: "EnsembleTransformer", M: int, init: InitSpec | None = InitSpec(),
                  kind: str = "batch_ensemble", rank: int = 8, alpha: float = 32.0,
                  seed: int = 0) -> "EnsembleTransformer":
        """Ensemble whose shared weights copy a single-member base model.

        Fast weights are drawn from ``init`` with a per-layer derived seed.
        """
        if base.M != 1:
            raise ConfigError(f"base model must have one member, got {base.M}")
        config = replace(base.config, M=M, kind=kind)
        model = cls.__new__(cls)
        model.config = config
        model.dtype = base.dtype
        model.tok_emb = base.tok_emb.detach()
        model.pos_emb = base.pos_emb.detach()
        model.prev_emb = None if base.prev_emb is None else base.prev_emb.detach()
        model.lnf_g = base.lnf_g.detach()
        model.lnf_b = base.lnf_b.detach()
        layer_seeds = iter(np.random.SeedSequence([seed, 7]).generate_state(len(base.linears())))
        model.blocks = []

        def convert(lin):
            s = int(next(layer_seeds))
            if kind == "lora_ensemble":
                return LoraEnsembleLinear.from_base(lin, M, rank, alpha, seed=s)
            new = EnsembleLinear.from_base(lin, M)
            if init is not None:
                new.init_fast_weights(replace(init, seed=s))
            return new

        for block in base.blocks:
            nb = {k: block[k].detach() for k in ("ln1_g", "ln1_b", "ln2_g", "ln2_b")}
            for name in LINEAR_NAMES:
                nb[name] = convert(block[name])
            model.blocks.append(nb)
        model.head = convert(base.head)
        return model

    def attach_adapters(self, rank: int = 8, alpha: float = 32.0, seed: int = 0) -> None:
        seeds = iter(np.random.SeedSequence([seed, 11]).generate_state(len(self.linears())))
        for lin in self.linears().values():
            if isinstance(lin, EnsembleLinear):
                lin.attach_adapter(rank, alpha, seed=int(next(seeds)))

    def merge_adapters(self) -> int:
        return sum(lin.merge_adapter() for lin in self.linears().values() if isinstance(lin, EnsembleLinear)
                   and lin.adapter is not None)

    def member_model(self, i: int) -> "EnsembleTransformer":
        """Stand-alone single model carrying member ``i``'s dense weights."""
        base = EnsembleTransformer.__new__(EnsembleTransformer)
        base.config = replace(self.config, M=1, kind="batch_ensemble")
        base.dtype = self.dtype
        for key in ("tok_emb", "pos_emb", "lnf_g", "lnf_b"):
            setattr(base, key, getattr(self, key).detach())
        base.prev_emb = None if self.prev_emb is None else self.prev_emb.detach()

        def dense(lin):
            out = EnsembleLinear(lin.m, lin.n, 1, U=lin.effective_weight(i), dtype=self.dtype)
            out.bias = Tensor(lin.bias.data[i:i + 1], requires_grad=True, dtype=self.dtype)
            return out

        base.blocks = []
        for block in self.blocks:
            nb = {k: block[k].detach() for k in ("ln1_g", "ln1_b", "ln2_g", "ln2_b")}
            for name in LINEAR_NAMES:
                nb[name] = dense(block[name])
            base.blocks.append(nb)
        base.head = dense(self.head)
        return base

    # -- forward ------------------------------------------------------------
    def hidden(self, ids: np.ndarray) -> Tensor:
        """Final-norm hidden states, shape (M, B, T, d)."""
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        B, L = ids.shape
        c = self.config
        if L > c.max_seq_len:
            raise ShapeError(f"sequence length {L} exceeds max_seq_len {c.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
            raise ShapeError(f"token ids must lie in [0, {c.vocab_size})")
        M, d, H = c.M, c.d_model, c.n_heads
        dh = d // H
        h = T.embedding(self.tok_emb, ids) + self.pos_emb[:L]
        if self.prev_emb is not None:
            # shared previous-token embedding; position 0 sees PAD (id 0)
            prev = np.concatenate([np.zeros((B, 1), dtype=ids.dtype), ids[:, :-1]], axis=1)
            h = h + T.embedding(self.prev_emb, prev)
        h = T.broadcast_to(h.reshape(1, B, L, d), (M, B, L, d))
        causal = np.triu(np.full((L, L), NEG_INF, dtype=self.dtype), k=1)
        scale = 1.0 / np.sqrt(dh)
        for block in self.blocks:
            a = T.layer_norm(h, block["ln1_g"], block["ln1_b"])
            q = block["q"](a).reshape(M, B, L, H, dh).transpose(0, 1, 3, 2, 4)
            k = block["k"](a).reshape(M, B, L, H, dh).transpose(0, 1, 3, 4, 2)
            v = block["v"](a).reshape(M, B, L, H, dh).transpose(0, 1, 3, 2, 4)
            att = T.softmax((q @ k) * scale + causal, axis=-1)
            ctx = (att @ v).transpose(0, 1, 3, 2, 4).reshape(M, B, L, d)
            h = h + block["o"](ctx)
            f = T.layer_norm(h, block["ln2_g"], block["ln2_b"])
            h = h + block["fc2"](T.gelu(block["fc1"](f)))
        return T.layer_norm(h, self.lnf_g, self.lnf_b)

    def forward(self, ids: np.ndarray, positions: np.ndarray | None = None) -> Tensor:
        """Logits for every member.

        Without ``positions`` the result is (M, B, T, V). With a boolean
        (B, T) ``positions`` mask only the selected positions are projected,
        giving (M, K, V) in row-major order of the mask.
        """
        h = self.hidden(ids)
        if positions is None:
            return self.head(h)
        M, B, L, d = h.shape
        flat = np.flatnonzero(np.asarray(positions).reshape(-1))
        hs = h.reshape(M, B * L, d)[:, flat]
        return self.head(hs)

    __call__ = forward

    def forward_all_members(self, ids: np.ndarray) -> Tensor:
        return self.forward(ids)

    def last_token_probs(self, ids: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        """float64 next-token probabilities after each row's last real token, (M, B, V)."""
        ids = np.asarray(ids)
        lengths = np.asarray(lengths)
        pos = np.zeros(ids.shape, dtype=bool)
        pos[np.arange(ids.shape[0]), lengths - 1] = True
        with T.no_grad():
            logits = self.forward(ids, positions=pos).data.astype(np.float64)
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def mixture_next_token(self, prefix: Sequence[int]) -> TokenDistribution:
        prefix = np.asarray(prefix, dtype=np.int64)
        if prefix.size == 0:
            raise ShapeError("prefix must be non-empty")
        probs = self.last_token_probs(prefix[None, :], np.array([prefix.size]))
        return TokenDistribution(probs[:, 0])


def forward_all_members(model: EnsembleTransformer, ids: np.ndarray) -> Tensor:
    return model.forward(ids)


def mixture_next_token(model: EnsembleTransformer, prefix: Sequence[int]) -> TokenDistribution:
    return model.mixture_next_token(prefix)

"""Autoregressive mixed-action policy.

The network decodes a constant all-ones input into one distribution per
action dimension. Dimension ``i`` is conditioned on the already-sampled
dimensions ``i+1 .. D``, so sampling runs from the last dimension to the
first. Continuous dimensions get Beta heads (``softplus(raw) + 1`` for both
shapes) and discrete ones get categorical heads over 3 or 4 classes.

Two trunks are provided:

* ``mlp``: the constant input is concatenated with the zero-padded encoding
  of the conditioning suffix and fed through a shared MLP; each dimension
  has its own output head.
* ``attention``: a causal decoder over the dimensions in sampling order.
  Token 0 embeds the constant input, token ``k`` embeds the value sampled at
  step ``k - 1``; the output at token ``k`` parameterizes the dimension
  sampled at step ``k``.

Everything runs in float64 so gradients can be checked against central
finite differences.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import dist
from .geometry import action_dim, discrete_cardinality

DTYPE = torch.float64
ENC = 4  # per-dimension encoding width (and raw head width)


@dataclass(frozen=True)
class PolicyArch:
    variant: str = "mlp"
    d: int = 32            # size of the constant input
    width: int = 128       # mlp hidden width
    depth: int = 2         # mlp hidden layers
    d_model: int = 64      # attention embedding size
    n_heads: int = 4
    n_layers: int = 2
    head_scale: float = 0.01

    def __post_init__(self):
        if self.variant not in ("mlp", "attention"):
            raise ValueError(f"unknown policy variant {self.variant!r}")
        if self.variant == "attention" and self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return asdict(self)


class SampledBatch(NamedTuple):
    actions: np.ndarray    # (n, D) flat actions
    log_probs: np.ndarray  # (n,) log pi(A | I) under the sampling parameters
    old_raw: torch.Tensor  # (n, D, 4) raw head outputs at sampling time


class Policy(nn.Module):
    def __init__(self, n: int, arch: PolicyArch | None = None, seed: int = 0):
        super().__init__()
        self.n = n
        self.arch = arch or PolicyArch()
        self.D = action_dim(n)
        card = discrete_cardinality(n)
        self.card = card
        self.beta_idx = torch.as_tensor(np.flatnonzero(card == 0))
        self.cat_idx = {k: torch.as_tensor(np.flatnonzero(card == k)) for k in (3, 4)}
        self.register_buffer("I", torch.ones(self.arch.d, dtype=DTYPE))

        gen = torch.Generator().manual_seed(seed)
        a = self.arch
        if a.variant == "mlp":
            sizes = [a.d + ENC * self.D] + [a.width] * a.depth
            self.trunk = nn.ModuleList(
                nn.Linear(i, o, dtype=DTYPE) for i, o in zip(sizes[:-1], sizes[1:]))
            hidden = a.width
            # mask[i, j] is 1 when dimension j conditions dimension i
            mask = torch.triu(torch.ones(self.D, self.D, dtype=DTYPE), diagonal=1)
            self.register_buffer("suffix_mask", mask)
        else:
            self.start = nn.Linear(a.d, a.d_model, dtype=DTYPE)
            self.embed = nn.Linear(ENC, a.d_model, dtype=DTYPE)
            self.pos = nn.Parameter(torch.zeros(self.D, a.d_model, dtype=DTYPE))
            self.blocks = nn.ModuleList(_Block(a.d_model, a.n_heads) for _ in range(a.n_layers))
            self.norm = nn.LayerNorm(a.d_model, dtype=DTYPE)
            hidden = a.d_model
            self.register_buffer("order", torch.arange(self.D - 1, -1, -1))
        self.head_w = nn.Parameter(torch.zeros(self.D, hidden, ENC, dtype=DTYPE))
        self.head_b = nn.Parameter(torch.zeros(self.D, ENC, dtype=DTYPE))
        self._init(gen)

    def _init(self, gen: torch.Generator) -> None:
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name in ("head_w", "head_b"):
                    continue
                if p.dim() == 2 and "norm" not in name and name != "pos":
                    nn.init.orthogonal_(p, generator=gen)
                elif name.endswith("bias"):
                    p.zero_()
                elif name == "pos":
                    p.normal_(0.0, 0.02, generator=gen)
            fan_in = self.head_w.shape[1]
            bound = self.arch.head_scale / math.sqrt(fan_in)
            self.head_w.uniform_(-bound, bound, generator=gen)

    # --- encoding & forward ---------------------------------------------------

    def encode(self, actions: torch.Tensor) -> torch.Tensor:
        """(B, D) flat actions -> (B, D, 4) per-dimension encodings."""
        actions = torch.as_tensor(actions, dtype=DTYPE)
        enc = torch.zeros(*actions.shape, ENC, dtype=DTYPE)
        enc[..., self.beta_idx, 0] = 2.0 * actions[..., self.beta_idx] - 1.0
        for k, idx in self.cat_idx.items():
            enc[..., idx, :k] = F.one_hot(actions[..., idx].long(), k).to(DTYPE)
        return enc

    def raw_heads(self, actions) -> torch.Tensor:
        """Teacher-forced raw head outputs for every dimension, shape (B, D, 4).

        Dimension ``i`` only sees ``actions[:, i+1:]``.
        """
        enc = self.encode(actions)
        B = enc.shape[0]
        if self.arch.variant == "mlp":
            x = (enc.unsqueeze(1) * self.suffix_mask[None, :, :, None]).reshape(B, self.D, -1)
            x = torch.cat([self.I.expand(B, self.D, -1), x], dim=-1)
            h = self._mlp(x)
        else:
            h = self._decode(enc)
        return torch.einsum("bdh,dhk->bdk", h, self.head_w) + self.head_b

    def _mlp(self, x):
        for layer in self.trunk:
            x = torch.tanh(layer(x))
        return x

    def _decode(self, enc, upto: int | None = None):
        """Run the causal decoder; returns hidden states indexed by dimension."""
        B = enc.shape[0]
        L = self.D if upto is None else upto
        start = self.start(self.I).expand(B, 1, -1)
        prev = enc[:, self.order[:L - 1]]
        tokens = torch.cat([start, self.embed(prev)], dim=1) + self.pos[:L]
        for block in self.blocks:
            tokens = block(tokens)
        h = self.norm(tokens)
        if upto is not None:
            return h
        out = torch.empty_like(h)
        out[:, self.order] = h
        return out

    def _step_raw(self, partial: torch.Tensor, i: int, k: int) -> torch.Tensor:
        """Raw head output for dimension ``i`` (sampled at step ``k``)."""
        enc = self.encode(partial)
        B = enc.shape[0]
        if self.arch.variant == "mlp":
            suffix = enc * self.suffix_mask[i][None, :, None]
            x = torch.cat([self.I.expand(B, -1), suffix.reshape(B, -1)], dim=-1)
            h = self._mlp(x)
        else:
            h = self._decode(enc, upto=k + 1)[:, k]
        return h @ self.head_w[i] + self.head_b[i]

    # --- distributions --------------------------------------------------------

    @staticmethod
    def beta_params(raw: torch.Tensor) -> dist.BetaParams:
        return dist.BetaParams(F.softplus(raw[..., 0]) + 1.0, F.softplus(raw[..., 1]) + 1.0)

    def decode_step(self, i: int, suffix) -> dist.BetaParams | dist.CategoricalParams:
        """Distribution of dimension ``i`` (0-based) given values of dims ``i+1..D-1``.

        ``suffix`` holds the values of those dims, either as a length ``D-1-i``
        sequence or as a full flat action whose entries ``<= i`` are ignored.
        """
        if not 0 <= i < self.D:
            raise IndexError(f"dimension {i} outside 0..{self.D - 1}")
        suffix = np.asarray(suffix, dtype=float)
        if suffix.shape[-1] == self.D - 1 - i:
            full = np.zeros(suffix.shape[:-1] + (self.D,))
            full[..., i + 1:] = suffix
        elif suffix.shape[-1] == self.D:
            full = suffix.copy()
            full[..., :i + 1] = 0.0
        else:
            raise ValueError(f"suffix for dimension {i} has wrong length {suffix.shape[-1]}")
        batched = full.ndim == 2
        full = np.atleast_2d(full)
        raw = self._step_raw(torch.as_tensor(full, dtype=DTYPE), i, self.D - 1 - i)
        if not batched:
            raw = raw[0]
        return self._params_for(i, raw)

    def _params_for(self, i, raw):
        k = int(self.card[i])
        if k == 0:
            return self.beta_params(raw)
        return dist.CategoricalParams(raw[..., :k])

    def log_prob_dims(self, raw: torch.Tensor, actions) -> torch.Tensor:
        """Per-dimension log densities, shape (B, D)."""
        actions = torch.as_tensor(actions, dtype=DTYPE)
        out = torch.empty(actions.shape, dtype=DTYPE)
        bi = self.beta_idx
        out[:, bi] = dist.beta_log_pdf(self.beta_params(raw[:, bi]), actions[:, bi])
        for k, idx in self.cat_idx.items():
            out[:, idx] = dist.cat_log_pmf(dist.CategoricalParams(raw[:, idx, :k]),
                                           actions[:, idx].long())
        return out

    def log_prob(self, actions) -> torch.Tensor:
        actions = torch.as_tensor(np.atleast_2d(actions), dtype=DTYPE)
        return self.log_prob_dims(self.raw_heads(actions), actions).sum(-1)

    def kl_and_entropy(self, raw: torch.Tensor, old_raw: torch.Tensor):
        """Per-sample sums over dimensions of KL(new || old) and entropy(new)."""
        old_raw = old_raw.detach()
        bi = self.beta_idx
        new_b, old_b = self.beta_params(raw[:, bi]), self.beta_params(old_raw[:, bi])
        kl = dist.beta_kl(new_b, old_b).sum(-1)
        ent = dist.beta_entropy(new_b).sum(-1)
        for k, idx in self.cat_idx.items():
            new_c = dist.CategoricalParams(raw[:, idx, :k])
            kl = kl + dist.cat_kl(new_c, dist.CategoricalParams(old_raw[:, idx, :k])).sum(-1)
            ent = ent + dist.cat_entropy(new_c).sum(-1)
        return kl, ent

    # --- sampling -------------------------------------------------------------

    @torch.no_grad()
    def sample(self, n: int, rng: np.random.Generator) -> SampledBatch:
        """Sample ``n`` compound actions, last dimension first."""
        if n < 1:
            raise ValueError("n must be >= 1")
        actions = torch.zeros(n, self.D, dtype=DTYPE)
        raws = torch.zeros(n, self.D, ENC, dtype=DTYPE)
        logp = torch.zeros(n, dtype=DTYPE)
        for k, i in enumerate(range(self.D - 1, -1, -1)):
            raw = self._step_raw(actions, i, k)
            raws[:, i] = raw
            params = self._params_for(i, raw)
            if isinstance(params, dist.BetaParams):
                x = torch.as_tensor(dist.beta_sample(params, rng), dtype=DTYPE)
                logp += dist.beta_log_pdf(params, x)
            else:
                x = torch.as_tensor(dist.cat_sample(params, rng), dtype=DTYPE)
                logp += dist.cat_log_pmf(params, x.long())
            actions[:, i] = x
        return SampledBatch(actions.numpy(), logp.numpy(), raws)

    # --- flat parameter vector ------------------------------------------------

    def get_flat(self) -> np.ndarray:
        return nn.utils.parameters_to_vector(self.parameters()).detach().numpy().copy()

    def set_flat(self, theta) -> None:
        theta = torch.as_tensor(np.asarray(theta, dtype=float), dtype=DTYPE)
        n_params = sum(p.numel() for p in self.parameters())
        if theta.numel() != n_params:
            raise ValueError(f"expected {n_params} parameters, got {theta.numel()}")
        nn.utils.vector_to_parameters(theta, self.parameters())

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


class _Block(nn.Module):
    """Pre-norm causal self-attention block."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(d_model, dtype=DTYPE)
        self.qkv = nn.Linear(d_model, 3 * d_model, dtype=DTYPE)
        self.proj = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(d_model, dtype=DTYPE)
        self.ff1 = nn.Linear(d_model, 2 * d_model, dtype=DTYPE)
        self.ff2 = nn.Linear(2 * d_model, d_model, dtype=DTYPE)

    def forward(self, x):
        B, L, E = x.shape
        q, k, v = self.qkv(self.norm1(x)).split(E, dim=-1)
        shape = (B, L, self.n_heads, E // self.n_heads)
        q, k, v = (t.reshape(shape).transpose(1, 2) for t in (q, k, v))
        scores = q @ k.transpose(-1, -2) / math.sqrt(E // self.n_heads)
        causal = torch.ones(L, L, dtype=torch.bool).triu(1)
        att = torch.softmax(scores.masked_fill(causal, float("-inf")), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, L, E)
        x = x + self.proj(y)
        return x + self.ff2(torch.tanh(self.ff1(self.norm2(x))))

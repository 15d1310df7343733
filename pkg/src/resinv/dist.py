"""Beta and categorical primitives for the mixed action policy.

Densities, KL divergences and entropies are written in torch so that any
scalar built from them can be differentiated; they accept tensors of any
broadcastable shape. Sampling draws from a caller-owned
``numpy.random.Generator`` so that streams are reproducible and never shared.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch

EPS = 1e-6  # log-density clamp at the interval endpoints


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


class BetaParams(NamedTuple):
    alpha: torch.Tensor
    beta: torch.Tensor


class CategoricalParams(NamedTuple):
    logits: torch.Tensor


def lbeta(a, b):
    a, b = _t(a), _t(b)
    return torch.lgamma(a) + torch.lgamma(b) - torch.lgamma(a + b)


# --- beta ---------------------------------------------------------------------

def beta_sample(p: BetaParams, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw from Beta(alpha, beta) as a ratio of two gamma variates.

    numpy's gamma sampler is the Marsaglia-Tsang squeeze/rejection method.
    Results are clipped into the open interval.
    """
    alpha = np.asarray(_numpy(p.alpha), dtype=float)
    beta = np.asarray(_numpy(p.beta), dtype=float)
    shape = np.broadcast(alpha, beta).shape if size is None else size
    g1 = rng.standard_gamma(np.broadcast_to(alpha, shape))
    g2 = rng.standard_gamma(np.broadcast_to(beta, shape))
    x = g1 / (g1 + g2)
    tiny = np.finfo(float).tiny
    return np.clip(x, tiny, 1.0 - np.finfo(float).epsneg)


def beta_log_pdf(p: BetaParams, x) -> torch.Tensor:
    """Log density; ``x`` is clamped to ``[EPS, 1 - EPS]``."""
    alpha, beta = _t(p.alpha), _t(p.beta)
    x = torch.clamp(_t(x), EPS, 1.0 - EPS)
    return (alpha - 1) * torch.log(x) + (beta - 1) * torch.log1p(-x) - lbeta(alpha, beta)


def beta_log_pdf_grad(p: BetaParams, x) -> tuple[torch.Tensor, torch.Tensor]:
    """Analytic gradient of :func:`beta_log_pdf` with respect to (alpha, beta)."""
    alpha, beta = _t(p.alpha), _t(p.beta)
    x = torch.clamp(_t(x), EPS, 1.0 - EPS)
    common = torch.digamma(alpha + beta)
    return (torch.log(x) - torch.digamma(alpha) + common,
            torch.log1p(-x) - torch.digamma(beta) + common)


def beta_kl(p: BetaParams, q: BetaParams) -> torch.Tensor:
    """KL(p || q) in closed form."""
    a1, b1, a2, b2 = _t(p.alpha), _t(p.beta), _t(q.alpha), _t(q.beta)
    return (lbeta(a2, b2) - lbeta(a1, b1)
            + (a1 - a2) * torch.digamma(a1)
            + (b1 - b2) * torch.digamma(b1)
            + (a2 - a1 + b2 - b1) * torch.digamma(a1 + b1))


def beta_entropy(p: BetaParams) -> torch.Tensor:
    a, b = _t(p.alpha), _t(p.beta)
    return (lbeta(a, b) - (a - 1) * torch.digamma(a) - (b - 1) * torch.digamma(b)
            + (a + b - 2) * torch.digamma(a + b))


# --- categorical ----------------------------------------------------------------

def cat_log_probs(p: CategoricalParams) -> torch.Tensor:
    return torch.log_softmax(_t(p.logits), dim=-1)


def cat_sample(p: CategoricalParams, rng: np.random.Generator, size=None) -> np.ndarray:
    """Inverse-CDF draw over the last axis of the logits."""
    probs = torch.softmax(_t(p.logits), dim=-1).detach().numpy()
    cdf = np.cumsum(probs, axis=-1)
    shape = cdf.shape[:-1] if size is None else size
    u = rng.random(shape)
    idx = (np.broadcast_to(cdf, (*np.shape(u), cdf.shape[-1])) <= u[..., None]).sum(-1)
    return np.minimum(idx, cdf.shape[-1] - 1)


def cat_log_pmf(p: CategoricalParams, k) -> torch.Tensor:
    logp = cat_log_probs(p)
    k = torch.as_tensor(k, dtype=torch.long)
    k = k.expand(logp.shape[:-1]) if k.dim() == 0 else k
    return torch.gather(logp, -1, k.unsqueeze(-1)).squeeze(-1)


def cat_log_pmf_grad(p: CategoricalParams, k) -> torch.Tensor:
    """Gradient of :func:`cat_log_pmf` with respect to the logits."""
    logits = _t(p.logits)
    onehot = torch.nn.functional.one_hot(torch.as_tensor(k, dtype=torch.long),
                                         logits.shape[-1]).to(logits.dtype)
    return onehot - torch.softmax(logits, dim=-1)


def cat_kl(p: CategoricalParams, q: CategoricalParams) -> torch.Tensor:
    logp, logq = cat_log_probs(p), cat_log_probs(q)
    return (logp.exp() * (logp - logq)).sum(-1)


def cat_entropy(p: CategoricalParams) -> torch.Tensor:
    logp = cat_log_probs(p)
    return -(logp.exp() * logp).sum(-1)


def _numpy(x):
    return x.detach().numpy() if isinstance(x, torch.Tensor) else x

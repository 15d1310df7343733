"""Single-step policy-gradient training loop.

Each iteration samples a batch of compound actions, maps and evaluates them,
turns the dB error into rewards, refreshes the running-reward baseline and
then takes ``Z*E/z`` optimizer steps on the unclipped ratio objective with a
KL penalty towards the sampling-time heads and an entropy bonus.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .evaluator import (EvaluationError, SurrogateConfig, TransferFunction, check_grid,
                        error_db_mag, surrogate_eval_arrays)
from .geometry import CircuitDesign, DesignArrays, GeometryConfig, map_actions_batch
from .policy import Policy, PolicyArch, SampledBatch

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("iteration", "mean_reward", "running_reward", "best_reward",
                  "sum_kl", "sum_entropy", "beta_e")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1500
    batch_size: int = 1024       # Z
    mini_batch: int = 512        # z
    epochs: int = 1              # E
    learning_rate: float = 1e-5
    alpha_r: float = 0.2
    alpha_a: float = 0.2         # accepted for completeness; no term consumes it
    beta_kl: float = 3.0
    beta_e0: float = 1.0
    beta_min: float = 0.02
    beta_decay: float = 0.993
    entropy_schedule: str = "exponential"
    seed: int = 0
    n: int = 4
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if self.mini_batch > self.batch_size or self.batch_size % self.mini_batch:
            raise ValueError("batch_size must be a positive multiple of mini_batch")
        for name in ("iterations", "batch_size", "mini_batch", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("learning_rate", "alpha_r", "beta_kl", "beta_e0", "beta_min", "beta_decay"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.entropy_schedule not in ("exponential", "linear"):
            raise ValueError(f"unknown entropy schedule {self.entropy_schedule!r}")

    @property
    def steps_per_iteration(self) -> int:
        return self.batch_size * self.epochs // self.mini_batch


# --- scalar pieces of the update ------------------------------------------------

def reward(target: TransferFunction, candidate: TransferFunction) -> float:
    check_grid(target, candidate)
    return -float(error_db_mag(target.mag, candidate.mag))


def update_running_reward(prev: float, batch_rewards, alpha_r: float) -> float:
    batch_rewards = np.asarray(batch_rewards, dtype=float)
    if batch_rewards.size == 0:
        raise ValueError("empty reward batch")
    return alpha_r * float(batch_rewards.mean()) + (1.0 - alpha_r) * prev


def advantages(batch_rewards, running: float) -> np.ndarray:
    return np.asarray(batch_rewards, dtype=float) - running


def decay_entropy_coeff(beta_prev: float, beta_min: float, beta_decay: float,
                        schedule: str = "exponential", t: int = 0, T: int = 1) -> float:
    """Entropy coefficient after iteration ``t`` of ``T``."""
    if schedule == "exponential":
        return max(beta_min, beta_prev * beta_decay)
    if schedule == "linear":
        return max(beta_min, beta_min + (T - t) / T * (beta_prev - beta_min))
    raise ValueError(f"unknown entropy schedule {schedule!r}")


def policy_loss(policy: Policy, actions, old_log_probs, old_raw: torch.Tensor, advs,
                beta_kl: float, beta_e: float):
    """Objective on one mini-batch; returns ``(loss, mean sum-KL, mean sum-entropy)``.

    KL and entropy are summed over dimensions and averaged over samples.
    """
    actions = torch.as_tensor(actions, dtype=torch.float64)
    raw = policy.raw_heads(actions)
    logp = policy.log_prob_dims(raw, actions).sum(-1)
    ratio = torch.exp(logp - torch.as_tensor(old_log_probs, dtype=torch.float64))
    surrogate = (ratio * torch.as_tensor(advs, dtype=torch.float64)).mean()
    kl, ent = policy.kl_and_entropy(raw, old_raw)
    kl, ent = kl.mean(), ent.mean()
    return -surrogate + beta_kl * kl - beta_e * ent, kl, ent


# --- evaluation hook ----------------------------------------------------------

class Evaluator:
    """Maps a batch of layouts to magnitudes; NaN rows mark failed samples."""

    def __call__(self, designs: DesignArrays, freqs: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass
class SurrogateEvaluator(Evaluator):
    cfg: SurrogateConfig = field(default_factory=SurrogateConfig)

    def __call__(self, designs, freqs):
        return np.abs(surrogate_eval_arrays(designs, self.cfg, freqs))


@dataclass
class BestDesign:
    reward: float
    design: CircuitDesign
    response: TransferFunction
    action: np.ndarray


@dataclass
class TrainState:
    policy: Policy
    optimizer: torch.optim.Optimizer
    running_reward: float | None = None
    beta_e: float = 1.0
    iteration: int = 0
    best: BestDesign | None = None


@dataclass
class TrainResult:
    best: BestDesign
    history: list[dict]
    state: TrainState


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration])


class Trainer:
    def __init__(self, cfg: TrainConfig, target: TransferFunction,
                 geometry: GeometryConfig | None = None, evaluator: Evaluator | None = None,
                 arch: PolicyArch | None = None, policy: Policy | None = None):
        self.cfg = cfg
        self.target = target
        self.geometry = geometry or GeometryConfig()
        self.evaluator = evaluator or SurrogateEvaluator()
        torch.manual_seed(cfg.seed)
        policy = policy or Policy(cfg.n, arch, seed=cfg.seed)
        if policy.n != cfg.n:
            raise ValueError(f"policy built for N={policy.n}, config asks for N={cfg.n}")
        opt = torch.optim.Adam(policy.parameters(), lr=cfg.learning_rate,
                               betas=(0.9, 0.999), eps=1e-8)
        self.state = TrainState(policy, opt, beta_e=cfg.beta_e0)

    def step(self) -> dict:
        cfg, st = self.cfg, self.state
        st.iteration += 1
        t = st.iteration
        batch = st.policy.sample(cfg.batch_size, iteration_rng(cfg.seed, t))
        designs = map_actions_batch(batch.actions, cfg.n, self.geometry, validate=False)
        try:
            mags = np.asarray(self.evaluator(designs, self.target.freqs), dtype=float)
        except EvaluationError as exc:
            raise EvaluationError(f"iteration {t}: {exc}") from exc
        rewards = -error_db_mag(self.target.mag, mags)
        ok = np.isfinite(rewards)
        if not ok.all():
            log.warning("iteration %d: %d samples failed evaluation and were excluded",
                        t, np.count_nonzero(~ok))
        valid = np.flatnonzero(ok)
        if valid.size < cfg.mini_batch:
            raise EvaluationError(
                f"iteration {t}: only {valid.size} evaluable samples, need {cfg.mini_batch}")
        r = rewards[valid]

        k = valid[int(np.argmax(r))]
        if st.best is None or rewards[k] > st.best.reward:
            st.best = BestDesign(
                float(rewards[k]),
                designs.design(k, self.geometry.g_min_ratio, self.geometry.g_max_ratio,
                               self.geometry.n_budget),
                TransferFunction(self.target.freqs, mags[k].astype(complex)),
                batch.actions[k].copy())

        prior = float(r.mean()) if st.running_reward is None else st.running_reward
        st.running_reward = update_running_reward(prior, r, cfg.alpha_r)
        advs = advantages(r, st.running_reward)

        kls, ents = self._optimize(batch, valid, advs)
        row = dict(iteration=t, mean_reward=float(r.mean()), running_reward=st.running_reward,
                   best_reward=st.best.reward, sum_kl=float(np.mean(kls)),
                   sum_entropy=float(np.mean(ents)), beta_e=st.beta_e)
        st.beta_e = decay_entropy_coeff(st.beta_e, cfg.beta_min, cfg.beta_decay,
                                        cfg.entropy_schedule, t, cfg.iterations)
        return row

    def _optimize(self, batch: SampledBatch, valid: np.ndarray, advs: np.ndarray):
        cfg, st = self.cfg, self.state
        n_chunks = cfg.batch_size // cfg.mini_batch
        kls, ents = [], []
        for _ in range(cfg.epochs):
            for chunk in np.array_split(np.arange(valid.size), n_chunks):
                rows = valid[chunk]
                loss, kl, ent = policy_loss(
                    st.policy, batch.actions[rows], batch.log_probs[rows],
                    batch.old_raw[rows], advs[chunk], cfg.beta_kl, st.beta_e)
                if not torch.isfinite(loss):
                    raise FloatingPointError(
                        f"iteration {st.iteration}: non-finite loss "
                        f"(kl={kl.item()}, entropy={ent.item()})")
                st.optimizer.zero_grad()
                loss.backward()
                st.optimizer.step()
                kls.append(kl.item())
                ents.append(ent.item())
        return kls, ents

    def run(self, iterations: int | None = None,
            callback: Callable[[dict, "Trainer"], None] | None = None) -> TrainResult:
        history = []
        for _ in range(self.cfg.iterations if iterations is None else iterations):
            row = self.step()
            history.append(row)
            if callback is not None:
                callback(row, self)
        return TrainResult(self.state.best, history, self.state)


def train(cfg: TrainConfig, target: TransferFunction, geometry: GeometryConfig | None = None,
          evaluator: Evaluator | None = None, arch: PolicyArch | None = None,
          callback=None) -> TrainResult:
    return Trainer(cfg, target, geometry, evaluator, arch).run(callback=callback)


def random_search(n: int, target: TransferFunction, budget: int, seed: int = 0,
                  geometry: GeometryConfig | None = None, evaluator: Evaluator | None = None,
                  chunk: int = 4096) -> float:
    """Best dB error over ``budget`` uniformly random valid actions."""
    from .geometry import random_actions

    evaluator = evaluator or SurrogateEvaluator()
    rng = np.random.default_rng([seed, 0x5EA])
    best = math.inf
    done = 0
    while done < budget:
        size = min(chunk, budget - done)
        designs = map_actions_batch(random_actions(n, size, rng), n, geometry, validate=False)
        err = error_db_mag(target.mag, evaluator(designs, target.freqs))
        best = min(best, float(np.nanmin(err)))
        done += size
    return best

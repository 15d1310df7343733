import csv
import io
import math
from functools import reduce

import numpy as np
import pytest
import torch

from resinv.evaluator import EvaluationError, SurrogateConfig, TransferFunction, surrogate_eval
from resinv.geometry import CompoundAction, map_actions, random_actions
from resinv.policy import Policy, PolicyArch
from resinv.trainer import (HISTORY_FIELDS, SurrogateEvaluator, TrainConfig, Trainer, advantages,
                            decay_entropy_coeff, policy_loss, random_search, reward,
                            update_running_reward)

SCFG = SurrogateConfig()
SMALL = PolicyArch(width=16)


def _target(n=3, seed=0):
    d = map_actions(CompoundAction.from_flat(random_actions(n, 1, np.random.default_rng(seed))[0], n))
    return TransferFunction.from_magnitude(SCFG.grid(), np.abs(surrogate_eval(d, SCFG).s21))


def _cfg(**kw):
    base = dict(n=3, batch_size=32, mini_batch=16, iterations=3)
    base.update(kw)
    return TrainConfig(**base)


# --- scalar rules -----------------------------------------------------------------

def test_reward_is_negated_error():
    t = _target()
    assert reward(t, t) == 0.0
    half = TransferFunction.from_magnitude(t.freqs, t.mag * 10 ** (-2.5 / 20))
    assert reward(t, half) == pytest.approx(-2.5, abs=1e-12)


def test_running_reward_examples():
    assert update_running_reward(-5.0, [-3.0], 0.2) == pytest.approx(-4.6, abs=1e-15)
    rs = np.array([-1.0, -2.5, -7.0])
    assert update_running_reward(-9.0, rs, 1.0) == rs.mean()
    assert update_running_reward(-9.0, rs, 0.0) == -9.0
    with pytest.raises(ValueError):
        update_running_reward(0.0, [], 0.2)


def test_running_reward_matches_independent_fold():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        alpha = rng.uniform(0.01, 1)
        seq = [rng.normal(-5, 2, rng.integers(1, 9)) for _ in range(rng.integers(1, 30))]
        prior = float(np.sum(seq[0]) / len(seq[0]))
        fold = reduce(lambda r, b: alpha * (sum(b) / len(b)) + (1 - alpha) * r, seq, prior)
        got = prior
        for b in seq:
            got = update_running_reward(got, b, alpha)
        assert abs(got - fold) <= 1e-12


def test_advantages():
    np.testing.assert_array_equal(advantages([-1.0, -3.0], -2.0), [1.0, -1.0])
    np.testing.assert_array_equal(advantages([-2.0] * 4, -2.0), np.zeros(4))
    r = np.random.default_rng(1).normal(size=50)
    assert advantages(r, 0.3).mean() == pytest.approx(r.mean() - 0.3, abs=1e-14)


def test_entropy_decay_examples():
    assert decay_entropy_coeff(1.0, 0.02, 0.993) == pytest.approx(0.993, abs=1e-15)
    assert decay_entropy_coeff(0.0201, 0.02, 0.5) == 0.02
    assert decay_entropy_coeff(0.5, 0.02, 0.993, "linear", t=10, T=10) == 0.02
    assert decay_entropy_coeff(0.5, 0.02, 0.993, "linear", t=0, T=10) == 0.5
    with pytest.raises(ValueError):
        decay_entropy_coeff(0.5, 0.02, 0.993, "cosine")


def _first_iteration_at_floor(cfg):
    beta, t = cfg.beta_e0, 1
    while beta > cfg.beta_min:
        beta = decay_entropy_coeff(beta, cfg.beta_min, cfg.beta_decay)
        t += 1
    return t


def test_entropy_floor_reached_at_iteration_558():
    cfg = TrainConfig()
    assert _first_iteration_at_floor(cfg) == 558
    # 557 decays separate the first iteration from the first at the floor
    assert math.ceil(math.log(0.02) / math.log(0.993)) == 557


def test_config_validation_and_defaults():
    cfg = TrainConfig()
    assert (cfg.iterations, cfg.batch_size, cfg.mini_batch, cfg.epochs) == (1500, 1024, 512, 1)
    assert (cfg.learning_rate, cfg.alpha_r, cfg.beta_kl) == (1e-5, 0.2, 3.0)
    assert (cfg.beta_e0, cfg.beta_min, cfg.beta_decay) == (1.0, 0.02, 0.993)
    assert cfg.steps_per_iteration == 2
    for bad in (dict(mini_batch=600), dict(mini_batch=2048), dict(beta_kl=0.0),
                dict(learning_rate=-1.0), dict(entropy_schedule="step"), dict(n=1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# --- loss -------------------------------------------------------------------------

def _loss_setup(seed=0, count=4):
    pol = Policy(3, SMALL, seed=seed)
    with torch.no_grad():
        g = torch.Generator().manual_seed(seed)
        for p in pol.parameters():
            p.add_(0.2 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    batch = pol.sample(count, np.random.default_rng(seed))
    return pol, batch


def test_loss_at_snapshot_with_zero_advantages():
    pol, batch = _loss_setup()
    loss, kl, ent = policy_loss(pol, batch.actions, batch.log_probs, batch.old_raw,
                                np.zeros(4), beta_kl=3.0, beta_e=0.37)
    assert abs(kl.item()) <= 1e-10
    assert abs(loss.item() - (-0.37 * ent.item())) <= 1e-10
    # the KL term has zero gradient at the snapshot
    pol.zero_grad()
    kl.backward()
    g = torch.cat([p.grad.reshape(-1) for p in pol.parameters()])
    assert g.abs().max().item() <= 1e-10


def test_doubling_advantages_doubles_surrogate_term():
    pol, batch = _loss_setup(1)
    advs = np.array([0.5, -1.0, 2.0, 0.25])

    def surrogate(a):
        loss, kl, ent = policy_loss(pol, batch.actions, batch.log_probs, batch.old_raw, a, 3.0, 0.5)
        return loss.item() - 3.0 * kl.item() + 0.5 * ent.item()

    assert surrogate(2 * advs) == pytest.approx(2 * surrogate(advs), rel=1e-12)
    assert surrogate(advs) == pytest.approx(-advs.mean(), rel=1e-12)  # ratio 1 at the snapshot


def test_loss_gradient_matches_finite_differences():
    pol, batch = _loss_setup(2)
    with torch.no_grad():  # move away from the snapshot so every term is active
        g = torch.Generator().manual_seed(9)
        for p in pol.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    advs = np.array([1.0, -0.5, 0.3, -2.0])

    def loss():
        return policy_loss(pol, batch.actions, batch.log_probs, batch.old_raw, advs, 3.0, 0.7)[0]

    pol.zero_grad()
    loss().backward()
    grad = torch.cat([p.grad.reshape(-1) for p in pol.parameters()]).numpy().copy()
    theta = pol.get_flat()
    fd = np.empty_like(theta)
    h = 1e-6
    with torch.no_grad():
        for j in range(theta.size):
            t = theta.copy()
            t[j] += h
            pol.set_flat(t)
            up = loss().item()
            t[j] -= 2 * h
            pol.set_flat(t)
            fd[j] = (up - loss().item()) / (2 * h)
    pol.set_flat(theta)
    assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) <= 1e-4


# --- training loop ----------------------------------------------------------------

class CountingEvaluator(SurrogateEvaluator):
    calls = 0

    def __call__(self, designs, freqs):
        self.calls += 1
        return super().__call__(designs, freqs)


def test_gradient_steps_per_iteration():
    for Z, z, E in [(32, 16, 1), (32, 8, 2), (1024, 512, 1)]:
        tr = Trainer(_cfg(batch_size=Z, mini_batch=z, epochs=E), _target(), arch=SMALL)
        steps = []
        orig = tr.state.optimizer.step
        tr.state.optimizer.step = lambda *a, **k: (steps.append(1), orig(*a, **k))[1]
        tr.step()
        assert len(steps) == Z * E // z


def test_history_rows_and_best_tracking():
    ev = CountingEvaluator()
    res = Trainer(_cfg(iterations=6), _target(), evaluator=ev, arch=SMALL).run()
    assert ev.calls == 6
    assert [r["iteration"] for r in res.history] == list(range(1, 7))
    assert all(set(r) == set(HISTORY_FIELDS) for r in res.history)
    best = [r["best_reward"] for r in res.history]
    assert all(b2 >= b1 for b1, b2 in zip(best, best[1:]))
    assert best[-1] == res.best.reward <= 0
    # the stored response is the one that earned the best reward
    assert reward(_target(), res.best.response) == pytest.approx(res.best.reward, abs=1e-12)
    assert reward(_target(), surrogate_eval(res.best.design, SCFG)) == pytest.approx(
        res.best.reward, abs=1e-9)
    betas = [r["beta_e"] for r in res.history]
    assert betas[0] == 1.0 and betas[1] == pytest.approx(0.993)


def test_first_running_reward_is_first_batch_mean():
    tr = Trainer(_cfg(), _target(), arch=SMALL)
    row = tr.step()
    assert row["running_reward"] == pytest.approx(row["mean_reward"], abs=1e-12)


def _history_bytes(rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, HISTORY_FIELDS)
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def test_training_is_deterministic():
    a = Trainer(_cfg(seed=5), _target(), arch=SMALL).run()
    b = Trainer(_cfg(seed=5), _target(), arch=SMALL).run()
    c = Trainer(_cfg(seed=6), _target(), arch=SMALL).run()
    assert _history_bytes(a.history) == _history_bytes(b.history)
    np.testing.assert_array_equal(a.state.policy.get_flat(), b.state.policy.get_flat())
    assert _history_bytes(a.history) != _history_bytes(c.history)


def test_parameters_move_with_training():
    tr = Trainer(_cfg(), _target(), arch=SMALL)
    before = tr.state.policy.get_flat()
    tr.run()
    assert not np.array_equal(before, tr.state.policy.get_flat())


class FlakyEvaluator(SurrogateEvaluator):
    def __init__(self, fail_every):
        super().__init__()
        self.fail_every = fail_every

    def __call__(self, designs, freqs):
        out = super().__call__(designs, freqs)
        out[::self.fail_every] = np.nan
        return out


def test_failed_samples_are_excluded(caplog):
    tr = Trainer(_cfg(batch_size=32, mini_batch=8), _target(), evaluator=FlakyEvaluator(4),
                 arch=SMALL)
    with caplog.at_level("WARNING"):
        row = tr.step()
    assert "8 samples failed" in caplog.text
    assert np.isfinite(row["mean_reward"]) and np.isfinite(row["sum_kl"])


def test_iteration_aborts_when_too_few_samples_remain():
    tr = Trainer(_cfg(batch_size=32, mini_batch=16), _target(), evaluator=FlakyEvaluator(1),
                 arch=SMALL)
    with pytest.raises(EvaluationError, match="only 0 evaluable samples"):
        tr.step()


def test_policy_size_must_match_config():
    with pytest.raises(ValueError):
        Trainer(_cfg(n=4), _target(), policy=Policy(3, SMALL))


def _displacement(beta_kl, Z, z, E):
    cfg = _cfg(batch_size=Z, mini_batch=z, epochs=E, beta_kl=beta_kl, iterations=1)
    tr = Trainer(cfg, _target())
    theta0 = tr.state.policy.get_flat()
    tr.step()
    return np.linalg.norm(tr.state.policy.get_flat() - theta0)


def test_single_step_does_not_feel_kl_weight():
    # the KL gradient vanishes at the snapshot, so the first step ignores beta_kl
    assert _displacement(1e6, 32, 32, 1) == pytest.approx(_displacement(3.0, 32, 32, 1), rel=1e-6)


def test_large_kl_weight_holds_policy_near_snapshot():
    small, large = _displacement(3.0, 256, 8, 4), _displacement(1e6, 256, 8, 4)
    assert large * 10 <= small


def test_random_search_budget_and_determinism():
    t = _target()
    a = random_search(3, t, 500, seed=1)
    assert a == random_search(3, t, 500, seed=1)
    assert a >= 0 and random_search(3, t, 5000, seed=1, chunk=700) <= random_search(3, t, 5, seed=1)

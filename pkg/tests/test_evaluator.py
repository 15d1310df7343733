import math

import numpy as np
import pytest

from resinv.evaluator import (
    MAG_FLOOR, GridMismatchError, SurrogateConfig, TransferFunction, error_db, error_db_mag,
    insertion_loss, passband, passband_iou, surrogate_eval, surrogate_eval_arrays)
from resinv.geometry import (CircuitDesign, CompoundAction, DesignArrays, Resonator, map_actions,
                             map_actions_batch, random_actions)

CFG = SurrogateConfig()


def s21_reference(design, cfg, freqs):
    """Direct evaluation of the coupling-matrix model, one frequency at a time."""
    n = design.n
    a = design.side
    fi = np.array([cfg.f_scale / (4 * a) * (1 + cfg.slit_detune * r.slit_offset)
                   for r in design.resonators])
    f0 = math.prod(fi) ** (1 / n)
    M = np.zeros((n, n))
    for i, ri in enumerate(design.resonators):
        for j, rj in enumerate(design.resonators):
            if i == j:
                continue
            d = max(0.0, math.dist(ri.center, rj.center) - a)
            c = round(math.cos(math.pi / 2 * (ri.slit_dir - rj.slit_dir)))
            o = 0.3 if c == 0 else c
            M[i, j] = cfg.k0 * math.exp(-d / (cfg.decay * a)) * o
    R = np.zeros((n, n))
    R[0, 0] = R[-1, -1] = 1 / cfg.q_e
    D = np.diag((f0 / fi - fi / f0) / cfg.frac_bw)
    out = []
    for w in freqs:
        lam = (w / f0 - f0 / w) / cfg.frac_bw
        A = lam * np.eye(n) + D - 1j * R + M
        out.append(-2j / cfg.q_e * np.linalg.inv(A)[n - 1, 0])
    return np.array(out)


def _design(n, seed):
    rng = np.random.default_rng(seed)
    return map_actions(CompoundAction.from_flat(random_actions(n, 1, rng)[0], n))


def _tf(mag, freqs=None):
    mag = np.asarray(mag, dtype=float)
    freqs = np.arange(1, mag.size + 1) * 1e9 if freqs is None else freqs
    return TransferFunction.from_magnitude(freqs, mag)


# --- surrogate --------------------------------------------------------------------

@pytest.mark.parametrize("n", [2, 3, 4, 6])
def test_surrogate_matches_direct_reference(n):
    for seed in range(5):
        d = _design(n, seed)
        got = surrogate_eval(d, CFG).s21
        ref = s21_reference(d, CFG, CFG.grid())
        np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-14)


def test_batch_and_single_agree():
    rng = np.random.default_rng(1)
    flat = random_actions(4, 20, rng)
    arr = map_actions_batch(flat, 4)
    batch = surrogate_eval_arrays(arr, CFG)
    for k in range(20):
        np.testing.assert_array_equal(batch[k], surrogate_eval(arr.design(k), CFG).s21)


def test_uncoupled_pair_transmits_nothing():
    far = 1e4
    d = CircuitDesign((Resonator((0.0, 0.0), 0.9, 0, 0.0), Resonator((far, 0.0), 0.9, 0, 0.0)))
    freqs = np.array([210e9, 250e9, 300e9, 350e9, 390e9])
    got = surrogate_eval(d, CFG, freqs).s21
    ref = s21_reference(d, CFG, freqs)
    np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-300)
    assert np.all(np.abs(got) < 1e-100)


def test_symmetric_pair_is_symmetric_in_log_frequency():
    a = 0.9
    d = CircuitDesign((Resonator((0.0, 0.0), a, 1, 0.03), Resonator((a + 0.2, 0.0), a, 3, 0.03)))
    f0 = CFG.f_scale / (4 * a) * (1 + CFG.slit_detune * 0.03)
    u = np.linspace(0.01, 0.3, 40)
    freqs = f0 * np.exp(np.concatenate([-u[::-1], u]))
    mag = np.abs(surrogate_eval(d, CFG, freqs).s21)
    np.testing.assert_allclose(mag[:40], mag[40:][::-1], rtol=0, atol=1e-10)


def test_surrogate_deterministic():
    d = _design(5, 3)
    np.testing.assert_array_equal(surrogate_eval(d).s21, surrogate_eval(d).s21)


def test_translation_invariance():
    rng = np.random.default_rng(4)
    for seed in range(10):
        d = _design(4, seed)
        t = rng.normal(0, 5, 2)
        moved = CircuitDesign(tuple(
            Resonator((r.center[0] + t[0], r.center[1] + t[1]), r.side, r.slit_dir, r.slit_offset)
            for r in d.resonators))
        np.testing.assert_allclose(surrogate_eval(moved).s21, surrogate_eval(d).s21,
                                   rtol=1e-9, atol=1e-12)


def test_continuity_smoke():
    d = _design(4, 5)
    r = d.resonators[2]
    nudged = list(d.resonators)
    nudged[2] = Resonator((r.center[0] + 1e-6, r.center[1]), r.side, r.slit_dir, r.slit_offset)
    diff = np.abs(np.abs(surrogate_eval(CircuitDesign(tuple(nudged))).s21)
                  - np.abs(surrogate_eval(d).s21))
    assert diff.max() <= 1e-3


def test_responses_are_passive_and_varied():
    rng = np.random.default_rng(6)
    arr = map_actions_batch(random_actions(3, 200, rng), 3)
    mag = np.abs(surrogate_eval_arrays(arr, CFG))
    assert np.all(mag <= 1 + 1e-9)
    peaks = 20 * np.log10(mag.max(axis=1))
    assert np.median(peaks) > -10  # most random layouts pass something in band
    assert np.std(error_db_mag(mag[:1], mag)) > 1


def test_config_validation():
    with pytest.raises(ValueError):
        SurrogateConfig(q_e=0)
    with pytest.raises(ValueError):
        SurrogateConfig(f_lo=5e11, f_hi=2e11)
    with pytest.raises(ValueError):
        SurrogateConfig(m=1)
    g = SurrogateConfig(m=5, f_lo=1.0, f_hi=2.0).grid()
    np.testing.assert_array_equal(g, [1.0, 1.25, 1.5, 1.75, 2.0])


# --- transfer function ------------------------------------------------------------

def test_transfer_function_validation():
    with pytest.raises(ValueError):
        TransferFunction(np.array([1.0, 1.0]), np.ones(2))
    with pytest.raises(ValueError):
        TransferFunction(np.array([1.0]), np.ones(1))
    with pytest.raises(ValueError):
        TransferFunction(np.array([1.0, 2.0]), np.ones(3))
    tf = _tf([0.0, 1.0])
    assert tf.mag[0] == MAG_FLOOR
    assert tf.mag_db.tolist() == [-120.0, 0.0]


# --- metrics ----------------------------------------------------------------------

def test_error_db_examples():
    rng = np.random.default_rng(7)
    y = rng.uniform(1e-3, 1, 64)
    assert error_db(_tf(y), _tf(y)) == 0.0
    assert error_db(_tf(10 * y), _tf(y)) == pytest.approx(20.0, abs=1e-9)
    z = rng.uniform(1e-3, 1, 64)
    assert error_db(_tf(y), _tf(z)) == error_db(_tf(z), _tf(y))
    # hand value: one point off by a factor of 100 out of four
    assert error_db(_tf([1, 1, 1, 1]), _tf([1, 1, 1, 0.01])) == pytest.approx(10.0, abs=1e-12)


def test_error_db_premetric_properties():
    rng = np.random.default_rng(8)
    for _ in range(300):
        x, y, z = (_tf(rng.uniform(1e-7, 2, 16)) for _ in range(3))
        assert error_db(x, y) >= 0
        assert error_db(x, z) <= error_db(x, y) + error_db(y, z) + 1e-12


def test_error_db_applies_floor_to_both_sides():
    assert error_db(_tf([0.0, 1e-9]), _tf([1e-7, 1e-6])) == 0.0


def test_error_db_grid_mismatch():
    with pytest.raises(GridMismatchError):
        error_db(_tf([1, 2, 3]), _tf([1, 2]))
    with pytest.raises(GridMismatchError):
        error_db(_tf([1, 2]), _tf([1, 2], np.array([1.0, 3.0])))


def test_passband_iou_examples():
    y = np.full(12, 1e-3)
    y[2:6] = 1.0
    assert passband_iou(_tf(y), _tf(y)) == 1.0
    z = np.full(12, 1e-3)
    z[8:12] = 1.0
    assert passband_iou(_tf(y), _tf(z)) == 0.0
    w = np.full(12, 1e-3)
    w[4:8] = 1.0  # half of y's band, same width
    assert passband_iou(_tf(y), _tf(w)) == pytest.approx(1 / 3, abs=1e-15)


def test_passband_threshold_and_range():
    y = np.array([0.5, 0.8, 1.0, 0.75, 0.1])
    assert passband(_tf(y), 3.0).tolist() == [False, True, True, True, False]
    rng = np.random.default_rng(9)
    for _ in range(100):
        a, b = _tf(rng.uniform(0, 1, 20)), _tf(rng.uniform(0, 1, 20))
        v = passband_iou(a, b)
        assert 0.0 <= v <= 1.0
        assert (v == 1.0) == bool(np.array_equal(passband(a), passband(b)))


def test_insertion_loss_examples():
    assert insertion_loss(_tf(np.ones(8)), np.arange(2, 6)) == 0.0
    assert insertion_loss(_tf(np.full(8, 0.5)), np.arange(8)) == pytest.approx(6.0206, abs=1e-4)
    y = np.full(8, 10 ** (-30 / 20))
    y[3] = 1.0
    assert insertion_loss(_tf(y), np.arange(8)) == 0.0
    mask = np.zeros(8, bool)
    mask[4:] = True
    assert insertion_loss(_tf(y), mask) == pytest.approx(30.0)
    with pytest.raises(ValueError):
        insertion_loss(_tf(y), [])

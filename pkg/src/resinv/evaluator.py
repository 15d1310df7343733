"""Transfer functions of resonator layouts and the metrics computed on them.

The built-in evaluator is a narrowband coupling-matrix model. Each resonator
is a single pole whose frequency is set by its side length and detuned by its
slit offset; resonators couple with a strength that decays with the edge gap
between them and depends on the relative orientation of their slits. Port 1
feeds the first resonator and port 2 is read at the last one.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .geometry import CircuitDesign, DesignArrays

MAG_FLOOR = 1e-6
PERPENDICULAR_COUPLING = 0.3


class GridMismatchError(ValueError):
    """Two transfer functions are sampled on different frequency grids."""


class EvaluationError(RuntimeError):
    """The evaluator could not produce a transfer function."""


@dataclass(frozen=True, eq=False)
class TransferFunction:
    freqs: np.ndarray
    s21: np.ndarray

    def __post_init__(self):
        freqs = np.asarray(self.freqs, dtype=float)
        s21 = np.asarray(self.s21, dtype=complex)
        if freqs.ndim != 1 or freqs.size < 2:
            raise ValueError("need at least 2 frequency points")
        if np.any(np.diff(freqs) <= 0) or np.any(freqs <= 0):
            raise ValueError("frequencies must be positive and strictly increasing")
        if s21.shape != freqs.shape:
            raise ValueError(f"s21 has shape {s21.shape}, grid has {freqs.shape}")
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "s21", s21)

    @classmethod
    def from_magnitude(cls, freqs, mag) -> "TransferFunction":
        return cls(freqs, np.asarray(mag, dtype=float).astype(complex))

    @property
    def m(self) -> int:
        return self.freqs.size

    @property
    def mag(self) -> np.ndarray:
        """|s21| clamped below at ``MAG_FLOOR``."""
        return np.maximum(np.abs(self.s21), MAG_FLOOR)

    @property
    def mag_db(self) -> np.ndarray:
        return 20.0 * np.log10(self.mag)


@dataclass(frozen=True)
class SurrogateConfig:
    f_scale: float = 1.08e12   # Hz * length unit; side 0.9 resonates at 300 GHz
    frac_bw: float = 0.08
    k0: float = 1.0
    decay: float = 0.5         # coupling decay length, in units of the side
    q_e: float = 1.0
    slit_detune: float = 0.5
    m: int = 64
    f_lo: float = 200e9
    f_hi: float = 400e9

    def __post_init__(self):
        for name in ("f_scale", "frac_bw", "k0", "decay", "q_e", "slit_detune", "f_lo", "f_hi"):
            if not getattr(self, name) > 0:
                raise ValueError(f"surrogate parameter {name} must be positive")
        if not self.f_lo < self.f_hi:
            raise ValueError("need f_lo < f_hi")
        if self.m < 2:
            raise ValueError("need m >= 2")

    def grid(self) -> np.ndarray:
        return np.linspace(self.f_lo, self.f_hi, self.m)

    def to_dict(self) -> dict:
        return asdict(self)


def coupling_matrix(centers: np.ndarray, side: np.ndarray, slit_dir: np.ndarray,
                    cfg: SurrogateConfig) -> np.ndarray:
    """Inter-resonator couplings, shape (B, N, N), zero diagonal."""
    diff = centers[:, :, None, :] - centers[:, None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    a = side[:, None, None]
    gap = np.maximum(0.0, dist - a)
    turns = (slit_dir[:, :, None] - slit_dir[:, None, :]) % 4
    orient = np.choose(turns, [1.0, PERPENDICULAR_COUPLING, -1.0, PERPENDICULAR_COUPLING])
    k = cfg.k0 * np.exp(-gap / (cfg.decay * a)) * orient
    n = centers.shape[1]
    k[:, np.arange(n), np.arange(n)] = 0.0
    return k


def surrogate_eval_arrays(designs: DesignArrays, cfg: SurrogateConfig,
                          freqs: np.ndarray | None = None) -> np.ndarray:
    """Complex S21 for a batch of layouts, shape (B, m)."""
    freqs = cfg.grid() if freqs is None else np.asarray(freqs, dtype=float)
    centers = np.asarray(designs.centers, dtype=float)
    side = np.asarray(designs.side, dtype=float)
    nb, n = centers.shape[:2]
    f_res = cfg.f_scale / (4.0 * side[:, None]) * (1.0 + cfg.slit_detune * designs.slit_offset)
    f0 = np.exp(np.log(f_res).mean(-1))
    detune = (f0[:, None] / f_res - f_res / f0[:, None]) / cfg.frac_bw
    lam = (freqs[None, :] / f0[:, None] - f0[:, None] / freqs[None, :]) / cfg.frac_bw

    static = coupling_matrix(centers, side, designs.slit_dir, cfg).astype(complex)
    idx = np.arange(n)
    static[:, idx, idx] += detune
    static[:, 0, 0] -= 1j / cfg.q_e
    static[:, n - 1, n - 1] -= 1j / cfg.q_e
    rhs = np.zeros((n, 1), dtype=complex)
    rhs[0] = 1.0

    def solve(lam_):
        A = static[:, None, :, :] + lam_[:, :, None, None] * np.eye(n)
        return np.linalg.solve(A, np.broadcast_to(rhs, A.shape[:-1] + (1,)))[..., n - 1, 0]

    try:
        x = solve(lam)
    except np.linalg.LinAlgError:
        x = np.empty((nb, freqs.size), dtype=complex)
        for b in range(nb):
            x[b] = _solve_single(static[b], lam[b], rhs, n)
    return -2j / cfg.q_e * x


def _solve_single(static, lam, rhs, n):
    out = np.empty(lam.size, dtype=complex)
    for j, l in enumerate(lam):
        for shift in (0.0, 1e-9):
            try:
                out[j] = np.linalg.solve(static + (l + shift) * np.eye(n), rhs)[n - 1, 0]
                break
            except np.linalg.LinAlgError:
                continue
        else:
            raise EvaluationError(f"singular coupling system at normalized frequency {l}")
    return out


def surrogate_eval(design: CircuitDesign, cfg: SurrogateConfig | None = None,
                   freqs=None) -> TransferFunction:
    cfg = cfg or SurrogateConfig()
    freqs = cfg.grid() if freqs is None else np.asarray(freqs, dtype=float)
    s21 = surrogate_eval_arrays(DesignArrays.from_designs([design]), cfg, freqs)[0]
    return TransferFunction(freqs, s21)


# --- metrics ------------------------------------------------------------------

def check_grid(target: TransferFunction, candidate: TransferFunction) -> None:
    if target.freqs.shape != candidate.freqs.shape or not np.allclose(
            target.freqs, candidate.freqs, rtol=1e-12, atol=0.0):
        raise GridMismatchError(
            f"frequency grids differ (m={target.m} vs m={candidate.m})")


def error_db(target: TransferFunction, candidate: TransferFunction) -> float:
    """Mean absolute dB difference of the magnitudes, ``(20/m) sum |log10 Y - log10 Y'|``."""
    check_grid(target, candidate)
    return float(error_db_mag(target.mag, candidate.mag))


def error_db_mag(target_mag: np.ndarray, candidate_mag: np.ndarray) -> np.ndarray:
    """Batched dB error on raw magnitudes; reduces over the last axis."""
    t = np.log10(np.maximum(target_mag, MAG_FLOOR))
    c = np.log10(np.maximum(candidate_mag, MAG_FLOOR))
    return 20.0 * np.abs(t - c).mean(-1)


def passband(tf: TransferFunction, threshold_db: float = 3.0) -> np.ndarray:
    """Boolean mask of grid points within ``threshold_db`` of the peak."""
    db = tf.mag_db
    return db >= db.max() - threshold_db


def passband_iou(target: TransferFunction, candidate: TransferFunction,
                 threshold_db: float = 3.0) -> float:
    check_grid(target, candidate)
    t, c = passband(target, threshold_db), passband(candidate, threshold_db)
    union = np.count_nonzero(t | c)
    if union == 0:
        return 1.0
    return np.count_nonzero(t & c) / union


def insertion_loss(candidate: TransferFunction, band) -> float:
    """Loss in dB at the best in-band point; ``band`` is an index array or boolean mask."""
    band = np.asarray(band)
    if band.dtype == bool:
        band = np.flatnonzero(band)
    if band.size == 0:
        raise ValueError("insertion loss needs a non-empty band")
    return float(-candidate.mag_db[band].max())

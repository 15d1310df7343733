"""Mapping from raw compound actions to square-resonator layouts.

A compound action for ``N`` resonators is a flat vector of ``8N - 5`` raw
decisions laid out as::

    [a_l,
     (a_u, a_s) for resonators 1..N,
     (a_d, a_f, a_us, a_ug, a_x, a_y) for resonators 2..N]

Continuous entries live in ``[0, 1]``; discrete entries are stored as
integral floats. The first resonator sits at the origin and every following
one is placed relative to its predecessor, inside a bounding region whose
size is fixed by the resonator side, the largest allowed gap and a resonator
budget.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

SLIT_DIRECTIONS = ("up", "left", "down", "right")
SHIFT_FACTORS = (0.0, 0.2, 0.5)
MAX_SLIT_OFFSET = math.tanh(1.0) / 8.0

PLACEMENT_WIDTH = 6
MAPPING_MODES = ("idf", "direct")


class InvalidActionError(ValueError):
    """Raised when a raw action lies outside its domain."""


def action_dim(n: int) -> int:
    """Length of the flat compound action for ``n`` resonators."""
    if n < 2:
        raise InvalidActionError(f"need at least 2 resonators, got {n}")
    return 8 * n - 5


# --- per-resonator primitives -------------------------------------------------

def _check_unit(name: str, value: float) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise InvalidActionError(f"{name}={value!r} outside [0, 1]")
    return value


def _check_index(name: str, value, n_choices: int) -> int:
    if isinstance(value, (float, np.floating)):
        if value != int(value):
            raise InvalidActionError(f"{name}={value!r} is not integral")
    idx = int(value)
    if not 0 <= idx < n_choices:
        raise InvalidActionError(f"{name}={value!r} outside 0..{n_choices - 1}")
    return idx


def slit_direction(a_u: int) -> np.ndarray:
    """One-hot slit direction (up, left, down, right)."""
    u = np.zeros(4)
    u[_check_index("a_u", a_u, 4)] = 1.0
    return u


def slit_offset(a_u: int, a_s: float) -> np.ndarray:
    """Slit position vector; only the entry of the chosen edge is non-zero.

    The offset is measured from the edge center in fractions of the side.
    """
    s = np.zeros(4)
    s[_check_index("a_u", a_u, 4)] = np.tanh(2.0 * _check_unit("a_s", a_s) - 1.0) / 8.0
    return s


def resonator_length(a_l: float, L: float) -> float:
    if L <= 0:
        raise InvalidActionError(f"base length must be positive, got {L}")
    return L * (_check_unit("a_l", a_l) + 1.0)


def shift_factor(a_f: int) -> float:
    return SHIFT_FACTORS[_check_index("a_f", a_f, 3)]


def deviation_shift(a_us: float, a: float, f: float) -> float:
    """Lateral shift, interpolated linearly between 0 and ``a * f``."""
    return _check_unit("a_us", a_us) * a * f


def deviation_gap(a_ug: float, a: float, g_min_ratio: float, g_max_ratio: float) -> float:
    """Gap to the previous resonator, interpolated geometrically.

    Returns ``l * (r / l) ** a_ug`` with ``l = a * g_min_ratio`` and
    ``r = a * g_max_ratio`` so both endpoints are hit exactly.
    """
    lo, hi = a * g_min_ratio, a * g_max_ratio
    return lo * (hi / lo) ** _check_unit("a_ug", a_ug)


# --- boundaries ---------------------------------------------------------------

@dataclass(frozen=True)
class BoundarySpec:
    B: float
    a: float
    g_min_ratio: float
    g_max_ratio: float
    n_budget: int

    @property
    def outer(self) -> tuple[tuple[float, float], tuple[float, float]]:
        """Rectangle every square must lie in, as ``((x0, x1), (y0, y1))``."""
        B, a = self.B, self.a
        return (-a / 2, (2 * B - a) / 2), (-B / 2, B / 2)

    @property
    def center_region(self) -> tuple[tuple[float, float], tuple[float, float]]:
        B, a = self.B, self.a
        return (0.0, B - a), ((a - B) / 2, (B - a) / 2)

    @property
    def y_lo(self) -> float:
        return (self.a - self.B) / 2

    @property
    def y_hi(self) -> float:
        return (self.B - self.a) / 2


def make_boundary(n_budget: int, a: float, g_min_ratio: float, g_max_ratio: float) -> BoundarySpec:
    if n_budget < 2:
        raise ValueError(f"resonator budget must be >= 2, got {n_budget}")
    if not 0 < g_min_ratio <= g_max_ratio:
        raise ValueError("need 0 < g_min_ratio <= g_max_ratio")
    B = a * n_budget + a * g_max_ratio * (n_budget - 1)
    return BoundarySpec(B=B, a=a, g_min_ratio=g_min_ratio, g_max_ratio=g_max_ratio, n_budget=n_budget)


# --- interdependent placement -------------------------------------------------

def _lerp(t, lo, hi):
    """``t * hi + (1 - t) * lo`` kept inside its endpoints despite rounding."""
    v = t * hi + (1.0 - t) * lo
    return np.minimum(np.maximum(v, np.minimum(lo, hi)), np.maximum(lo, hi))


def _place(prev, a_d, a_x, a_y, d_s, d_g, a, spec: BoundarySpec, x_cap: float):
    x0, y0 = float(prev[0]), float(prev[1])
    a_d = _check_index("a_d", a_d, 3)
    a_x = _check_unit("a_x", a_x)
    a_y = _check_unit("a_y", a_y)
    if a_d == 2:
        x = min(x0 + a + d_g, x_cap)
        y = float(_lerp(a_y, max(y0 - d_s, spec.y_lo), min(y0 + d_s, spec.y_hi)))
    else:
        x = float(_lerp(a_x, x0, min(x0 + d_s, x_cap)))
        if a_d == 0:
            y = min(y0 + a + d_g, spec.y_hi)
        else:
            y = max(y0 - a - d_g, spec.y_lo)
    return np.array([x, y])


def place_intermediate(prev, a_d, a_x, a_y, d_s, d_g, a, spec: BoundarySpec) -> np.ndarray:
    """Center of a non-final resonator given its predecessor's center.

    ``a_d`` selects above (0), below (1) or right (2). The x coordinate keeps
    room for the final resonator by clamping at ``B - 2a - d_g``.
    """
    return _place(prev, a_d, a_x, a_y, d_s, d_g, a, spec, spec.B - 2 * a - d_g)


def place_final(prev, a_d, a_x, a_y, d_s, d_g, a, spec: BoundarySpec) -> np.ndarray:
    """Center of the rightmost resonator; x is clamped at ``B - a``."""
    return _place(prev, a_d, a_x, a_y, d_s, d_g, a, spec, spec.B - a)


# --- value types ----------------------------------------------------------------

@dataclass(frozen=True)
class Resonator:
    center: tuple[float, float]
    side: float
    slit_dir: int
    slit_offset: float

    def __post_init__(self):
        if not self.side > 0:
            raise ValueError(f"side must be positive, got {self.side}")
        if self.slit_dir not in (0, 1, 2, 3):
            raise ValueError(f"slit_dir must be in 0..3, got {self.slit_dir}")
        if abs(self.slit_offset) > MAX_SLIT_OFFSET + 1e-15:
            raise ValueError(f"slit_offset {self.slit_offset} exceeds tanh(1)/8")


@dataclass(frozen=True)
class CircuitDesign:
    resonators: tuple[Resonator, ...]
    boundary: BoundarySpec | None = None

    def __post_init__(self):
        if len(self.resonators) < 2:
            raise ValueError(f"a design needs at least 2 resonators, got {len(self.resonators)}")

    @property
    def n(self) -> int:
        return len(self.resonators)

    @property
    def side(self) -> float:
        return self.resonators[0].side

    def centers(self) -> np.ndarray:
        return np.array([r.center for r in self.resonators], dtype=float)

    def contained(self) -> bool:
        """True when every center is in the center region and every square in the outer box."""
        if self.boundary is None:
            return True
        (cx0, cx1), (cy0, cy1) = self.boundary.center_region
        (ox0, ox1), (oy0, oy1) = self.boundary.outer
        for r in self.resonators:
            x, y = r.center
            h = r.side / 2
            if not (cx0 <= x <= cx1 and cy0 <= y <= cy1):
                return False
            # square edges compared as center vs. shrunken box, avoiding x + h rounding
            if not (ox0 + h <= x <= ox1 - h and oy0 + h <= y <= oy1 - h):
                return False
        return True


@dataclass(frozen=True)
class CompoundAction:
    a_l: float
    slits: tuple[tuple[int, float], ...]
    placements: tuple[tuple[int, int, float, float, float, float], ...]

    @property
    def n(self) -> int:
        return len(self.slits)

    def validate(self) -> None:
        if self.n < 2:
            raise InvalidActionError(f"need at least 2 resonators, got {self.n}")
        if len(self.placements) != self.n - 1:
            raise InvalidActionError(
                f"expected {self.n - 1} placement tuples, got {len(self.placements)}")
        _check_unit("a_l", self.a_l)
        for a_u, a_s in self.slits:
            _check_index("a_u", a_u, 4)
            _check_unit("a_s", a_s)
        for a_d, a_f, a_us, a_ug, a_x, a_y in self.placements:
            _check_index("a_d", a_d, 3)
            _check_index("a_f", a_f, 3)
            for name, v in (("a_us", a_us), ("a_ug", a_ug), ("a_x", a_x), ("a_y", a_y)):
                _check_unit(name, v)

    def flatten(self) -> np.ndarray:
        flat = [float(self.a_l)]
        for a_u, a_s in self.slits:
            flat += [float(a_u), float(a_s)]
        for p in self.placements:
            flat += [float(v) for v in p]
        return np.array(flat)

    @classmethod
    def from_flat(cls, flat: Sequence[float], n: int) -> "CompoundAction":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (action_dim(n),):
            raise InvalidActionError(
                f"flat action for N={n} must have length {action_dim(n)}, got {flat.shape}")
        disc = discrete_cardinality(n) > 0
        if np.any(flat[disc] != np.round(flat[disc])):
            raise InvalidActionError("discrete action entries must be integral")
        slits = tuple((int(flat[1 + 2 * k]), float(flat[2 + 2 * k])) for k in range(n))
        base = 1 + 2 * n
        placements = []
        for k in range(n - 1):
            p = flat[base + PLACEMENT_WIDTH * k: base + PLACEMENT_WIDTH * (k + 1)]
            placements.append((int(p[0]), int(p[1]), *map(float, p[2:])))
        action = cls(float(flat[0]), slits, tuple(placements))
        action.validate()
        return action


# --- full mapping ---------------------------------------------------------------

@dataclass(frozen=True)
class GeometryConfig:
    L: float = 0.6
    g_min_ratio: float = 0.1
    g_max_ratio: float = 0.5
    n_budget: int | None = None  # None means "equal to N"
    mode: str = "idf"

    def boundary(self, n: int, a: float) -> BoundarySpec:
        budget = n if self.n_budget is None else self.n_budget
        if budget < n:
            raise ValueError(f"resonator budget {budget} smaller than N={n}")
        return make_boundary(budget, a, self.g_min_ratio, self.g_max_ratio)


def map_actions(action: CompoundAction, L: float = 0.6, g_min_ratio: float = 0.1,
                g_max_ratio: float = 0.5, n_budget: int | None = None,
                mode: str = "idf") -> CircuitDesign:
    """Map one compound action to its layout, resonator by resonator."""
    action.validate()
    if mode not in MAPPING_MODES:
        raise ValueError(f"unknown mapping mode {mode!r}")
    n = action.n
    a = resonator_length(action.a_l, L)
    spec = make_boundary(n if n_budget is None else n_budget, a, g_min_ratio, g_max_ratio)
    if spec.n_budget < n:
        raise ValueError(f"resonator budget {spec.n_budget} smaller than N={n}")

    centers = [np.zeros(2)]
    for k, (a_d, a_f, a_us, a_ug, a_x, a_y) in enumerate(action.placements):
        if mode == "direct":
            centers.append(np.array([a_x * (spec.B - a), a_y * (spec.B - a) + spec.y_lo]))
            continue
        d_s = deviation_shift(a_us, a, shift_factor(a_f))
        d_g = deviation_gap(a_ug, a, g_min_ratio, g_max_ratio)
        place = place_final if k == n - 2 else place_intermediate
        centers.append(place(centers[-1], a_d, a_x, a_y, d_s, d_g, a, spec))

    resonators = tuple(
        Resonator(center=(float(c[0]), float(c[1])), side=a, slit_dir=int(a_u),
                  slit_offset=float(np.tanh(2.0 * a_s - 1.0) / 8.0))
        for c, (a_u, a_s) in zip(centers, action.slits))
    return CircuitDesign(resonators, spec)


class DesignArrays(NamedTuple):
    """Column-wise layout batch used by the vectorized mapping and surrogate."""
    centers: np.ndarray      # (B, N, 2)
    side: np.ndarray         # (B,)
    slit_dir: np.ndarray     # (B, N) int
    slit_offset: np.ndarray  # (B, N)
    B: np.ndarray            # (B,) boundary extent

    def __len__(self):
        return self.centers.shape[0]

    def design(self, k: int, g_min_ratio: float = 0.1, g_max_ratio: float = 0.5,
               n_budget: int | None = None) -> CircuitDesign:
        n = self.centers.shape[1]
        a = float(self.side[k])
        spec = make_boundary(n if n_budget is None else n_budget, a, g_min_ratio, g_max_ratio)
        res = tuple(Resonator((float(x), float(y)), a, int(d), float(s))
                    for (x, y), d, s in zip(self.centers[k], self.slit_dir[k], self.slit_offset[k]))
        return CircuitDesign(res, spec)

    @classmethod
    def from_designs(cls, designs: Sequence[CircuitDesign]) -> "DesignArrays":
        centers = np.array([d.centers() for d in designs], dtype=float)
        side = np.array([d.side for d in designs], dtype=float)
        dirs = np.array([[r.slit_dir for r in d.resonators] for d in designs], dtype=int)
        offs = np.array([[r.slit_offset for r in d.resonators] for d in designs], dtype=float)
        B = np.array([d.boundary.B if d.boundary else np.nan for d in designs])
        return cls(centers, side, dirs, offs, B)


def validate_flat_batch(flat: np.ndarray, n: int) -> None:
    flat = np.asarray(flat)
    if flat.ndim != 2 or flat.shape[1] != action_dim(n):
        raise InvalidActionError(f"expected shape (B, {action_dim(n)}), got {flat.shape}")
    cont, disc = continuous_mask(n), ~continuous_mask(n)
    if np.any((flat[:, cont] < 0) | (flat[:, cont] > 1)) or not np.all(np.isfinite(flat)):
        raise InvalidActionError("continuous action entries must lie in [0, 1]")
    d = flat[:, disc]
    hi = np.broadcast_to(discrete_cardinality(n)[disc], d.shape)
    if np.any(d != np.round(d)) or np.any(d < 0) or np.any(d >= hi):
        raise InvalidActionError("discrete action entries out of range")


def continuous_mask(n: int) -> np.ndarray:
    return discrete_cardinality(n) == 0


def discrete_cardinality(n: int) -> np.ndarray:
    """Number of categories per flat dimension, 0 for continuous ones."""
    card = [0] + [4, 0] * n + [3, 3, 0, 0, 0, 0] * (n - 1)
    return np.array(card, dtype=int)


def map_actions_batch(flat: np.ndarray, n: int, geometry: GeometryConfig | None = None,
                      validate: bool = True) -> DesignArrays:
    """Vectorized :func:`map_actions` over a ``(B, 8N-5)`` array."""
    g = geometry or GeometryConfig()
    flat = np.asarray(flat, dtype=float)
    if validate:
        validate_flat_batch(flat, n)
    if g.mode not in MAPPING_MODES:
        raise ValueError(f"unknown mapping mode {g.mode!r}")
    budget = n if g.n_budget is None else g.n_budget
    if budget < n:
        raise ValueError(f"resonator budget {budget} smaller than N={n}")

    nb = flat.shape[0]
    a = g.L * (flat[:, 0] + 1.0)
    B = a * budget + a * g.g_max_ratio * (budget - 1)
    y_lo, y_hi = (a - B) / 2, (B - a) / 2
    slits = flat[:, 1:1 + 2 * n].reshape(nb, n, 2)
    places = flat[:, 1 + 2 * n:].reshape(nb, n - 1, PLACEMENT_WIDTH)

    centers = np.zeros((nb, n, 2))
    shifts = np.asarray(SHIFT_FACTORS)
    for k in range(n - 1):
        a_d = places[:, k, 0].astype(int)
        a_x, a_y = places[:, k, 4], places[:, k, 5]
        if g.mode == "direct":
            centers[:, k + 1, 0] = a_x * (B - a)
            centers[:, k + 1, 1] = a_y * (B - a) + y_lo
            continue
        d_s = places[:, k, 2] * a * shifts[places[:, k, 1].astype(int)]
        lo, hi = a * g.g_min_ratio, a * g.g_max_ratio
        d_g = lo * (hi / lo) ** places[:, k, 3]
        x_cap = B - a if k == n - 2 else B - 2 * a - d_g
        x0, y0 = centers[:, k, 0], centers[:, k, 1]
        right = a_d == 2
        x = np.where(right, np.minimum(x0 + a + d_g, x_cap),
                     _lerp(a_x, x0, np.minimum(x0 + d_s, x_cap)))
        y = np.where(right,
                     _lerp(a_y, np.maximum(y0 - d_s, y_lo), np.minimum(y0 + d_s, y_hi)),
                     np.where(a_d == 0, np.minimum(y0 + a + d_g, y_hi),
                              np.maximum(y0 - a - d_g, y_lo)))
        centers[:, k + 1, 0] = x
        centers[:, k + 1, 1] = y

    slit_dir = slits[:, :, 0].astype(int)
    offsets = np.tanh(2.0 * slits[:, :, 1] - 1.0) / 8.0
    return DesignArrays(centers, a, slit_dir, offsets, B)


def random_actions(n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random valid flat actions, shape ``(size, 8N-5)``."""
    card = discrete_cardinality(n)
    out = rng.random((size, card.size))
    disc = card > 0
    out[:, disc] = np.floor(out[:, disc] * card[disc])
    return out

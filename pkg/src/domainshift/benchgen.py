"""Controlled 20-dimensional Gaussian-mixture benchmark with known shifts.

Component indices are 0-based internally; ``component=2`` in the 1-based
convention of the published construction is index 1 here.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import FeatureMatrix

D = 20

WEIGHTS = np.array([0.35, 0.30, 0.20, 0.15])

MEANS = np.array(
    [
        [0.0, 0.0, 0.5, -0.5, 0.0, 0.3, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [2.5, -1.0, -0.5, 1.0, 0.5, -0.3, 0.0, 0.2, -0.2, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [-2.0, 1.5, 0.0, 0.5, -1.0, 0.0, 0.3, -0.2, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [1.0, 2.0, -1.0, -1.0, 0.0, 0.5, -0.5, 0.0, 0.0, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    ]
)

VARIANCES = np.array(
    [
        [1.2, 1.0, 0.8, 0.9, 0.7, 0.8, 1.0, 1.0, 0.9, 1.0, 1.0, 1.0, 1.0, 0.8, 0.8, 0.8, 0.9, 0.9, 0.9, 0.9],
        [0.9, 1.1, 0.7, 0.8, 0.8, 0.7, 1.0, 0.9, 1.0, 1.0, 1.0, 0.9, 1.0, 0.8, 0.8, 0.8, 1.0, 1.0, 0.9, 0.9],
        [1.0, 0.8, 1.0, 0.9, 0.7, 1.1, 0.8, 0.9, 1.0, 1.0, 0.9, 1.0, 1.0, 0.9, 0.8, 0.8, 0.8, 0.9, 0.9, 1.0],
        [1.1, 0.9, 0.8, 1.0, 0.8, 0.8, 0.9, 1.0, 1.0, 0.9, 1.0, 1.0, 0.9, 0.8, 0.8, 0.8, 0.9, 0.9, 1.0, 1.0],
    ]
)

FEATURE_NAMES = [f"x{j}" for j in range(D)]


@dataclass(frozen=True)
class MixtureSpec:
    weights: np.ndarray = field(default_factory=lambda: WEIGHTS.copy())
    means: np.ndarray = field(default_factory=lambda: MEANS.copy())
    variances: np.ndarray = field(default_factory=lambda: VARIANCES.copy())

    def mean(self) -> np.ndarray:
        return self.weights @ self.means


@dataclass(frozen=True)
class GlobalShiftSpec:
    sigma: float
    shifted_component: int = 2  # 1-based
    coords: tuple[int, ...] = (0, 1, 3)

    def to_json(self) -> dict:
        return {"shift": "global", **asdict(self), "coords": list(self.coords)}


@dataclass(frozen=True)
class LocalShiftSpec:
    n_inject: int
    active_dims: tuple[int, ...] = (2, 4, 6, 8, 9)
    anchor_offsets: tuple[float, ...] = (1.1, -0.4, 0.4, -0.2, 0.3)
    scales: tuple[float, ...] = (0.11, 0.08, 0.04, 0.04, 0.03)
    shrinkage: float = 0.7
    base_component: int = 1  # 1-based

    def __post_init__(self) -> None:
        if not len(self.anchor_offsets) == len(self.scales) == len(self.active_dims):
            raise ValueError("anchor_offsets, scales and active_dims must have equal length")

    def to_json(self) -> dict:
        d = asdict(self)
        return {"shift": "local", **{k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}}


def _draw_mixture(rng: np.random.Generator, n: int, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    comp = rng.choice(len(WEIGHTS), size=n, p=WEIGHTS)
    noise = rng.standard_normal((n, D))
    return means[comp] + np.sqrt(variances[comp]) * noise


def sample_background(n: int, seed: int) -> FeatureMatrix:
    """``n`` i.i.d. draws from the reference mixture."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return FeatureMatrix(_draw_mixture(rng, n, MEANS, VARIANCES), list(FEATURE_NAMES))


def _cohort_seeds(seed: int, k: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(k)


def make_global_pair(sigma: float, n: int, seed: int):
    """Reference cohort and a cohort whose component 2 is displaced by ``sigma`` on coords 0, 1, 3."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    spec = GlobalShiftSpec(sigma=float(sigma))
    sx, sy = _cohort_seeds(seed, 2)
    X = _draw_mixture(np.random.default_rng(sx), n, MEANS, VARIANCES)
    shifted = MEANS.copy()
    shifted[spec.shifted_component - 1, list(spec.coords)] += sigma
    Y = _draw_mixture(np.random.default_rng(sy), n, shifted, VARIANCES)
    return FeatureMatrix(X, list(FEATURE_NAMES)), FeatureMatrix(Y, list(FEATURE_NAMES)), spec


def random_rotation(rng: np.random.Generator, k: int) -> np.ndarray:
    """Haar-random orthogonal matrix (QR of a Gaussian matrix, sign-fixed)."""
    q, r = np.linalg.qr(rng.standard_normal((k, k)))
    return q * np.sign(np.diag(r))


def sample_injected(n_inject: int, rng: np.random.Generator, spec: LocalShiftSpec) -> np.ndarray:
    comp = spec.base_component - 1
    mu = MEANS[comp]
    sd = np.sqrt(VARIANCES[comp])
    active = np.array(spec.active_dims)
    inactive = np.setdiff1d(np.arange(D), active)
    rot = random_rotation(rng, len(active))
    out = np.empty((n_inject, D))
    center = mu[active] + np.array(spec.anchor_offsets) * sd[active]
    axis_sd = np.array(spec.scales) * sd[active]
    out[:, active] = center + (rng.standard_normal((n_inject, len(active))) * axis_sd) @ rot.T
    out[:, inactive] = mu[inactive] + spec.shrinkage * sd[inactive] * rng.standard_normal(
        (n_inject, len(inactive))
    )
    return out


def make_local_pair(n_inject: int, n: int, seed: int):
    """Background cohorts plus ``n_inject`` compact points appended to ``Y``.

    Returns ``(X, Y, injected_ids, spec)``; ``injected_ids`` index rows of ``Y``.
    """
    if n_inject < 1:
        raise ValueError("n_inject must be >= 1")
    spec = LocalShiftSpec(n_inject=int(n_inject))
    sx, sy, si = _cohort_seeds(seed, 3)
    X = _draw_mixture(np.random.default_rng(sx), n, MEANS, VARIANCES)
    Yb = _draw_mixture(np.random.default_rng(sy), n, MEANS, VARIANCES)
    inj = sample_injected(n_inject, np.random.default_rng(si), spec)
    Y = np.vstack([Yb, inj])
    injected_ids = np.arange(n, n + n_inject)
    return (
        FeatureMatrix(X, list(FEATURE_NAMES)),
        FeatureMatrix(Y, list(FEATURE_NAMES)),
        injected_ids,
        spec,
    )

"""Experiment definitions: noise generators, planar-pose simulation, samplers.

Poses live on the chart (c, s, px, py) with c^2 + s^2 = 1.  Odometry and
process noise are poses as well; noise is drawn in the Lie algebra and
mapped through the exponential so the group constraint holds exactly.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .med import MedCoefficients, med_logpdf_many
from .moments import MomentVector, gaussian_moments, sample_moments
from .polyalg import Polynomial
from .quadrature import AngleBox, Box


def rng_stream(seed: int, name: str = "") -> np.random.Generator:
    """Named deterministic generator: same (seed, name) gives the same stream."""
    tag = zlib.crc32(name.encode()) if name else 0
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag]))


# ---------------------------------------------------------------------------
# noise generators
# ---------------------------------------------------------------------------

def gen_trig_noise(n: int, seed: int) -> np.ndarray:
    """Two-channel noise on a trigonometric curve: v = (sin w + e1, cos(pi w) + e2)
    with w uniform on (0, pi) and e ~ N(0, 0.01)."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = rng_stream(seed, "trig")
    w = rng.uniform(0.0, math.pi, size=n)
    eps = rng.normal(0.0, 0.1, size=(n, 2))
    return np.stack([np.sin(w), np.cos(math.pi * w)], axis=1) + eps


def gen_bin_noise(n: int, seed: int) -> np.ndarray:
    """Bimodal noise per axis: v = 2q - 1 + e, q ~ Bernoulli(1/2), e ~ N(0, 0.2^2)."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = rng_stream(seed, "bin")
    q = rng.integers(0, 2, size=(n, 2))
    eps = rng.normal(0.0, 0.2, size=(n, 2))
    return 2.0 * q - 1.0 + eps


NOISE_GENERATORS = {"trig": gen_trig_noise, "bin": gen_bin_noise}


# ---------------------------------------------------------------------------
# planar pose helpers; poses stored as (c, s, px, py)
# ---------------------------------------------------------------------------

def se2_from_angle(theta: float, p: Sequence[float]) -> np.ndarray:
    return np.array([math.cos(theta), math.sin(theta), p[0], p[1]])


def se2_compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ca, sa, ax, ay = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    cb, sb, bx, by = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        ca * cb - sa * sb,
        sa * cb + ca * sb,
        ax + ca * bx - sa * by,
        ay + sa * bx + ca * by,
    ], axis=-1)


def se2_exp(xi: np.ndarray) -> np.ndarray:
    """Exponential map from (omega, vx, vy) to a pose tuple."""
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    xi = np.atleast_2d(xi)
    w = xi[:, 0]
    small = np.abs(w) < 1e-9
    sw = np.where(small, 1.0 - w**2 / 6.0, np.sin(w) / np.where(small, 1.0, w))
    cw = np.where(small, w / 2.0 - w**3 / 24.0,
                  (1.0 - np.cos(w)) / np.where(small, 1.0, w))
    px = sw * xi[:, 1] - cw * xi[:, 2]
    py = cw * xi[:, 1] + sw * xi[:, 2]
    out = np.stack([np.cos(w), np.sin(w), px, py], axis=-1)
    return out[0] if single else out


def se2_angle(pose: np.ndarray) -> float:
    return math.atan2(pose[1], pose[0])


def se2_process_polynomials() -> list[Polynomial]:
    """Pose composition x' = x . u . w as polynomials in 12 joint variables
    ordered (c, s, px, py, cu, su, ux, uy, cw, sw, wx, wy)."""
    n = 12
    c, s, px, py = (Polynomial.variable(n, i) for i in range(4))
    cu, su, ux, uy = (Polynomial.variable(n, i) for i in range(4, 8))
    cw, sw, wx, wy = (Polynomial.variable(n, i) for i in range(8, 12))
    cm = cu * cw - su * sw
    sm = su * cw + cu * sw
    pmx = ux + cu * wx - su * wy
    pmy = uy + su * wx + cu * wy
    return [
        c * cm - s * sm,
        s * cm + c * sm,
        px + c * pmx - s * pmy,
        py + s * pmx + c * pmy,
    ]


def se2_observation_polynomials() -> list[Polynomial]:
    """Landmark frame change R y + p as polynomials in (y1, y2, c, s, px, py)."""
    n = 6
    y1, y2 = Polynomial.variable(n, 0), Polynomial.variable(n, 1)
    c, s = Polynomial.variable(n, 2), Polynomial.variable(n, 3)
    px, py = Polynomial.variable(n, 4), Polynomial.variable(n, 5)
    return [c * y1 - s * y2 + px, s * y1 + c * y2 + py]


def landmark_mixture_moments(landmarks: np.ndarray, cov: np.ndarray, order: int,
                             weights: Sequence[float] | None = None) -> MomentVector:
    """Moments of L_i + v with i drawn from `weights` and v Gaussian."""
    landmarks = np.asarray(landmarks, dtype=float)
    k = landmarks.shape[0]
    weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=float)
    parts = [gaussian_moments(L, cov, order) for L in landmarks]
    vals = np.sum([w * p.values for w, p in zip(weights, parts)], axis=0)
    return MomentVector(parts[0].basis, vals)


def sample_pose_noise(sigma_xi: Sequence[float], n: int,
                      rng: np.random.Generator) -> np.ndarray:
    xi = rng.normal(size=(n, 3)) * np.asarray(sigma_xi, dtype=float)
    return se2_exp(xi)


def pose_noise_moments(sigma_xi: Sequence[float], order: int, seed: int,
                       n: int = 100_000) -> MomentVector:
    """Empirical moments of the pose-noise chart entries (c, s, px, py)."""
    rng = rng_stream(seed, "pose-noise-moments")
    return sample_moments(sample_pose_noise(sigma_xi, n, rng), order)


# ---------------------------------------------------------------------------
# scenario definition and simulation
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    name: str = "uniform"
    landmarks: np.ndarray = field(
        default_factory=lambda: np.array([[4.0, 4.0], [-4.0, 4.0],
                                          [-4.0, -4.0], [4.0, -4.0]]))
    association_weights: np.ndarray = field(
        default_factory=lambda: np.full(4, 0.25))
    sigma_v: float = 0.5
    sigma_xi: np.ndarray = field(default_factory=lambda: np.array([0.03, 0.08, 0.05]))
    n_steps: int = 15
    loop_radius: float = 2.0
    start_theta: float = 0.0
    start_pos: np.ndarray = field(default_factory=lambda: np.array([2.0, -2.0]))
    prior_sigma_theta: float = 0.4
    prior_sigma_pos: float = 0.8
    order: int = 4
    noise_order: int = 4
    seed_moments: int = 20_240_001

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, dtype=float)
        self.association_weights = np.asarray(self.association_weights, dtype=float)
        total = self.association_weights.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"association weights sum to {total}, expected 1")
        self.sigma_xi = np.asarray(self.sigma_xi, dtype=float)

    def odometry(self) -> list[np.ndarray]:
        """Closed differential-drive loop: constant arc per step."""
        dtheta = 2.0 * math.pi / self.n_steps
        arc = dtheta * self.loop_radius
        return [se2_exp(np.array([dtheta, arc, 0.0]))] * self.n_steps

    def meas_cov(self) -> np.ndarray:
        return self.sigma_v**2 * np.eye(2)


def make_scenario(name: str, **overrides) -> Scenario:
    if name == "uniform":
        base = dict(name="uniform")
    elif name == "biased":
        base = dict(name="biased",
                    association_weights=np.array([0.15, 0.15, 0.55, 0.15]))
    else:
        raise KeyError(f"unknown scenario {name!r}; expected 'uniform' or 'biased'")
    base.update(overrides)
    return Scenario(**base)


@dataclass
class SimResult:
    poses: np.ndarray        # (N+1, 4) ground-truth chart states
    inputs: list[np.ndarray]  # commanded odometry poses
    measurements: np.ndarray  # (N, 2)
    associations: np.ndarray  # (N,) hidden landmark indices
    seed: int


def simulate_se2(scenario: Scenario, seed: int) -> SimResult:
    """Roll the pose chain forward and collect range-bearing style readings
    with hidden landmark associations."""
    rng = rng_stream(seed, "sim")
    pose = se2_from_angle(scenario.start_theta, scenario.start_pos)
    poses = [pose]
    inputs = scenario.odometry()
    meas = []
    assoc = []
    for U in inputs:
        W = se2_exp(rng.normal(size=3) * scenario.sigma_xi)
        pose = se2_compose(pose, se2_compose(U, W))
        poses.append(pose)
        i = int(rng.choice(len(scenario.landmarks), p=scenario.association_weights))
        v = rng.normal(0.0, scenario.sigma_v, size=2)
        c, s, px, py = pose
        R = np.array([[c, -s], [s, c]])
        y = R.T @ (scenario.landmarks[i] + v - np.array([px, py]))
        meas.append(y)
        assoc.append(i)
    out = SimResult(np.array(poses), inputs, np.array(meas), np.array(assoc), seed)
    chk = np.abs(out.poses[:, 0] ** 2 + out.poses[:, 1] ** 2 - 1.0)
    assert chk.max() < 1e-12
    return out


# ---------------------------------------------------------------------------
# Langevin sampling of a fitted density (diagnostic visualization)
# ---------------------------------------------------------------------------

def langevin_sample(med: MedCoefficients, n: int, step: float = 1e-3,
                    seed: int = 0, burn_in: int = 1000, n_chains: int = 64,
                    return_restarts: bool = False):
    """Unadjusted Langevin iterates of the fitted density.

    x <- x + (step/2) grad log p + sqrt(step) xi, projected back onto the
    chart after every move (the angular pair is renormalized to the circle).
    Chains that leave the truncation region restart from the initialization
    point; the restart count is available on request.
    """
    rng = rng_stream(seed, "langevin")
    user_coeffs = med.to_user_coeffs()
    poly = Polynomial(med.nvars, dict(zip(med.basis.indices, user_coeffs)))
    grads = poly.gradient()
    angular = not isinstance(med.chart, Box)

    from .med import med_moments

    mean = med_moments(med, 1).values[1:1 + med.nvars]
    x0 = mean.copy()
    if angular:
        norm = math.hypot(x0[0], x0[1])
        if norm < 1e-9:
            x0[0], x0[1] = 1.0, 0.0
        else:
            x0[:2] /= norm

    # user-coordinate truncation region, slightly enlarged
    if angular:
        lo = np.array(med.chart.lower)
        hi = np.array(med.chart.upper)
        user_lo = med.shift[2:] + med.scale[2:] * lo
        user_hi = med.shift[2:] + med.scale[2:] * hi
    else:
        user_lo = med.shift + med.scale * np.array(med.chart.lower)
        user_hi = med.shift + med.scale * np.array(med.chart.upper)
    span = user_hi - user_lo
    user_lo = user_lo - 0.1 * span
    user_hi = user_hi + 0.1 * span

    chains = np.tile(x0, (n_chains, 1))
    chains += 1e-3 * rng.normal(size=chains.shape)
    if angular:
        chains[:, :2] /= np.linalg.norm(chains[:, :2], axis=1, keepdims=True)

    restarts = 0
    out = np.empty((n, med.nvars))
    collected = 0
    total_iters = burn_in + (n + n_chains - 1) // n_chains
    for it in range(total_iters):
        g = np.stack([gi.evaluate_many(chains) for gi in grads], axis=1)
        # grad log p = -grad(lambda . phi)
        chains = chains - (step / 2.0) * g + math.sqrt(step) * rng.normal(size=chains.shape)
        if angular:
            nrm = np.linalg.norm(chains[:, :2], axis=1, keepdims=True)
            chains[:, :2] /= np.maximum(nrm, 1e-12)
            box_part = chains[:, 2:]
            bad = np.any((box_part < user_lo) | (box_part > user_hi), axis=1)
        else:
            bad = np.any((chains < user_lo) | (chains > user_hi), axis=1)
        if np.any(bad):
            restarts += int(bad.sum())
            chains[bad] = x0
        if it >= burn_in and collected < n:
            take = min(n_chains, n - collected)
            out[collected:collected + take] = chains[:take]
            collected += take
    if return_restarts:
        return out, restarts
    return out


# ---------------------------------------------------------------------------
# linear-Gaussian test systems
# ---------------------------------------------------------------------------

@dataclass
class LinearGaussianSystem:
    F: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    R: np.ndarray
    x0_mean: np.ndarray
    x0_cov: np.ndarray


def make_linear_gaussian(seed: int, n: int = 2) -> LinearGaussianSystem:
    """A random stable linear-Gaussian system for filter regression tests."""
    rng = rng_stream(seed, "linear-system")
    A = rng.normal(size=(n, n))
    F = 0.9 * A / max(np.abs(np.linalg.eigvals(A)))
    Lq = 0.3 * rng.normal(size=(n, n))
    Q = Lq @ Lq.T + 0.05 * np.eye(n)
    H = np.eye(n) + 0.2 * rng.normal(size=(n, n))
    Lr = 0.4 * rng.normal(size=(n, n))
    R = Lr @ Lr.T + 0.1 * np.eye(n)
    x0 = rng.normal(size=n)
    P0 = np.eye(n)
    return LinearGaussianSystem(F, Q, H, R, x0, P0)


def simulate_linear(system: LinearGaussianSystem, n_steps: int, seed: int):
    rng = rng_stream(seed, "linear-sim")
    n = system.F.shape[0]
    x = rng.multivariate_normal(system.x0_mean, system.x0_cov)
    xs, ys = [x], []
    for _ in range(n_steps):
        x = system.F @ x + rng.multivariate_normal(np.zeros(n), system.Q)
        y = system.H @ x + rng.multivariate_normal(np.zeros(n), system.R)
        xs.append(x)
        ys.append(y)
    return np.array(xs), np.array(ys)

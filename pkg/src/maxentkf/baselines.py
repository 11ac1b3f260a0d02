"""Reference estimators: Kalman/BLUE, EKF and UKF on the plane, particle filter.

The EKF/UKF run on the minimal (theta, px, py) parametrization with angle
wrapping; the particle filter keeps its particles on the (c, s, px, py)
chart and renormalizes the angular pair after every propagation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scenarios import Scenario, se2_compose, se2_exp, se2_from_angle


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = 0.5 * (np.asarray(self.cov, dtype=float)
                          + np.asarray(self.cov, dtype=float).T)


def _repair_psd(P: np.ndarray, floor: float = 1e-12) -> tuple[np.ndarray, bool]:
    P = 0.5 * (P + P.T)
    eig, vec = np.linalg.eigh(P)
    if eig.min() >= 0:
        return P, False
    eig = np.clip(eig, floor, None)
    return vec @ np.diag(eig) @ vec.T, True


# ---------------------------------------------------------------------------
# linear building blocks
# ---------------------------------------------------------------------------

def kf_predict(belief: GaussianBelief, F: np.ndarray, Q: np.ndarray,
               u: np.ndarray | None = None, B: np.ndarray | None = None) -> GaussianBelief:
    mean = F @ belief.mean
    if u is not None and B is not None:
        mean = mean + B @ u
    return GaussianBelief(mean, F @ belief.cov @ F.T + Q)


def blue_update(prior: GaussianBelief, y: np.ndarray, H: np.ndarray,
                R: np.ndarray) -> GaussianBelief:
    """Minimum-variance linear update from the first two noise moments."""
    S = H @ prior.cov @ H.T + R
    try:
        K = np.linalg.solve(S.T, (prior.cov @ H.T).T).T
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"singular innovation covariance: {exc}") from exc
    mean = prior.mean + K @ (np.asarray(y, dtype=float) - H @ prior.mean)
    cov = (np.eye(len(prior.mean)) - K @ H) @ prior.cov
    return GaussianBelief(mean, cov)


def kf_filter(system, measurements: np.ndarray):
    """Closed-form Kalman recursion over a whole measurement sequence."""
    belief = GaussianBelief(system.x0_mean, system.x0_cov)
    out = []
    for y in measurements:
        belief = kf_predict(belief, system.F, system.Q)
        belief = blue_update(belief, y, system.H, system.R)
        out.append(belief)
    return out


# ---------------------------------------------------------------------------
# planar pose EKF / UKF with maximum-likelihood association
# ---------------------------------------------------------------------------

def _wrap(a):
    return (a + math.pi) % (2 * math.pi) - math.pi


def _pose_of(state: np.ndarray) -> np.ndarray:
    return se2_from_angle(state[0], state[1:])


def _state_of(pose: np.ndarray) -> np.ndarray:
    return np.array([math.atan2(pose[1], pose[0]), pose[2], pose[3]])


def _motion(state: np.ndarray, U: np.ndarray) -> np.ndarray:
    return _state_of(se2_compose(_pose_of(state), U))


def _motion_jacobians(state: np.ndarray, U: np.ndarray):
    """Jacobians of the composed pose w.r.t. the state and the Lie noise."""
    theta = state[0]
    cu, su, ux, uy = U
    thu = math.atan2(su, cu)
    c, s = math.cos(theta), math.sin(theta)
    F = np.eye(3)
    F[1, 0] = -s * ux - c * uy
    F[2, 0] = c * ux - s * uy
    # noise enters after the composition: x' = (x . U) . exp(xi)
    theta_new = theta + thu
    cn, sn = math.cos(theta_new), math.sin(theta_new)
    G = np.zeros((3, 3))
    G[0, 0] = 1.0
    G[1:, 1:] = np.array([[cn, -sn], [sn, cn]])
    return F, G


def _predicted_measurement(state: np.ndarray, landmark: np.ndarray):
    theta = state[0]
    c, s = math.cos(theta), math.sin(theta)
    R = np.array([[c, -s], [s, c]])
    d = landmark - state[1:]
    y = R.T @ d
    H = np.zeros((2, 3))
    dRT = np.array([[-s, c], [-c, -s]])
    H[:, 0] = dRT @ d
    H[:, 1:] = -R.T
    return y, H


def _choose_landmark(belief: GaussianBelief, y: np.ndarray, scenario: Scenario):
    """Greedy maximum-likelihood association under the current estimate."""
    best = None
    R = scenario.meas_cov()
    for i, L in enumerate(scenario.landmarks):
        yhat, H = _predicted_measurement(belief.mean, L)
        S = H @ belief.cov @ H.T + R
        innov = y - yhat
        m2 = float(innov @ np.linalg.solve(S, innov)) + float(np.linalg.slogdet(S)[1])
        if best is None or m2 < best[0]:
            best = (m2, i, yhat, H, S, innov)
    return best[1:]


def ekf_step(belief: GaussianBelief, u: np.ndarray, y: np.ndarray,
             scenario: Scenario) -> GaussianBelief:
    """One predict+update cycle linearized at the current estimate."""
    F, G = _motion_jacobians(belief.mean, u)
    mean = _motion(belief.mean, u)
    Q = G @ np.diag(scenario.sigma_xi**2) @ G.T
    cov = F @ belief.cov @ F.T + Q
    pred = GaussianBelief(mean, cov)

    _, yhat, H, S, innov = _choose_landmark(pred, y, scenario)
    K = pred.cov @ H.T @ np.linalg.inv(S)
    mean = pred.mean + K @ innov
    mean[0] = _wrap(mean[0])
    cov = (np.eye(3) - K @ H) @ pred.cov
    cov, _ = _repair_psd(cov)
    return GaussianBelief(mean, cov)


def _sigma_points(belief: GaussianBelief, alpha=1e-3, beta=2.0, kappa=0.0):
    n = len(belief.mean)
    lam = alpha**2 * (n + kappa) - n
    cov, _ = _repair_psd(belief.cov, floor=1e-12)
    L = np.linalg.cholesky(cov + 1e-12 * np.eye(n))
    scale = math.sqrt(n + lam)
    pts = [belief.mean]
    for i in range(n):
        pts.append(belief.mean + scale * L[:, i])
        pts.append(belief.mean - scale * L[:, i])
    wm = np.full(2 * n + 1, 1.0 / (2 * (n + lam)))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = lam / (n + lam) + (1 - alpha**2 + beta)
    return np.array(pts), wm, wc


def _angular_mean(angles: np.ndarray, w: np.ndarray) -> float:
    return math.atan2(float(w @ np.sin(angles)), float(w @ np.cos(angles)))


def ukf_step(belief: GaussianBelief, u: np.ndarray, y: np.ndarray,
             scenario: Scenario) -> GaussianBelief:
    """One unscented predict+update cycle with angle wrapping."""
    pts, wm, wc = _sigma_points(belief)
    prop = np.array([_motion(p, u) for p in pts])
    mean = np.empty(3)
    mean[0] = _angular_mean(prop[:, 0], wm)
    mean[1:] = wm @ prop[:, 1:]
    dev = prop - mean
    dev[:, 0] = _wrap(dev[:, 0])
    _, G = _motion_jacobians(mean, u)
    Q = G @ np.diag(scenario.sigma_xi**2) @ G.T
    cov = dev.T @ (dev * wc[:, None]) + Q
    pred = GaussianBelief(mean, cov)

    idx, _, _, _, _ = _choose_landmark(pred, y, scenario)
    L = scenario.landmarks[idx]
    pts, wm, wc = _sigma_points(pred)
    ys = np.array([_predicted_measurement(p, L)[0] for p in pts])
    ymean = wm @ ys
    ydev = ys - ymean
    S = ydev.T @ (ydev * wc[:, None]) + scenario.meas_cov()
    xdev = pts - pred.mean
    xdev[:, 0] = _wrap(xdev[:, 0])
    Pxy = xdev.T @ (ydev * wc[:, None])
    K = Pxy @ np.linalg.inv(S)
    mean = pred.mean + K @ (y - ymean)
    mean[0] = _wrap(mean[0])
    cov = pred.cov - K @ S @ K.T
    cov, _ = _repair_psd(cov)
    return GaussianBelief(mean, cov)


def blue_se2_step(belief: GaussianBelief, u: np.ndarray, y: np.ndarray,
                  scenario: Scenario) -> GaussianBelief:
    """EKF motion plus a linear update against the landmark mixture treated
    as a single wide Gaussian (its first two moments only)."""
    F, G = _motion_jacobians(belief.mean, u)
    mean = _motion(belief.mean, u)
    Q = G @ np.diag(scenario.sigma_xi**2) @ G.T
    pred = GaussianBelief(mean, F @ belief.cov @ F.T + Q)

    # v_L = R y + p has mixture mean/cov independent of the association
    k = len(scenario.landmarks)
    w = np.full(k, 1.0 / k)
    mix_mean = w @ scenario.landmarks
    spread = scenario.landmarks - mix_mean
    mix_cov = scenario.meas_cov() + spread.T @ (spread * w[:, None])
    theta = pred.mean[0]
    c, s = math.cos(theta), math.sin(theta)
    R = np.array([[c, -s], [s, c]])
    # measurement function m(x) = R(theta) y + p with "observation" v_L
    dR = np.array([[-s, -c], [c, -s]])
    H = np.zeros((2, 3))
    H[:, 0] = dR @ y
    H[:, 1:] = np.eye(2)
    vhat = R @ y + pred.mean[1:]
    S = H @ pred.cov @ H.T + mix_cov
    K = pred.cov @ H.T @ np.linalg.inv(S)
    mean = pred.mean + K @ (mix_mean - vhat)
    mean[0] = _wrap(mean[0])
    cov = (np.eye(3) - K @ H) @ pred.cov
    cov, _ = _repair_psd(cov)
    return GaussianBelief(mean, cov)


# ---------------------------------------------------------------------------
# particle filter with systematic resampling
# ---------------------------------------------------------------------------

@dataclass
class ParticleSet:
    states: np.ndarray   # (N, 4) chart states
    weights: np.ndarray  # (N,), non-negative, sum 1
    flagged_reset: bool = False

    @property
    def ess(self) -> float:
        return 1.0 / float(np.sum(self.weights**2))

    def position_mean(self) -> np.ndarray:
        return self.weights @ self.states[:, 2:]

    def mean_pose(self) -> np.ndarray:
        c = float(self.weights @ self.states[:, 0])
        s = float(self.weights @ self.states[:, 1])
        norm = math.hypot(c, s)
        if norm < 1e-12:
            c, s = 1.0, 0.0
        else:
            c, s = c / norm, s / norm
        p = self.weights @ self.states[:, 2:]
        return np.array([c, s, p[0], p[1]])


def init_particles(scenario: Scenario, n: int, rng: np.random.Generator) -> ParticleSet:
    theta = scenario.start_theta + scenario.prior_sigma_theta * rng.normal(size=n)
    pos = scenario.start_pos + scenario.prior_sigma_pos * rng.normal(size=(n, 2))
    states = np.stack([np.cos(theta), np.sin(theta), pos[:, 0], pos[:, 1]], axis=1)
    return ParticleSet(states, np.full(n, 1.0 / n))


def _systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    return np.searchsorted(np.cumsum(weights), positions)


def pf_step(ps: ParticleSet, u: np.ndarray, y: np.ndarray, scenario: Scenario,
            rng: np.random.Generator, ess_threshold: float = 0.5) -> ParticleSet:
    """Propagate with sampled pose noise, weight by the equal-weight landmark
    mixture likelihood, resample systematically when the ESS drops."""
    n = ps.states.shape[0]
    xi = rng.normal(size=(n, 3)) * scenario.sigma_xi
    W = se2_exp(xi)
    UW = se2_compose(np.broadcast_to(u, (n, 4)), W)
    states = se2_compose(ps.states, UW)
    nrm = np.sqrt(states[:, 0] ** 2 + states[:, 1] ** 2)
    states[:, 0] /= nrm
    states[:, 1] /= nrm

    # v_L = R y + p, compared against the landmark mixture
    c, s = states[:, 0], states[:, 1]
    vx = c * y[0] - s * y[1] + states[:, 2]
    vy = s * y[0] + c * y[1] + states[:, 3]
    var = scenario.sigma_v**2
    lik = np.zeros(n)
    for L in scenario.landmarks:
        d2 = (vx - L[0]) ** 2 + (vy - L[1]) ** 2
        lik += np.exp(-0.5 * d2 / var)
    lik /= len(scenario.landmarks) * 2 * math.pi * var

    weights = ps.weights * lik
    total = weights.sum()
    flagged = False
    if total <= 1e-300:
        weights = np.full(n, 1.0 / n)
        flagged = True
    else:
        weights = weights / total
    out = ParticleSet(states, weights, flagged)
    if out.ess / n < ess_threshold:
        idx = _systematic_resample(weights, rng)
        out = ParticleSet(states[idx], np.full(n, 1.0 / n), flagged)
    return out

"""Executable invariance checks: equivariance, the chain condition, and
twin experiments.

A "twin experiment" runs the same filter from an initial belief and from
its transformed-and-inflated counterpart on identical sensor streams and
tracks how far the two estimate trajectories drift apart.  For an
invariant filter the drift stays at floating-point noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ekf import NoiseConfig
from .filters import BehindCameraError, CameraModel, VinsEkf, vins_measurement
from .msckf import MsckfFilter, WindowConfig
from .sim import (INITIAL_COV, ScenarioConfig, Trajectory, generate_landmarks,
                  state_landmark_ids, synthesize_camera, synthesize_imu)
from .states import (GRAVITY, GaussianBelief, UnobsTransform,
                     VINS_RETRACTIONS, VinsState, apply_unobs_transform,
                     msckf_retraction, transform_equivariance_matrix,
                     transform_error_jacobians, transform_noise_jacobian,
                     unit_gravity)
from .lie import exp_so3

# Divergence norms are reported relative to the environment scale so that
# pass/fail thresholds are scale-free.
TRAJECTORY_SCALE = 6.5

VINS_KINDS = ("conekf", "riekf")
WINDOW_KINDS = ("msckf", "ri-msckf")


def variant_of(kind):
    return "riekf" if kind in ("riekf", "ri-msckf") else "conekf"


def inverse_transform(t: UnobsTransform, gravity=GRAVITY) -> UnobsTransform:
    dR = exp_so3(unit_gravity(gravity) * t.theta1)
    return UnobsTransform(-t.theta1, -(dR.T @ t.theta2), t.sigma)


# ---------------------------------------------------------------------------
# Scenario plumbing
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    """Frozen sensor streams plus everything needed to build filters."""

    cfg: ScenarioConfig
    camera: CameraModel
    traj: Trajectory
    landmarks: np.ndarray
    state_ids: list
    samples: list
    frames: list

    def imu_chunk(self, frame_index):
        n = self.cfg.imu_per_frame
        return self.samples[(frame_index - 1) * n: frame_index * n + 1]


def build_scenario(duration_s=10.0, seed=3, landmark_count=16,
                   state_landmark_count=None, noise=None,
                   cam_rate_hz=20.0, imu_rate_hz=200.0) -> Scenario:
    if state_landmark_count is None:
        state_landmark_count = landmark_count
    cfg = ScenarioConfig(duration_s=duration_s, seed=seed,
                         landmark_count=landmark_count,
                         state_landmark_count=state_landmark_count,
                         cam_rate_hz=cam_rate_hz, imu_rate_hz=imu_rate_hz,
                         noise=noise if noise is not None else NoiseConfig.from_sigmas())
    traj = Trajectory(cfg)
    landmarks = generate_landmarks(cfg, np.random.default_rng(cfg.seed))
    cam = CameraModel.default()
    ss = np.random.SeedSequence(cfg.seed)
    imu_rng, cam_rng = [np.random.default_rng(c) for c in ss.spawn(2)]
    samples = synthesize_imu(traj, cfg, imu_rng)
    frames = synthesize_camera(traj, landmarks, cam, cfg, cam_rng)
    return Scenario(cfg, cam, traj, landmarks, state_landmark_ids(cfg),
                    samples, frames)


def initial_belief(scenario: Scenario, kind):
    imu0 = scenario.traj.imu_state(0.0)
    if kind in VINS_KINDS:
        state = VinsState(imu0, scenario.landmarks[scenario.state_ids])
        return GaussianBelief(state, INITIAL_COV * np.eye(state.dim))
    return GaussianBelief(imu0, INITIAL_COV * np.eye(15))


def make_filter(kind, scenario: Scenario, belief, trace=False):
    if kind in VINS_KINDS:
        return VinsEkf(kind, scenario.camera, scenario.cfg.noise, belief,
                       landmark_ids=scenario.state_ids,
                       gravity=scenario.cfg.gravity, trace=trace)
    if kind in WINDOW_KINDS:
        return MsckfFilter(variant_of(kind), scenario.camera,
                           scenario.cfg.noise, belief, window=WindowConfig(),
                           gravity=scenario.cfg.gravity, trace=trace)
    raise ValueError(f"unknown filter kind {kind!r}")


@dataclass
class FrameRecord:
    t: float
    Phi: np.ndarray
    H: np.ndarray
    gain: np.ndarray
    mean: object


def run_traced(kind, scenario: Scenario, belief=None, steps=None):
    """Drive a filter through the scenario, recording per-frame Phi/H/K."""
    if belief is None:
        belief = initial_belief(scenario, kind)
    flt = make_filter(kind, scenario, belief, trace=True)
    frames = scenario.frames if steps is None else scenario.frames[:steps]
    records = []
    for j, (t, meas) in enumerate(frames):
        n_phi, n_h, n_k = (len(flt.trace.phis), len(flt.trace.hs),
                           len(flt.trace.gains))
        flt.process_frame(t, None if j == 0 else scenario.imu_chunk(j), meas)
        records.append(FrameRecord(
            t,
            flt.trace.phis[-1] if len(flt.trace.phis) > n_phi else None,
            flt.trace.hs[-1] if len(flt.trace.hs) > n_h else None,
            flt.trace.gains[-1] if len(flt.trace.gains) > n_k else None,
            flt.belief.mean.copy()))
    return flt, records


# ---------------------------------------------------------------------------
# Theorem-level checks
# ---------------------------------------------------------------------------

@dataclass
class EquivarianceReport:
    state_dependence: float
    retract_residual: float
    condition_number: float
    analytic_gap: float
    w_matrix: np.ndarray


def check_deterministic_equivariance(variant, t: UnobsTransform, samples=6,
                                     num_landmarks=3, seed=0,
                                     gravity=GRAVITY) -> EquivarianceReport:
    """Verify that the deterministic transform acts linearly on errors with
    one state-independent matrix W."""
    from .audit import random_vins_state

    rng = np.random.default_rng(seed)
    retraction = VINS_RETRACTIONS[variant]
    states = [random_vins_state(rng, num_landmarks) for _ in range(samples)]
    ms = [transform_error_jacobians(x, t, retraction, gravity)[0]
          for x in states]
    dep = max((np.abs(a - b).max() for a in ms for b in ms), default=0.0)

    W = transform_equivariance_matrix(states[0], t, variant, gravity)
    gap = max(np.abs(W - m).max() for m in ms)

    residual = 0.0
    for x in states:
        for _ in range(4):
            e = rng.uniform(-0.2, 0.2, x.dim)
            lhs = apply_unobs_transform(retraction.retract(x, e), t, None,
                                        gravity)
            rhs = retraction.retract(apply_unobs_transform(x, t, None, gravity),
                                     W @ e)
            residual = max(residual,
                           np.linalg.norm(retraction.inverse_retract(lhs, rhs)))
    return EquivarianceReport(dep, residual, float(np.linalg.cond(W)), gap, W)


@dataclass
class ChainReport:
    residuals: np.ndarray  # per frame, relative
    max_residual: float


def check_chain_condition(kind, scenario: Scenario, start_step=0,
                          steps=None) -> ChainReport:
    """Largest relative norm of H_k Phi_{k-1} ... Phi_i N_i over the run."""
    if kind not in VINS_KINDS:
        raise ValueError("chain condition is checked on the full-state filters")
    flt, records = run_traced(kind, scenario, steps=steps)
    t_id = UnobsTransform()  # stochastic identity: theta = 0
    x_i = records[start_step].mean
    N = transform_noise_jacobian(x_i, t_id, variant_of(kind))
    norm_N = np.linalg.norm(N)
    A = N
    residuals = np.zeros(len(records))
    for k in range(start_step + 1, len(records)):
        rec = records[k]
        if rec.Phi is not None:
            A = rec.Phi @ A
        if rec.H is not None:
            residuals[k] = (np.linalg.norm(rec.H @ A)
                            / (np.linalg.norm(rec.H) * norm_N))
    return ChainReport(residuals, float(residuals.max()))


@dataclass
class TwinTrace:
    t: np.ndarray
    divergence_mean: np.ndarray
    divergence_meas: np.ndarray
    gain_residual: np.ndarray
    cov_gap: np.ndarray  # ||P_y - (P + chain N Sigma N^T chain^T)|| (stoch-id)

    @property
    def max_divergence(self):
        return float(np.nanmax(self.divergence_mean))


def twin_beliefs(base: GaussianBelief, t: UnobsTransform, mode, variant,
                 gravity=GRAVITY):
    """Initial (X, Y) beliefs for a twin experiment."""
    P = base.cov
    if mode == "identity":
        return base.copy(), base.copy()
    if mode == "deterministic":
        W = transform_equivariance_matrix(base.mean, t, variant, gravity)
        mean_y = apply_unobs_transform(base.mean, t, None, gravity)
        return base.copy(), GaussianBelief(mean_y, W @ P @ W.T)
    if mode == "stochastic-identity":
        t_id = UnobsTransform(0.0, np.zeros(3), t.sigma)
        N = transform_noise_jacobian(base.mean, t_id, variant, gravity)
        return base.copy(), GaussianBelief(base.mean.copy(),
                                           P + N @ t.sigma @ N.T)
    if mode == "full":
        W = transform_equivariance_matrix(base.mean, t, variant, gravity)
        N = transform_noise_jacobian(base.mean, t, variant, gravity)
        mean_y = apply_unobs_transform(base.mean, t, None, gravity)
        return base.copy(), GaussianBelief(mean_y,
                                           W @ P @ W.T + N @ t.sigma @ N.T)
    raise ValueError(f"unknown twin mode {mode!r}")


def _mean_divergence(kind, mean_x, mean_y, t_inv, gravity):
    if t_inv is not None:
        mean_y = apply_unobs_transform(mean_y, t_inv, None, gravity)
    if kind in VINS_KINDS:
        e = VINS_RETRACTIONS[kind].inverse_retract(mean_y, mean_x)
    else:
        from .states import msckf_inverse_retract
        e = msckf_inverse_retract(mean_y, mean_x, variant_of(kind))
    return np.linalg.norm(e) / TRAJECTORY_SCALE


def _meas_divergence(kind, scenario, flt_x, flt_y, meas):
    if kind not in VINS_KINDS:
        return np.nan  # window filters carry no landmark estimates
    worst = 0.0
    for m in meas:
        idx = flt_x._index.get(m.landmark_id)
        if idx is None:
            continue
        try:
            zx = vins_measurement(flt_x.belief.mean, scenario.camera, idx)
            zy = vins_measurement(flt_y.belief.mean, scenario.camera, idx)
        except BehindCameraError:
            continue
        worst = max(worst, float(np.linalg.norm(zx - zy)))
    return worst


def run_twin_experiment(kind, scenario: Scenario, t: UnobsTransform, mode,
                        steps=None) -> TwinTrace:
    """Run a filter and its transformed twin on identical streams."""
    variant = variant_of(kind)
    gravity = scenario.cfg.gravity
    base = initial_belief(scenario, kind)
    belief_x, belief_y = twin_beliefs(base, t, mode, variant, gravity)
    flt_x = make_filter(kind, scenario, belief_x, trace=True)
    flt_y = make_filter(kind, scenario, belief_y, trace=True)
    t_inv = (inverse_transform(t, gravity)
             if mode in ("deterministic", "full") else None)

    # chain accumulator for the Appendix-C covariance identity (full-state
    # filters only; the window filters reshape their state over time)
    track_cov = mode == "stochastic-identity" and kind in VINS_KINDS
    if track_cov:
        t_id = UnobsTransform(0.0, np.zeros(3), t.sigma)
        C = transform_noise_jacobian(base.mean, t_id, variant, gravity)

    frames = scenario.frames if steps is None else scenario.frames[:steps]
    n = len(frames)
    ts = np.zeros(n)
    div_mean = np.zeros(n)
    div_meas = np.zeros(n)
    gain_res = np.full(n, np.nan)
    cov_gap = np.full(n, np.nan)

    for j, (t_frame, meas) in enumerate(frames):
        chunk = None if j == 0 else scenario.imu_chunk(j)
        kx_before = len(flt_x.trace.gains)
        flt_x.process_frame(t_frame, chunk, meas)
        flt_y.process_frame(t_frame, chunk, meas)

        ts[j] = t_frame
        div_mean[j] = _mean_divergence(kind, flt_x.belief.mean,
                                       flt_y.belief.mean, t_inv, gravity)
        div_meas[j] = _meas_divergence(kind, scenario, flt_x, flt_y, meas)

        if kind in VINS_KINDS and len(flt_x.trace.gains) > kx_before and \
                len(flt_y.trace.gains) == len(flt_x.trace.gains):
            Kx = flt_x.trace.gains[-1]
            Ky = flt_y.trace.gains[-1]
            if Kx.shape == Ky.shape:
                if mode in ("deterministic", "full"):
                    W = transform_equivariance_matrix(flt_x.belief.mean, t,
                                                      variant, gravity)
                    ref = W @ Kx
                else:
                    ref = Kx
                gain_res[j] = np.abs(Ky - ref).max() / max(
                    1.0, np.abs(Kx).max())

        if track_cov:
            if j > 0 and flt_x.trace.phis:
                C = flt_x.trace.phis[-1] @ C
            Px, Py = flt_x.belief.cov, flt_y.belief.cov
            gap = Py - Px - C @ t.sigma @ C.T
            cov_gap[j] = np.abs(gap).max() / max(np.abs(Px).max(), 1e-12)

    return TwinTrace(ts, div_mean, div_meas, gain_res, cov_gap)

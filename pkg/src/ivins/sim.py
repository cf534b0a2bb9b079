"""Ground-truth synthesis and Monte Carlo orchestration.

The reference trajectory is an analytic circle with sinusoidal altitude and
roll/pitch modulation; body rates and specific force come from the closed
form derivatives, so the simulated IMU is exact at the sample instants.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .ekf import ImuSample, Measurement, NoiseConfig
from .filters import CameraModel, VinsEkf
from .metrics import RunMetrics, imu_errors
from .msckf import MsckfFilter, WindowConfig
from .states import GRAVITY, GaussianBelief, ImuState, VinsState

VINS_FILTERS = ("conekf", "riekf")
WINDOW_FILTERS = ("msckf", "ri-msckf")
KNOWN_FILTERS = VINS_FILTERS + WINDOW_FILTERS

INITIAL_COV = 1e-6  # diagonal of P0; nonzero so NEES is defined at step 0


def default_noise():
    return NoiseConfig.from_sigmas()


@dataclass
class ScenarioConfig:
    """Trajectory, sensor and environment parameters for one simulation."""

    radius_m: float = 5.0
    angular_rate: float = 0.6
    vert_amp_m: float = 0.5
    vert_freq_hz: float = 0.2
    roll_amp: float = 0.15
    roll_freq_hz: float = 0.5
    pitch_amp: float = 0.15
    pitch_freq_hz: float = 0.4
    duration_s: float = 60.0
    imu_rate_hz: float = 200.0
    cam_rate_hz: float = 20.0
    landmark_count: int = 675
    landmark_radius_m: float = 6.5
    landmark_height_m: float = 4.0
    state_landmark_count: int = 16
    noise: NoiseConfig = field(default_factory=default_noise)
    # scales the injected pixel noise only; the filters keep modelling
    # noise.pixel_sigma.  Zero gives exactly noise-free measurements.
    pixel_noise_scale: float = 1.0
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    seed: int = 0

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float)
        if self.imu_rate_hz <= 0 or self.cam_rate_hz <= 0:
            raise ValueError("rates must be positive")
        ratio = self.imu_rate_hz / self.cam_rate_hz
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("camera rate must divide the IMU rate")

    @property
    def imu_per_frame(self):
        return int(round(self.imu_rate_hz / self.cam_rate_hz))


class Trajectory:
    """Analytic ground truth: pose, velocity and exact IMU signals."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg

    def _angles(self, t):
        c = self.cfg
        yaw = c.angular_rate * t + np.pi / 2.0
        roll = c.roll_amp * np.sin(2.0 * np.pi * c.roll_freq_hz * t)
        pitch = c.pitch_amp * np.sin(2.0 * np.pi * c.pitch_freq_hz * t + 0.7)
        return yaw, pitch, roll

    def rotation(self, t):
        yaw, pitch, roll = self._angles(t)
        cy, sy = np.cos(yaw), np.sin(yaw)
        cp, sp = np.cos(pitch), np.sin(pitch)
        cr, sr = np.cos(roll), np.sin(roll)
        Rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
        Ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
        Rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
        return Rz @ Ry @ Rx

    def position(self, t):
        c = self.cfg
        wz = 2.0 * np.pi * c.vert_freq_hz
        return np.array([c.radius_m * np.cos(c.angular_rate * t),
                         c.radius_m * np.sin(c.angular_rate * t),
                         c.vert_amp_m * np.sin(wz * t)])

    def velocity(self, t):
        c = self.cfg
        w = c.angular_rate
        wz = 2.0 * np.pi * c.vert_freq_hz
        return np.array([-c.radius_m * w * np.sin(w * t),
                         c.radius_m * w * np.cos(w * t),
                         c.vert_amp_m * wz * np.cos(wz * t)])

    def accel_world(self, t):
        c = self.cfg
        w = c.angular_rate
        wz = 2.0 * np.pi * c.vert_freq_hz
        return np.array([-c.radius_m * w * w * np.cos(w * t),
                         -c.radius_m * w * w * np.sin(w * t),
                         -c.vert_amp_m * wz * wz * np.sin(wz * t)])

    def body_rates(self, t):
        c = self.cfg
        yaw, pitch, roll = self._angles(t)
        yaw_d = c.angular_rate
        roll_d = c.roll_amp * 2.0 * np.pi * c.roll_freq_hz * np.cos(
            2.0 * np.pi * c.roll_freq_hz * t)
        pitch_d = c.pitch_amp * 2.0 * np.pi * c.pitch_freq_hz * np.cos(
            2.0 * np.pi * c.pitch_freq_hz * t + 0.7)
        cp, sp = np.cos(pitch), np.sin(pitch)
        cr, sr = np.cos(roll), np.sin(roll)
        return np.array([roll_d - yaw_d * sp,
                         pitch_d * cr + yaw_d * cp * sr,
                         yaw_d * cp * cr - pitch_d * sr])

    def accel_body(self, t):
        return self.rotation(t).T @ (self.accel_world(t) - self.cfg.gravity)

    def imu_state(self, t):
        return ImuState(self.rotation(t), self.velocity(t), self.position(t),
                        np.zeros(3), np.zeros(3))


def generate_landmarks(cfg: ScenarioConfig, rng):
    """Uniform points on the lateral surface of a cylinder around the
    trajectory axis."""
    angles = rng.uniform(0.0, 2.0 * np.pi, cfg.landmark_count)
    heights = rng.uniform(-0.5 * cfg.landmark_height_m,
                          0.5 * cfg.landmark_height_m, cfg.landmark_count)
    return np.column_stack([cfg.landmark_radius_m * np.cos(angles),
                            cfg.landmark_radius_m * np.sin(angles),
                            heights])


def state_landmark_ids(cfg: ScenarioConfig):
    """Deterministic landmark subset carried by the full-state filters."""
    k = min(cfg.state_landmark_count, cfg.landmark_count)
    return sorted(set(np.linspace(0, cfg.landmark_count - 1, k).astype(int).tolist()))


def synthesize_imu(traj: Trajectory, cfg: ScenarioConfig, rng):
    """IMU readings: truth + random-walk biases + discretized white noise."""
    n = int(round(cfg.duration_s * cfg.imu_rate_hz))
    ts = np.arange(n + 1) / cfg.imu_rate_hz
    dt = 1.0 / cfg.imu_rate_hz
    s = cfg.noise.sigmas
    wn_g = s["gyro"] * np.sqrt(cfg.imu_rate_hz) * rng.standard_normal((n + 1, 3))
    wn_a = s["accel"] * np.sqrt(cfg.imu_rate_hz) * rng.standard_normal((n + 1, 3))
    walk_g = s["gyro_walk"] * np.sqrt(dt) * rng.standard_normal((n + 1, 3))
    walk_a = s["accel_walk"] * np.sqrt(dt) * rng.standard_normal((n + 1, 3))
    bg = np.cumsum(walk_g, axis=0) - walk_g[0]
    ba = np.cumsum(walk_a, axis=0) - walk_a[0]
    samples = []
    for k, t in enumerate(ts):
        samples.append(ImuSample(
            t, traj.body_rates(t) + bg[k] + wn_g[k],
            traj.accel_body(t) + ba[k] + wn_a[k]))
    return samples


def synthesize_camera(traj: Trajectory, landmarks, cam: CameraModel,
                      cfg: ScenarioConfig, rng):
    """Per-frame pixel measurements of all visible landmarks, stable ids."""
    n = int(round(cfg.duration_s * cfg.cam_rate_hz))
    sigma = cfg.pixel_noise_scale * cfg.noise.pixel_sigma
    cos_cone = np.cos(np.pi / 4.0)
    frames = []
    for j in range(n + 1):
        t = j / cfg.cam_rate_hz
        R, p = traj.rotation(t), traj.position(t)
        pts_imu = (landmarks - p) @ R
        pts_cam = pts_imu @ cam.T_CI.R.T + cam.T_CI.p
        z = pts_cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cam.fx * pts_cam[:, 0] / z + cam.cx
            v = cam.fy * pts_cam[:, 1] / z + cam.cy
            visible = (z > cam.z_min) & (u >= 0) & (u < cam.width) \
                & (v >= 0) & (v < cam.height)
            if cam.fov_check:
                visible &= z / np.linalg.norm(pts_cam, axis=1) >= cos_cone
        ids = np.flatnonzero(visible)
        noise = sigma * rng.standard_normal((ids.size, 2))
        meas = [Measurement(t, int(lid), np.array([u[lid], v[lid]]) + noise[i])
                for i, lid in enumerate(ids)]
        frames.append((t, meas))
    return frames


# ---------------------------------------------------------------------------
# Filter construction and execution
# ---------------------------------------------------------------------------

def make_filter(name, cfg: ScenarioConfig, cam: CameraModel, traj: Trajectory,
                landmarks, trace=False):
    """Truth-initialized filter with a small diagonal initial covariance."""
    imu0 = traj.imu_state(0.0)
    if name in WINDOW_FILTERS:
        variant = "riekf" if name == "ri-msckf" else "conekf"
        belief = GaussianBelief(imu0, INITIAL_COV * np.eye(15))
        return MsckfFilter(variant, cam, cfg.noise, belief,
                           window=WindowConfig(), gravity=cfg.gravity,
                           trace=trace)
    if name in VINS_FILTERS:
        ids = state_landmark_ids(cfg)
        state = VinsState(imu0, landmarks[ids])
        belief = GaussianBelief(state, INITIAL_COV * np.eye(state.dim))
        return VinsEkf(name, cam, cfg.noise, belief, landmark_ids=ids,
                       gravity=cfg.gravity, trace=trace)
    raise ValueError(f"unknown filter {name!r}")


def run_filter(flt, frames, samples, imu_per_frame, traj: Trajectory,
               variant: str):
    """Drive one filter through the frame stream, collecting metrics."""
    t_out, eo, ep, no, npse = [], [], [], [], []
    for j, (t, meas) in enumerate(frames):
        if j == 0:
            flt.process_frame(t, None, meas)
        else:
            chunk = samples[(j - 1) * imu_per_frame: j * imu_per_frame + 1]
            flt.process_frame(t, chunk, meas)
        err_ori, err_pos, nees_ori, nees_pose = imu_errors(
            traj.rotation(t), traj.position(t), flt.imu_estimate,
            flt.belief.cov, variant)
        t_out.append(t)
        eo.append(err_ori)
        ep.append(err_pos)
        no.append(nees_ori)
        npse.append(nees_pose)
    return RunMetrics(np.array(t_out), np.array(eo), np.array(ep),
                      np.array(no), np.array(npse))


def _variant_of(name):
    return "riekf" if name in ("riekf", "ri-msckf") else "conekf"


def run_single(cfg: ScenarioConfig, filter_names, run_entropy):
    """One Monte Carlo run: fresh noise, same trajectory and map."""
    ss = np.random.SeedSequence(run_entropy)
    imu_rng, cam_rng = [np.random.default_rng(c) for c in ss.spawn(2)]
    traj = Trajectory(cfg)
    landmarks = generate_landmarks(cfg, np.random.default_rng(cfg.seed))
    cam = CameraModel.default()
    samples = synthesize_imu(traj, cfg, imu_rng)
    frames = synthesize_camera(traj, landmarks, cam, cfg, cam_rng)
    out = {}
    for name in filter_names:
        flt = make_filter(name, cfg, cam, traj, landmarks)
        out[name] = run_filter(flt, frames, samples, cfg.imu_per_frame, traj,
                               _variant_of(name))
    return out


def _mc_worker(args):
    cfg, filter_names, entropy = args
    return run_single(cfg, filter_names, entropy)


@dataclass
class FilterAggregate:
    t: np.ndarray
    rms_ori: np.ndarray
    rms_pos: np.ndarray
    nees_ori: np.ndarray
    nees_pose: np.ndarray
    runs: list  # list[RunMetrics]


def aggregate_runs(run_metrics):
    t = run_metrics[0].t
    eo = np.array([m.err_ori for m in run_metrics])
    ep = np.array([m.err_pos for m in run_metrics])
    no = np.array([m.nees_ori for m in run_metrics])
    npse = np.array([m.nees_pose for m in run_metrics])
    return FilterAggregate(t, np.sqrt(np.mean(eo ** 2, axis=0)),
                           np.sqrt(np.mean(ep ** 2, axis=0)),
                           np.mean(no, axis=0), np.mean(npse, axis=0),
                           list(run_metrics))


def resolve_workers(workers, runs):
    if workers is None:
        workers = 1
    env = os.environ.get("IVINS_THREADS")
    if env:
        workers = min(workers, max(1, int(env)))
    return max(1, min(workers, runs))


def run_monte_carlo(cfg: ScenarioConfig, filter_names, runs, workers=None):
    """Run the Monte Carlo protocol; returns {filter: FilterAggregate}."""
    for name in filter_names:
        if name not in KNOWN_FILTERS:
            raise ValueError(f"unknown filter {name!r}")
    children = np.random.SeedSequence(cfg.seed).spawn(runs)
    jobs = [(cfg, tuple(filter_names), child.entropy) for child in children]
    workers = resolve_workers(workers, runs)
    if workers > 1:
        import multiprocessing as mp
        with mp.get_context("spawn").Pool(workers) as pool:
            per_run = pool.map(_mc_worker, jobs)
    else:
        per_run = [_mc_worker(j) for j in jobs]
    return {name: aggregate_runs([r[name] for r in per_run])
            for name in filter_names}

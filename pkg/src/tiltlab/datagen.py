"""Dataset generators: block-Gaussian pairs, the Gaussian-process modality
pair (pointwise field values vs leading KL coefficients), the
Eulerian/Lagrangian flow pair, and MNIST IDX ingestion.

Every generator is a pure function of (config, rng); independent samples use
split RNG streams keyed by sample index, so batch generation is row-for-row
bit-identical to generating each sample alone from its own stream.
"""

from __future__ import annotations

import gzip
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, CountMismatch, TruncatedFile
from .gaussian import BlockGaussian
from .linalg import chol_sample
from .rng import SeededRng

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class PairedDataset:
    u: np.ndarray
    v: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        u = np.atleast_2d(np.asarray(self.u, dtype=np.float64))
        v = np.atleast_2d(np.asarray(self.v, dtype=np.float64))
        if u.shape[0] != v.shape[0]:
            raise ValueError("u and v must pair up row for row")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("dataset entries must be finite")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def n(self) -> int:
        return self.u.shape[0]


def sample_block_gaussian(g: BlockGaussian, n: int, rng: SeededRng) -> PairedDataset:
    if n < 1:
        raise ValueError("need at least one sample")
    draws = chol_sample(np.zeros(g.n_x + g.n_y), g.joint(), n, rng)
    meta = {"generator": "block_gaussian", "n": n, "rng": rng.describe()}
    return PairedDataset(u=draws[:, : g.n_x], v=draws[:, g.n_x :], meta=meta)


@dataclass(frozen=True)
class GpConfig:
    """Karhunen-Loeve field on (0,1): eigenvalues (j^2 pi^2 + tau^2)^{-alpha}
    against the cosine basis, observed at grid_points uniform interior
    points with iid observation noise; the second modality keeps the first
    n_coeffs KL coefficients raw (the basis-normalization constant is left
    in the eigenfunctions, and the empirical-covariance pathway downstream
    is insensitive to that convention)."""

    tau_inv_length: float = 3.0
    alpha: float = 2.0
    n_modes: int = 1000
    grid_points: int = 12
    noise_sigma: float = 0.05
    n_coeffs: int = 5

    def __post_init__(self):
        if min(self.tau_inv_length, self.alpha, self.noise_sigma) <= 0:
            raise ValueError("tau_inv_length, alpha, noise_sigma must be positive")
        if self.grid_points < 1 or self.n_coeffs < 1:
            raise ValueError("grid_points and n_coeffs must be positive")
        if self.n_modes < self.n_coeffs:
            raise ValueError("n_modes must cover n_coeffs")


def gp_grid(cfg: GpConfig) -> np.ndarray:
    n = cfg.grid_points
    return np.arange(1, n + 1) / (n + 1)


def gp_eigenvalues(cfg: GpConfig) -> np.ndarray:
    j = np.arange(1, cfg.n_modes + 1)
    return (j**2 * np.pi**2 + cfg.tau_inv_length**2) ** (-cfg.alpha)


def gp_design_matrix(cfg: GpConfig) -> np.ndarray:
    """phi[i, j] = sqrt(lambda_j) cos(j pi x_i): maps KL coefficients to
    noiseless field values at the grid."""
    x = gp_grid(cfg)
    j = np.arange(1, cfg.n_modes + 1)
    return np.sqrt(gp_eigenvalues(cfg))[None, :] * np.cos(np.outer(x, j) * np.pi)


def gp_analytic_blocks(cfg: GpConfig) -> BlockGaussian:
    """Exact joint covariance of (u, v): C_uu = Phi Phi^T + sigma^2 I,
    C_uv = Phi[:, :n_coeffs], C_vv = I."""
    phi = gp_design_matrix(cfg)
    c_uu = phi @ phi.T + cfg.noise_sigma**2 * np.eye(cfg.grid_points)
    return BlockGaussian(
        0.5 * (c_uu + c_uu.T), phi[:, : cfg.n_coeffs].copy(), np.eye(cfg.n_coeffs)
    )


def gp_modality_pair(cfg: GpConfig, n: int, rng: SeededRng) -> PairedDataset:
    if n < 1:
        raise ValueError("need at least one sample")
    phi = gp_design_matrix(cfg)
    xi = rng.standard_normal((n, cfg.n_modes))
    noise = rng.standard_normal((n, cfg.grid_points))
    u = xi @ phi.T + cfg.noise_sigma * noise
    v = xi[:, : cfg.n_coeffs].copy()
    meta = {
        "generator": "gaussian_gp",
        "n": n,
        "rng": rng.describe(),
        "tau_inv_length": cfg.tau_inv_length,
        "alpha": cfg.alpha,
        "n_modes": cfg.n_modes,
        "grid_points": cfg.grid_points,
        "noise_sigma": cfg.noise_sigma,
        "n_coeffs": cfg.n_coeffs,
    }
    return PairedDataset(u=u, v=v, meta=meta)


@dataclass(frozen=True)
class FlowConfig:
    """Streamfunction flow on the torus: modes k in {-m..m}^2 (row-major
    lexicographic), per-mode temporal frequencies omega, integrated from x0
    by classical RK4 with step dt up to t_final, positions recorded every
    record_stride steps."""

    m: int
    omega: tuple
    x0: tuple = (0.5, 0.5)
    dt: float = 1e-3
    t_final: float = 1.0
    record_stride: int = 10

    def __post_init__(self):
        if self.m < 0:
            raise ValueError("m must be nonnegative")
        omega = tuple(float(w) for w in self.omega)
        if len(omega) != self.k_count:
            raise ValueError(f"omega must have one entry per mode ({self.k_count})")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        steps = self.t_final / self.dt
        if abs(steps - round(steps)) > 1e-9 or round(steps) < 1:
            raise ValueError("t_final must be a positive integer multiple of dt")
        if self.record_stride < 1 or self.record_stride > round(steps):
            raise ValueError("record_stride must be in [1, steps]")
        x0 = tuple(float(c) for c in self.x0)
        if len(x0) != 2 or not all(0.0 <= c < 1.0 for c in x0):
            raise ValueError("x0 must lie in [0,1)^2")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "x0", x0)

    @property
    def k_count(self) -> int:
        return (2 * self.m + 1) ** 2

    @property
    def steps(self) -> int:
        return round(self.t_final / self.dt)

    @property
    def n_records(self) -> int:
        return self.steps // self.record_stride


def mode_set(m: int) -> np.ndarray:
    """Wavevectors (k1, k2), k1 outer and k2 inner from -m to m. The
    ordering is negation-reversing: mode -k sits at the mirrored index,
    which makes conjugate symmetrization a flip."""
    span = np.arange(-m, m + 1)
    k1, k2 = np.meshgrid(span, span, indexing="ij")
    return np.column_stack([k1.ravel(), k2.ravel()])


def draw_flow_config(
    m: int,
    rng: SeededRng,
    x0=(0.5, 0.5),
    dt: float = 1e-3,
    t_final: float = 1.0,
    record_stride: int = 10,
) -> FlowConfig:
    """Temporal frequencies drawn once, uniform on [0, 10 * 2 pi / t_final]."""
    k = (2 * m + 1) ** 2
    omega = rng.uniform(0.0, 10.0 * TWO_PI / t_final, (k,))
    return FlowConfig(
        m=m, omega=tuple(omega), x0=x0, dt=dt, t_final=t_final, record_stride=record_stride
    )


def draw_flow_coeffs(cfg: FlowConfig, rng: SeededRng) -> np.ndarray:
    """iid standard complex normal coefficients, conjugate-symmetrized so
    the streamfunction is real (the zero mode comes out purely real under
    the index-reversal symmetry)."""
    z = rng.standard_normal((cfg.k_count, 2))
    psi = (z[:, 0] + 1j * z[:, 1]) / np.sqrt(2.0)
    return 0.5 * (psi + np.conj(psi[::-1]))


def coeffs_to_real(psi: np.ndarray) -> np.ndarray:
    """Interleave complex coefficients as [Re, Im, Re, Im, ...]."""
    return np.column_stack([psi.real, psi.imag]).ravel()


def real_to_coeffs(vec) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    if vec.size % 2:
        raise ValueError("coefficient vector must interleave Re/Im pairs")
    return vec[0::2] + 1j * vec[1::2]


def _velocity(psi: np.ndarray, cfg: FlowConfig, t: float, x: np.ndarray) -> np.ndarray:
    """Skew-gradient of the streamfunction at positions x (B x 2) for
    per-sample coefficients psi (B x K). Written with explicit elementwise
    broadcasting so a batch of one reproduces every float op of a larger
    batch's row."""
    k = mode_set(cfg.m).astype(np.float64)
    k1 = k[:, 0]
    k2 = k[:, 1]
    omega = np.asarray(cfg.omega)
    phase = omega * t + TWO_PI * (x[:, :1] * k1 + x[:, 1:] * k2)
    im = (psi * np.exp(1j * phase)).imag
    s1 = np.sum(k1 * im, axis=1)
    s2 = np.sum(k2 * im, axis=1)
    return np.stack([TWO_PI * s2, -TWO_PI * s1], axis=1)


def velocity_eval(coeffs, cfg: FlowConfig, t: float, x) -> np.ndarray:
    """Velocity of the mode-sum streamfunction at one point; divergence-free
    by construction (w = (-d2 psi, d1 psi))."""
    x = np.asarray(x, dtype=np.float64).reshape(1, 2)
    psi = real_to_coeffs(coeffs).reshape(1, -1)
    if psi.shape[1] != cfg.k_count:
        raise ValueError(f"expected {cfg.k_count} complex coefficients")
    return _velocity(psi, cfg, float(t), x)[0]


def _integrate(psi: np.ndarray, cfg: FlowConfig) -> np.ndarray:
    """Classical RK4 for a batch of particles, modulo-1 wrap each step;
    returns recorded positions (B x n_records x 2)."""
    b = psi.shape[0]
    x = np.tile(np.asarray(cfg.x0), (b, 1))
    dt = cfg.dt
    records = np.empty((b, cfg.n_records, 2))
    rec = 0
    for step in range(1, cfg.steps + 1):
        t0 = (step - 1) * dt
        ka = _velocity(psi, cfg, t0, x)
        kb = _velocity(psi, cfg, t0 + 0.5 * dt, x + 0.5 * dt * ka)
        kc = _velocity(psi, cfg, t0 + 0.5 * dt, x + 0.5 * dt * kb)
        kd = _velocity(psi, cfg, t0 + dt, x + dt * kc)
        x = (x + (dt / 6.0) * (ka + 2.0 * kb + 2.0 * kc + kd)) % 1.0
        if not np.all(np.isfinite(x)):
            raise ValueError(f"non-finite trajectory state at step {step}")
        if step % cfg.record_stride == 0:
            records[:, rec, :] = x
            rec += 1
    return records


def lagrangian_pair(cfg: FlowConfig, rng: SeededRng):
    """One draw: (interleaved coefficient vector of length 2K, trajectory
    matrix n_records x 2)."""
    psi = draw_flow_coeffs(cfg, rng)
    traj = _integrate(psi[None, :], cfg)[0]
    return coeffs_to_real(psi), traj


def lagrangian_dataset(cfg: FlowConfig, n: int, rng: SeededRng) -> PairedDataset:
    """n independent flows: u rows are coefficient vectors, v rows are
    trajectories flattened t-major. Sample i draws from rng.split(i), so
    each row reproduces lagrangian_pair on that stream bit for bit."""
    if n < 1:
        raise ValueError("need at least one sample")
    psi = np.stack([draw_flow_coeffs(cfg, rng.split(i)) for i in range(n)])
    traj = _integrate(psi, cfg)
    u = np.stack([coeffs_to_real(p) for p in psi])
    v = traj.reshape(n, -1)
    meta = {
        "generator": "lagrangian",
        "n": n,
        "rng": rng.describe(),
        "m": cfg.m,
        "omega": list(cfg.omega),
        "x0": list(cfg.x0),
        "dt": cfg.dt,
        "t_final": cfg.t_final,
        "record_stride": cfg.record_stride,
    }
    return PairedDataset(u=u, v=v, meta=meta)


_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path, expected_magic: int) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: missing magic")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise BadMagic(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise TruncatedFile(f"{path}: truncated dimension header")
    dims = [int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    count = int(np.prod(dims)) if dims else 0
    if len(raw) < header_end + count:
        raise TruncatedFile(f"{path}: payload holds {len(raw) - header_end} bytes, dims imply {count}")
    return np.frombuffer(raw[header_end : header_end + count], dtype=np.uint8).reshape(dims)


def mnist_load(images_path, labels_path):
    """Parse the IDX pair: images scaled to [0,1] and flattened to rows,
    labels as a matching integer vector."""
    images = _read_idx(images_path, _IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, _IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return flat, labels.astype(np.int64)


def save_dataset(ds: PairedDataset, dir_path):
    """Directory layout: meta.json + headerless u.csv / v.csv."""
    os.makedirs(dir_path, exist_ok=True)
    with open(os.path.join(dir_path, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(ds.meta, fh, sort_keys=True)
    np.savetxt(os.path.join(dir_path, "u.csv"), ds.u, fmt="%.17g", delimiter=",")
    np.savetxt(os.path.join(dir_path, "v.csv"), ds.v, fmt="%.17g", delimiter=",")


def load_dataset(dir_path) -> PairedDataset:
    with open(os.path.join(dir_path, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    u = np.loadtxt(os.path.join(dir_path, "u.csv"), delimiter=",", ndmin=2)
    v = np.loadtxt(os.path.join(dir_path, "v.csv"), delimiter=",", ndmin=2)
    return PairedDataset(u=u, v=v, meta=meta)

"""Diffusion signal physics and synthetic multi-tensor phantoms.

Signals follow the Stejskal-Tanner attenuation per compartment; the ADC
transform inverts it per gradient direction using the mean b0 image as S0.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .geometry import fibonacci_directions
from .shbasis import N_COEFFS, sh_design_matrix
from .volume import DataError, Volume4D

log = logging.getLogger(__name__)

B0_THRESHOLD = 50.0
ADC_MAX = 4e-3


@dataclass
class GradientTable:
    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        self.bvals = np.asarray(self.bvals, dtype=float).reshape(-1)
        self.bvecs = np.asarray(self.bvecs, dtype=float).reshape(-1, 3)
        if len(self.bvals) != len(self.bvecs):
            raise DataError(f"{len(self.bvals)} b-values but {len(self.bvecs)} gradient directions")

    def __len__(self) -> int:
        return len(self.bvals)

    @property
    def b0_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bvals < B0_THRESHOLD)

    @property
    def dwi_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bvals >= B0_THRESHOLD)

    def dwi_subset(self) -> "GradientTable":
        idx = self.dwi_indices
        return GradientTable(self.bvals[idx], self.bvecs[idx])

    def check_single_shell(self) -> float:
        """Validate one b0 or more plus a single shell; return the shell b-value."""
        if len(self.b0_indices) == 0:
            raise DataError("gradient table has no b0 volume (b < 50 s/mm^2)")
        b = self.bvals[self.dwi_indices]
        if len(b) == 0:
            raise DataError("gradient table has no diffusion-weighted volumes")
        nominal = float(np.median(b))
        if np.any(np.abs(b - nominal) > 0.01 * nominal):
            raise DataError(f"multi-shell table: b-values {sorted(set(b.tolist()))} "
                            f"are not within 1% of {nominal:g}")
        return nominal


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (16, 16, 16)
    shell_b: float = 1000.0
    n_dirs: int = 30
    snr: float = 30.0
    seed: int = 0
    d_axial: float = 1.7e-3
    d_radial: float = 0.2e-3
    d_fw: float = 3.0e-3
    crossing_fraction: float = 0.3
    s0: float = 1000.0
    noise: bool = True
    fwf_max: float = 0.6

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 3:
            raise ValueError(f"phantom dims must be three extents >= 3, got {self.dims}")
        if not self.snr > 0:
            raise ValueError("snr must be > 0")
        for name in ("d_axial", "d_radial", "d_fw"):
            v = getattr(self, name)
            if not 0.0 < v < ADC_MAX:
                raise ValueError(f"{name}={v} outside (0, 4e-3) mm^2/s")
        if not 0.0 <= self.crossing_fraction <= 1.0:
            raise ValueError("crossing_fraction must lie in [0, 1]")
        if not 0.0 <= self.fwf_max <= 1.0:
            raise ValueError("fwf_max must lie in [0, 1]")
        if self.n_dirs < 6:
            raise ValueError(f"n_dirs={self.n_dirs} < 6; too few directions")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown phantom config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d


@dataclass
class GroundTruth:
    fwf: Volume4D
    fod: Volume4D
    mask: Volume4D


@dataclass
class Phantom:
    dwi: Volume4D
    table: GradientTable
    truth: GroundTruth
    spec: PhantomSpec = field(default_factory=PhantomSpec)
    # per-voxel fiber axes (H,W,D,2,3) and volume fractions (H,W,D,2); in memory only
    fibers: dict | None = None


def tensor_attenuation(bvals, bvecs, axis, d_axial, d_radial) -> np.ndarray:
    """exp(-b g^T D g) for an axially symmetric tensor along ``axis``."""
    cos2 = (np.asarray(bvecs) @ np.asarray(axis)) ** 2
    return np.exp(-np.asarray(bvals) * (d_radial + (d_axial - d_radial) * cos2))


def multi_tensor_signal(bvals, bvecs, f_fw, axes, fractions, *, s0=1.0,
                        d_axial=1.7e-3, d_radial=0.2e-3, d_fw=3.0e-3) -> np.ndarray:
    """Noiseless free-water + multi-fiber signal for one voxel."""
    bvals = np.asarray(bvals, dtype=float)
    s = f_fw * np.exp(-bvals * d_fw)
    for mu, f in zip(axes, fractions):
        s = s + f * tensor_attenuation(bvals, bvecs, mu, d_axial, d_radial)
    return s0 * s


def add_rician_noise(signal, sigma: float, rng: np.random.Generator) -> np.ndarray:
    signal = np.asarray(signal, dtype=float)
    e1 = rng.normal(0.0, sigma, size=signal.shape)
    e2 = rng.normal(0.0, sigma, size=signal.shape)
    return np.sqrt((signal + e1) ** 2 + e2 ** 2)


def fod_coefficients(axes, fractions) -> np.ndarray:
    """Band-limited sum of weighted deltas; zero when there is no fiber."""
    fractions = np.asarray(fractions, dtype=float)
    total = fractions.sum() if len(fractions) else 0.0
    if total <= 0:
        return np.zeros(N_COEFFS)
    return (fractions / total) @ sh_design_matrix(np.asarray(axes, dtype=float))


def _unit(theta, phi):
    return np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], -1)


def synthesize_phantom(spec: PhantomSpec) -> Phantom:
    """Multi-tensor phantom with smooth orientation and free-water fields.

    Fields are smooth across the grid so a 3x3x3 neighborhood carries
    spatial context. Random quantities attached to a voxel (crossing draw,
    fiber split, noise) come from a generator seeded by ``(seed, voxel)``.
    """
    H, W, D = spec.dims
    bvals = np.concatenate([[0.0], np.full(spec.n_dirs, float(spec.shell_b))])
    bvecs = np.vstack([np.zeros((1, 3)), fibonacci_directions(spec.n_dirs)])
    table = GradientTable(bvals, bvecs)

    glob = np.random.default_rng([spec.seed, 0])
    az_off = glob.uniform(0.0, np.pi, size=8)
    pol_off = glob.uniform(-0.3, 0.3, size=8)
    phases = glob.uniform(0.0, 2 * np.pi, size=3)
    freqs = glob.uniform(0.6, 1.2, size=3)

    i, j, k = np.meshgrid(np.arange(H), np.arange(W), np.arange(D), indexing="ij")
    u, v, w = i / max(H - 1, 1), j / max(W - 1, 1), k / max(D - 1, 1)
    region = (i >= H / 2) * 4 + (j >= W / 2) * 2 + (k >= D / 2)

    waves = (np.sin(2 * np.pi * freqs[0] * u + phases[0])
             + np.sin(2 * np.pi * freqs[1] * v + phases[1])
             + np.sin(2 * np.pi * freqs[2] * w + phases[2])) / 3.0
    f_fw = spec.fwf_max * (0.5 + 0.5 * waves)

    phi1 = np.pi * u + az_off[region]
    theta1 = np.pi / 2 * (0.3 + 0.6 * w) + pol_off[region]
    mu1 = _unit(theta1, phi1)
    phi2 = phi1 + np.pi / 2
    theta2 = np.pi / 2 - 0.5 * (v - 0.5)
    mu2 = _unit(theta2, phi2)

    n_vox = H * W * D
    M = len(bvals)
    cross = np.zeros(n_vox, dtype=bool)
    split = np.ones(n_vox)
    eps = np.zeros((n_vox, 2, M))
    sigma = spec.s0 / spec.snr
    for idx in range(n_vox):
        rng = np.random.default_rng([spec.seed, 1, idx])
        cross[idx] = rng.random() < spec.crossing_fraction
        a = rng.uniform(0.5, 0.7)
        if cross[idx]:
            split[idx] = a
        if spec.noise:
            eps[idx] = rng.normal(0.0, sigma, size=(2, M))
    cross = cross.reshape(H, W, D)
    split = split.reshape(H, W, D)

    f1 = (1.0 - f_fw) * split
    f2 = (1.0 - f_fw) * (1.0 - split)  # zero where not crossing
    mu_flat = np.stack([mu1, mu2], axis=3)  # (H,W,D,2,3)

    cos2 = np.einsum("xyzkc,mc->xyzkm", mu_flat, bvecs) ** 2
    diff = spec.d_radial + (spec.d_axial - spec.d_radial) * cos2
    fib = np.exp(-bvals * diff)  # (H,W,D,2,M)
    sig = (f_fw[..., None] * np.exp(-bvals * spec.d_fw)
           + f1[..., None] * fib[..., 0, :] + f2[..., None] * fib[..., 1, :])
    sig = spec.s0 * sig
    if spec.noise:
        e = eps.reshape(H, W, D, 2, M)
        sig = np.sqrt((sig + e[..., 0, :]) ** 2 + e[..., 1, :] ** 2)

    Y1 = sh_design_matrix(mu1.reshape(-1, 3)).reshape(H, W, D, N_COEFFS)
    Y2 = sh_design_matrix(mu2.reshape(-1, 3)).reshape(H, W, D, N_COEFFS)
    ftot = f1 + f2
    with np.errstate(invalid="ignore", divide="ignore"):
        w1 = np.where(ftot > 0, f1 / np.where(ftot > 0, ftot, 1.0), 0.0)
        w2 = np.where(ftot > 0, f2 / np.where(ftot > 0, ftot, 1.0), 0.0)
    fod = w1[..., None] * Y1 + w2[..., None] * Y2
    mask = (ftot > 0).astype(float)

    meta = {"source": "synthetic", "seed": spec.seed}
    truth = GroundTruth(
        fwf=Volume4D(f_fw[..., None], {"quantity": "free_water_fraction"}),
        fod=Volume4D(fod, {"quantity": "fod_sh", "lmax": 8}),
        mask=Volume4D(mask[..., None], {"quantity": "mask"}),
    )
    fibers = {"axes": mu_flat, "fractions": np.stack([f1, f2], axis=-1)}
    return Phantom(Volume4D(sig, meta), table, truth, spec, fibers)


def adc_transform(dwi: Volume4D, table: GradientTable, mask=None, *, clamp: bool = True,
                  return_valid: bool = False):
    """Per-direction ADC, -ln(S_i / S0) / b_i, with S0 the mean b0 signal.

    Voxels where S0 or any S_i is non-positive are flagged, zeroed and
    counted in ``meta["n_masked_out"]``.
    """
    if dwi.channels != len(table):
        raise DataError(f"volume has {dwi.channels} channels, table has {len(table)} entries")
    b0 = table.b0_indices
    if len(b0) == 0:
        raise DataError("ADC transform needs at least one b0 channel")
    dw = table.dwi_indices
    data = np.asarray(dwi.data, dtype=float)
    s0 = data[..., b0].mean(axis=-1)
    s = data[..., dw]
    inside = np.ones(s0.shape, bool) if mask is None else np.asarray(mask).reshape(s0.shape) > 0
    valid = (s0 > 0) & np.all(s > 0, axis=-1)
    bad = inside & ~valid
    n_bad = int(bad.sum())
    if n_bad:
        log.warning("ADC transform: %d voxel(s) with non-positive signal masked out", n_bad)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = s / np.where(valid, s0, 1.0)[..., None]
        adc = -np.log(np.where(valid[..., None], ratio, 1.0)) / table.bvals[dw]
    if clamp:
        adc = np.clip(adc, 0.0, ADC_MAX)
    adc[~valid] = 0.0
    meta = dict(dwi.meta)
    meta.update({"quantity": "adc", "units": "mm^2/s", "n_masked_out": n_bad})
    out = Volume4D(adc, meta)
    if return_valid:
        return out, valid & inside
    return out


def signal_from_adc(adc, s0, bvals) -> np.ndarray:
    """Forward Stejskal-Tanner: S0 * exp(-b * ADC)."""
    return np.asarray(s0)[..., None] * np.exp(-np.asarray(bvals) * np.asarray(adc))


__all__ = [
    "GradientTable", "PhantomSpec", "GroundTruth", "Phantom", "multi_tensor_signal",
    "add_rician_noise", "fod_coefficients", "synthesize_phantom", "adc_transform",
    "signal_from_adc", "tensor_attenuation", "B0_THRESHOLD", "ADC_MAX",
]

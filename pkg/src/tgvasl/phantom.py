"""Procedural brain phantom, pathology cases and pCASL acquisition simulation.

The geometry is a set of ellipsoids in millimetres (GM shell around a WM
core, two deep GM nuclei, a frontal WM lesion and a lesion in the anterior
part of one nucleus), rasterized at three times the target resolution and
block-averaged onto the target grid so boundary voxels carry mixed values.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import AcquisitionProtocol, ParameterMaps, asl_signal_series, cbf_to_internal

BACKGROUND, GM, WM, PATHOLOGY = 0, 1, 2, 3

# (cbf ml/100g/min, att s, m0)
TISSUE = {GM: (65.0, 0.8, 85.0), WM: (20.0, 1.5, 70.0)}

# field of view of the full-size phantom: 72x60x60 voxels of 3 mm
FOV_MM = (216.0, 180.0, 180.0)

CASES = ("C1", "C2", "C3")


def paper_protocol(m0=1.0, t1=1.33) -> AcquisitionProtocol:
    """Sixteen delays: t = 1050:250:4800 ms, tau = 1050, 1300, 1550, 1800, ..., 1800 ms."""
    t = np.arange(1050, 4801, 250) / 1000.0
    tau = np.minimum(np.arange(1050, 1050 + 250 * 16, 250), 1800) / 1000.0
    return AcquisitionProtocol(t, tau, np.asarray(m0, dtype=float), alpha=0.85, lam=0.9,
                               t1=t1, t1b=1.65)


@dataclass
class PhantomSpec:
    grid: tuple = (72, 60, 60)
    case: str = "C1"
    noise_sigma: float | None = None   # None: derived from target_tsnr
    target_tsnr: float = 5.0
    seed: int = 0
    repetitions: int = 2
    average: bool = False
    magnitude: bool = True
    upsample: int = 3
    pathology_cbf_factor: float = 2.0
    pathology_att: float = 0.5
    t1: float = 1.33

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise ValueError("grid must be three positive integers")
        if self.case not in CASES:
            raise ValueError(f"case must be one of {CASES}")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.repetitions < 1 or self.upsample < 1:
            raise ValueError("repetitions and upsample must be >= 1")


@dataclass
class GroundTruth:
    maps: ParameterMaps
    m0: np.ndarray
    t1: np.ndarray
    tissue_labels: np.ndarray
    fractions: dict = field(default_factory=dict)

    @property
    def cbf_external(self):
        return self.maps.cbf_external

    @property
    def att(self):
        return self.maps.att

    def protocol(self, base: AcquisitionProtocol | None = None) -> AcquisitionProtocol:
        base = base or paper_protocol()
        return AcquisitionProtocol(base.t, base.tau, self.m0, base.alpha, base.lam,
                                   self.t1, base.t1b)


def _ellipsoid(x, y, z, center, axes):
    return (((x - center[0]) / axes[0]) ** 2 + ((y - center[1]) / axes[1]) ** 2
            + ((z - center[2]) / axes[2]) ** 2) <= 1.0


def _coords(shape):
    """Voxel-centre coordinates in mm for a grid spanning the phantom FOV."""
    axes = [(np.arange(n) + 0.5) / n * fov - fov / 2 for n, fov in zip(shape, FOV_MM)]
    return np.meshgrid(*axes, indexing="ij", sparse=True)


def _labels_highres(shape):
    x, y, z = _coords(shape)
    brain = _ellipsoid(x, y, z, (0, 0, 0), (85, 70, 65))
    wm = _ellipsoid(x, y, z, (0, 0, 0), (72, 57, 52))
    nuclei = (_ellipsoid(x, y, z, (5, -24, -5), (17, 8, 12))
              | _ellipsoid(x, y, z, (5, 24, -5), (17, 8, 12)))
    labels = np.zeros(np.broadcast_shapes(x.shape, y.shape, z.shape), dtype=np.uint8)
    labels[brain] = GM
    labels[wm] = WM
    labels[nuclei & wm] = GM
    lesion_wm = _ellipsoid(x, y, z, (45, -20, 10), (12, 10, 10)) & wm & ~nuclei
    lesion_gm = nuclei & _ellipsoid(x, y, z, (16, -24, -5), (10, 12, 14))
    return labels, lesion_wm | lesion_gm


def _block_mean(a, b):
    s = a.shape
    return a.reshape(s[0] // b, b, s[1] // b, b, s[2] // b, b).mean(axis=(1, 3, 5))


def generate_ground_truth(spec: PhantomSpec) -> GroundTruth:
    """Rasterize the phantom and downsample it onto ``spec.grid``."""
    b = spec.upsample
    hi_shape = tuple(g * b for g in spec.grid)
    labels, lesion = _labels_highres(hi_shape)

    cbf = np.zeros(hi_shape)
    att = np.zeros(hi_shape)
    m0 = np.zeros(hi_shape)
    for tissue, (f, delta, pd) in TISSUE.items():
        sel = labels == tissue
        cbf[sel], att[sel], m0[sel] = f, delta, pd
    if spec.case in ("C2", "C3"):
        cbf[lesion] *= spec.pathology_cbf_factor
    if spec.case == "C3":
        att[lesion] = spec.pathology_att

    tissue = (labels != BACKGROUND).astype(np.float64)
    frac = {GM: _block_mean((labels == GM).astype(np.float64), b),
            WM: _block_mean((labels == WM).astype(np.float64), b),
            PATHOLOGY: _block_mean(lesion.astype(np.float64), b)}
    frac[BACKGROUND] = 1.0 - frac[GM] - frac[WM]
    tfrac = _block_mean(tissue, b)
    att_lr = np.divide(_block_mean(att * tissue, b), tfrac, out=np.zeros(spec.grid),
                       where=tfrac > 0)

    lab = np.argmax(np.stack([frac[BACKGROUND], frac[GM], frac[WM]]), axis=0).astype(np.uint8)
    lab[(frac[PATHOLOGY] >= 0.5) & (lab != BACKGROUND)] = PATHOLOGY
    maps = ParameterMaps(cbf_to_internal(_block_mean(cbf, b)), att_lr)
    return GroundTruth(maps, _block_mean(m0, b), np.full(spec.grid, spec.t1), lab, frac)


def masks_from_reference(cbf_external, labels) -> dict:
    """Evaluation masks: WM where reference CBF is in [15, 30], GM in [55, 65].

    Pathology voxels are excluded from both so the three regions are disjoint.
    """
    cbf = np.asarray(cbf_external, dtype=np.float64)
    path = np.asarray(labels) == PATHOLOGY
    tol = 1e-9
    return {
        "GM": (cbf >= 55 - tol) & (cbf <= 65 + tol) & ~path,
        "WM": (cbf >= 15 - tol) & (cbf <= 30 + tol) & ~path,
        "pathology": path,
    }


def region_masks(gt: GroundTruth) -> dict:
    return masks_from_reference(gt.cbf_external, gt.tissue_labels)


def brain_mask(gt: GroundTruth) -> np.ndarray:
    return gt.tissue_labels != BACKGROUND


def noise_sigma_for_tsnr(gt: GroundTruth, proto: AcquisitionProtocol, tsnr: float) -> float:
    """Per-channel noise std giving the requested GM temporal SNR of single PWIs.

    The PWI noise std is taken as sqrt(2) * sigma (difference of two
    high-SNR magnitude images).
    """
    clean = asl_signal_series(gt.maps, gt.protocol(proto))
    gm = region_masks(gt)["GM"]
    if not gm.any():
        raise ValueError("the grid is too coarse to contain pure-GM voxels; set noise_sigma")
    return float(clean.mean(axis=0)[gm].mean() / (tsnr * np.sqrt(2.0)))


@dataclass
class Acquisition:
    pwi: np.ndarray
    clean: np.ndarray
    control: np.ndarray
    label: np.ndarray
    protocol: AcquisitionProtocol
    noise_sigma: float


def simulate_acquisition(gt: GroundTruth, proto: AcquisitionProtocol, noise_sigma: float,
                         seed: int = 0, repetitions: int = 2, average: bool = False,
                         magnitude: bool = True) -> Acquisition:
    """Noisy control/label pairs and the PWI series fed to fitting.

    ``proto`` describes one series of delays; it is repeated ``repetitions``
    times. With ``average`` the repetitions are averaged per delay. With
    ``magnitude=False`` the real parts replace magnitudes.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    proto1 = gt.protocol(proto)
    clean1 = asl_signal_series(gt.maps, proto1)
    control1 = (1.0 - proto1.lam) * gt.m0
    clean = np.concatenate([clean1] * repetitions)
    control = np.broadcast_to(control1, clean.shape).astype(np.complex128)
    label = control - clean
    rng = np.random.Generator(np.random.Philox(seed))
    shape = (2,) + clean.shape
    if noise_sigma > 0:
        noise = rng.normal(0.0, noise_sigma, shape + (2,))
        control = control + (noise[0, ..., 0] + 1j * noise[0, ..., 1])
        label = label + (noise[1, ..., 0] + 1j * noise[1, ..., 1])
    part = np.abs if magnitude else np.real
    c, l = part(control), part(label)
    # magnitudes of the noiseless positive reals are exact; skip the rounding of c - l
    pwi = c - l if noise_sigma > 0 else clean.copy()
    out_proto = proto1.repeated(repetitions)
    if average and repetitions > 1:
        n = proto1.n_frames
        pwi = pwi.reshape(repetitions, n, *pwi.shape[1:]).mean(axis=0)
        clean = clean1
        out_proto = proto1
    return Acquisition(pwi, clean, c, l, out_proto, float(noise_sigma))


def make_phantom(spec: PhantomSpec, proto: AcquisitionProtocol | None = None):
    """Ground truth plus simulated acquisition for a spec."""
    proto = proto or paper_protocol()
    gt = generate_ground_truth(spec)
    sigma = spec.noise_sigma
    if sigma is None:
        sigma = noise_sigma_for_tsnr(gt, proto, spec.target_tsnr)
    acq = simulate_acquisition(gt, proto, sigma, spec.seed, spec.repetitions, spec.average,
                               spec.magnitude)
    return gt, acq

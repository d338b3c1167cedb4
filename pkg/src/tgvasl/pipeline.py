"""End-to-end steps shared by the command line and the test-suite.

Data handed to fitting always passes through the storage representation
(float32 volumes, protocol sidecar in ms) whether or not it touches disk,
so an in-memory run and a write/read/fit run see identical inputs.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import io as vio
from .baselines import nlls_fit_volume
from .config import RunConfig
from .evaluation import aggregate_replicas, difference_maps, map_report, replica_report
from .model import CBF_TO_EXTERNAL, CBF_TO_INTERNAL, AcquisitionProtocol, ParameterMaps
from .phantom import (FOV_MM, GroundTruth, generate_ground_truth, masks_from_reference,
                      noise_sigma_for_tsnr, region_masks, simulate_acquisition)
from .solver import SolverStateError, StepFailure, irgn_fit, snr_scale

log = logging.getLogger(__name__)

METHODS = ("tgv", "nlls")

UNITS = {
    "external": {"cbf": "ml/100g/min", "att": "s"},
    "internal": {"cbf": "ml/g/s", "att": "s"},
    "cbf_internal_to_external": CBF_TO_EXTERNAL,
}


def voxel_size(grid):
    return tuple(f / n for f, n in zip(FOV_MM, grid))


@dataclass
class PhantomData:
    """A simulated dataset in its storage representation."""

    gt: GroundTruth
    pwi: np.ndarray
    m0: np.ndarray
    sidecar: dict
    noise_sigma: float
    control: np.ndarray | None = None
    label: np.ndarray | None = None

    @property
    def protocol(self):
        return vio.protocol_from_sidecar(self.sidecar, self.m0)

    @property
    def reference(self) -> ParameterMaps:
        return self.gt.maps


def simulate(cfg: RunConfig, case=None, seed=None, sigma=None, gt=None) -> PhantomData:
    """Ground truth plus one noise realization, quantized to float32."""
    spec = cfg.phantom
    spec = replace(spec, case=case or spec.case,
                   seed=spec.seed if seed is None else int(seed),
                   noise_sigma=spec.noise_sigma if sigma is None else float(sigma))
    if gt is None:
        gt = generate_ground_truth(spec)
    proto = cfg.protocol(t1=spec.t1)
    noise = spec.noise_sigma
    if noise is None:
        noise = noise_sigma_for_tsnr(gt, proto, spec.target_tsnr)
    acq = simulate_acquisition(gt, proto, noise, spec.seed, spec.repetitions, spec.average,
                               spec.magnitude)
    # the phantom's T1 map is uniform, so the sidecar carries it as a scalar
    p = acq.protocol
    side = vio.protocol_to_sidecar(AcquisitionProtocol(p.t, p.tau, np.ones(()), p.alpha, p.lam,
                                                       spec.t1, p.t1b), m0_file="m0.nii")
    return PhantomData(gt, vio.storage_roundtrip(acq.pwi), vio.storage_roundtrip(gt.m0), side,
                       noise, acq.control, acq.label)


def write_phantom(out_dir, data: PhantomData, raw=False) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vs = voxel_size(data.m0.shape)
    paths = {
        "pwi": vio.write_volume(out / "pwi.nii", data.pwi, vs, "perfusion-weighted series"),
        "m0": vio.write_volume(out / "m0.nii", data.m0, vs, "m0"),
        "gt_cbf": vio.write_volume(out / "gt_cbf.nii", data.gt.cbf_external, vs, "CBF ml/100g/min"),
        "gt_att": vio.write_volume(out / "gt_att.nii", data.gt.att, vs, "ATT s"),
        "labels": vio.write_volume(out / "labels.nii", data.gt.tissue_labels, vs,
                                   "0 bg 1 GM 2 WM 3 pathology"),
    }
    vio.write_sidecar(vio.sidecar_path(paths["pwi"]), data.sidecar)
    if raw and data.control is not None:
        paths["control"] = vio.write_volume(out / "control.nii", data.control, vs, "|control|")
        paths["label"] = vio.write_volume(out / "label.nii", data.label, vs, "|label|")
    return {k: str(v) for k, v in paths.items()}


def fit(d, proto, method: str, cfg: RunConfig, callback=None):
    """Fit maps with ``method``; returns ``(maps, info)``."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    t0 = time.perf_counter()
    info = {"method": method}
    if method == "tgv":
        history = []
        maps = irgn_fit(d, proto, cfg.solver, history=history, callback=callback)
        info["gn_steps"] = [{k: v for k, v in h.items() if k not in ("scaling",)}
                            for h in history]
        info["iterations"] = int(sum(h.get("iterations", 0) for h in history))
        info["objective_trace"] = [h["objective"] for h in history]
        if cfg.solver.snr_scaling:
            info["snr_estimate"] = snr_scale(d, snr_max=cfg.solver.snr_max)
    else:
        res = nlls_fit_volume(d, proto, cfg.baseline)
        maps = res.maps
        maps.flags["qa"] = res.qa
        maps.flags["residual"] = res.residual
        info["qa_counts"] = {str(int(v)): int(c) for v, c in zip(*np.unique(res.qa, return_counts=True))}
    info["wall_time_s"] = time.perf_counter() - t0
    return maps, info


def write_fit(out_dir, maps: ParameterMaps, info: dict, cfg: RunConfig, input_path=None,
              vs=(1.0, 1.0, 1.0)) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"cbf": vio.write_volume(out / "cbf.nii", maps.cbf_external, vs, "CBF ml/100g/min"),
             "att": vio.write_volume(out / "att.nii", maps.att, vs, "ATT s")}
    if "qa" in maps.flags:
        paths["qa"] = vio.write_volume(out / "qa.nii", maps.flags["qa"], vs,
                                       "1 zero-flow 2 bound 4 non-identifiable")
    brain = maps.cbf > 0
    manifest = {
        "input": None if input_path is None else str(input_path),
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "units": UNITS,
        "summary": {
            "cbf_median_in_fit_support_external": _median(maps.cbf_external[brain]),
            "cbf_median_in_fit_support_internal": _median(maps.cbf[brain]),
            "att_median_in_fit_support": _median(maps.att[brain]),
        },
        **info,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_jsonable) + "\n")
    if "gn_steps" in info:
        with open(out / "convergence.csv", "w") as fh:
            fh.write("gn_step,gamma,delta,inner_iterations,objective\n")
            for h in info["gn_steps"]:
                fh.write(f"{h['step']},{h['gamma']!r},{h.get('delta', '')!r},"
                         f"{h.get('iterations', 0)},{h['objective']!r}\n")
    paths["manifest"] = out / "manifest.json"
    return {k: str(v) for k, v in paths.items()}


def _median(a):
    return float(np.median(a)) if a.size else None


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def load_reference(ref_dir):
    """Ground-truth maps and evaluation masks from a phantom output directory."""
    ref_dir = Path(ref_dir)
    cbf = vio.read_volume(ref_dir / "gt_cbf.nii")
    att = vio.read_volume(ref_dir / "gt_att.nii")
    labels = vio.read_volume(ref_dir / "labels.nii").astype(np.int64)
    ref = ParameterMaps(cbf * CBF_TO_INTERNAL, att)
    return ref, masks_from_reference(cbf, labels)


def load_maps(maps_dir) -> ParameterMaps:
    maps_dir = Path(maps_dir)
    return ParameterMaps(vio.read_volume(maps_dir / "cbf.nii") * CBF_TO_INTERNAL,
                         vio.read_volume(maps_dir / "att.nii"))


def evaluate(maps, reference, masks, label=""):
    return map_report(maps, reference, masks, label), difference_maps(maps, reference)


# ---------------------------------------------------------------------------
# pseudo-replica study


def _replica_job(args):
    cfg, case, seed, method, gt, out_dir = args
    try:
        data = simulate(cfg, case=case, seed=seed, gt=gt)
        maps, info = fit(data.pwi, data.protocol, method, cfg)
    except (StepFailure, SolverStateError) as exc:
        return seed, None, f"{type(exc).__name__}: {exc}"
    if out_dir is not None:
        write_fit(Path(out_dir) / f"seed_{seed:06d}", maps, info, cfg,
                  vs=voxel_size(maps.grid))
    return seed, maps, None


def run_replica(cfg: RunConfig, method: str, case=None, n=None, seed_base=None, jobs=None,
                out_dir=None, progress=None):
    """Fit ``n`` independent noise realizations and aggregate them.

    Returns ``(summary, report, gt)``. Failed fits are excluded and listed in
    ``summary.failed``.
    """
    rc = cfg.replica
    n = rc.n_realizations if n is None else int(n)
    if n < 2:
        raise ValueError("a replica study needs at least 2 realizations")
    seed_base = rc.seed_base if seed_base is None else int(seed_base)
    jobs = rc.jobs if jobs is None else int(jobs)
    case = case or cfg.phantom.case
    gt = generate_ground_truth(replace(cfg.phantom, case=case))
    tasks = [(cfg, case, seed_base + i, method, gt, out_dir) for i in range(n)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_replica_job, tasks))
    else:
        results = []
        for t in tasks:
            results.append(_replica_job(t))
            if progress is not None:
                progress(len(results), n)
    results.sort(key=lambda r: r[0])
    ok = [m for _, m, err in results if err is None]
    failed = [{"seed": s, "error": err} for s, _, err in results if err is not None]
    summary = aggregate_replicas(ok, failed)
    report = replica_report(summary, gt.maps, region_masks(gt), label=f"{method}-{case}")
    return summary, report, gt

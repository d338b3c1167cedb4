"""Region statistics, relative differences and pseudo-replica aggregation."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import ParameterMaps

REGIONS = ("GM", "WM", "pathology")
CSV_FIELDS = ("label", "region", "quantity", "count", "median", "q25", "q75", "iqr", "rel_bias")


def relative_difference(est, ref) -> np.ndarray:
    """``(est - ref) / ref``; NaN where the reference is zero."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    return _ratio(est - ref, ref)


def _ratio(a, b):
    out = np.full(np.shape(b), np.nan)
    np.divide(a, b, out=out, where=np.asarray(b) != 0)
    return out


@dataclass
class RegionStats:
    region: str
    quantity: str
    count: int
    median: float
    q25: float
    q75: float
    rel_bias: float | None = None   # percent, median of the voxel-wise relative difference

    @property
    def iqr(self) -> float:
        return self.q75 - self.q25


def region_stats(values, region, quantity, reference=None) -> RegionStats:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return RegionStats(region, quantity, 0, float("nan"), float("nan"), float("nan"), None)
    q25, med, q75 = np.percentile(values, [25, 50, 75])
    bias = None
    if reference is not None:
        rd = relative_difference(values, reference)
        rd = rd[np.isfinite(rd)]
        bias = float(np.median(rd) * 100.0) if rd.size else None
    return RegionStats(region, quantity, int(values.size), float(med), float(q25), float(q75), bias)


@dataclass
class StatsReport:
    label: str
    rows: list = field(default_factory=list)

    def get(self, region, quantity) -> RegionStats:
        for row in self.rows:
            if row.region == region and row.quantity == quantity:
                return row
        raise KeyError((region, quantity))

    def to_dict(self) -> dict:
        return {"label": self.label,
                "rows": [dict(asdict(r), iqr=r.iqr) for r in self.rows]}

    @classmethod
    def from_dict(cls, doc) -> "StatsReport":
        rows = [RegionStats(r["region"], r["quantity"], int(r["count"]), r["median"], r["q25"],
                            r["q75"], r.get("rel_bias")) for r in doc["rows"]]
        return cls(doc["label"], rows)

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, path) -> "StatsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def csv_rows(self):
        for r in self.rows:
            yield {"label": self.label, "region": r.region, "quantity": r.quantity,
                   "count": r.count, "median": r.median, "q25": r.q25, "q75": r.q75,
                   "iqr": r.iqr, "rel_bias": "" if r.rel_bias is None else r.rel_bias}

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        write_csv(buf, self.csv_rows())
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def write_csv(fh, rows, fieldnames=CSV_FIELDS):
    w = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
    w.writeheader()
    for row in rows:
        # repr keeps floats round-trippable through the text form
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_report_csv(path) -> list:
    return parse_report_csv(Path(path).read_text())


def parse_report_csv(text) -> list:
    """Parse report CSV text back into one :class:`StatsReport` per label."""
    reports = {}
    for row in csv.DictReader(io.StringIO(text)):
        bias = row["rel_bias"]
        stats = RegionStats(row["region"], row["quantity"], int(row["count"]), float(row["median"]),
                            float(row["q25"]), float(row["q75"]), float(bias) if bias else None)
        reports.setdefault(row["label"], StatsReport(row["label"])).rows.append(stats)
    return list(reports.values())


def map_report(maps: ParameterMaps, reference: ParameterMaps, masks: dict, label="") -> StatsReport:
    """Per-region distribution of CBF (ml/100g/min) and ATT (s) with bias vs ``reference``."""
    rows = []
    for region in REGIONS:
        m = masks[region]
        rows.append(region_stats(maps.cbf_external[m], region, "cbf", reference.cbf_external[m]))
        rows.append(region_stats(maps.att[m], region, "att", reference.att[m]))
    return StatsReport(label, rows)


def difference_maps(maps: ParameterMaps, reference: ParameterMaps) -> dict:
    return {"cbf": relative_difference(maps.cbf, reference.cbf),
            "att": relative_difference(maps.att, reference.att)}


@dataclass
class ReplicaSummary:
    median: ParameterMaps
    iqr: ParameterMaps          # CBF in internal units, like every ParameterMaps
    n_ok: int
    failed: list = field(default_factory=list)

    def relative_iqr(self, reference: ParameterMaps) -> dict:
        """Voxel-wise IQR divided by the ground truth, in percent (NaN where it is 0)."""
        return {"cbf": _ratio(self.iqr.cbf, reference.cbf) * 100.0,
                "att": _ratio(self.iqr.att, reference.att) * 100.0}


def aggregate_replicas(maps_list, failed=()) -> ReplicaSummary:
    """Voxel-wise median and 25th-75th percentile range over realizations."""
    if len(maps_list) < 1:
        raise ValueError("no successful realizations to aggregate")
    cbf = np.stack([m.cbf for m in maps_list])
    att = np.stack([m.att for m in maps_list])
    qc = np.percentile(cbf, [25, 50, 75], axis=0)
    qa = np.percentile(att, [25, 50, 75], axis=0)
    return ReplicaSummary(ParameterMaps(qc[1], qa[1]),
                          ParameterMaps(qc[2] - qc[0], qa[2] - qa[0]),
                          len(maps_list), list(failed))


def replica_report(summary: ReplicaSummary, reference: ParameterMaps, masks: dict,
                   label="") -> StatsReport:
    """Median-map statistics plus the per-region distribution of relative IQR (%)."""
    rep = map_report(summary.median, reference, masks, label)
    rel = summary.relative_iqr(reference)
    for region in REGIONS:
        m = masks[region]
        for q in ("cbf", "att"):
            vals = rel[q][m]
            rep.rows.append(region_stats(vals[np.isfinite(vals)], region, f"{q}_rel_iqr"))
    return rep


def boxplot_table(reports) -> list:
    """Rows for box-plot rendering; quartiles copied from the reports."""
    rows = []
    for rep in reports:
        rows.extend(rep.csv_rows())
    return rows


def diffmap_table(volume, axis=2, index=None, name="") -> list:
    """One slice of a difference volume as (name, i, j, value) rows."""
    volume = np.asarray(volume, dtype=np.float64)
    if index is None:
        index = volume.shape[axis] // 2
    sl = np.take(volume, index, axis=axis)
    return [{"name": name, "row": i, "col": j, "value": repr(float(sl[i, j]))}
            for i in range(sl.shape[0]) for j in range(sl.shape[1])]

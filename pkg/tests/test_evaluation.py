import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgvasl.evaluation import (REGIONS, ReplicaSummary, StatsReport, aggregate_replicas,
                               boxplot_table, diffmap_table, difference_maps, map_report,
                               parse_report_csv, region_stats, relative_difference,
                               replica_report, write_csv)
from tgvasl.model import ParameterMaps


def _masks(grid):
    m = {r: np.zeros(grid, bool) for r in REGIONS}
    m["GM"][0] = True
    m["WM"][1] = True
    m["pathology"][2, 0, 0] = True
    return m


def test_relative_difference():
    rd = relative_difference([1.1, 2.0, 3.0], [1.0, 0.0, 4.0])
    assert rd[0] == pytest.approx(0.1) and np.isnan(rd[1]) and rd[2] == -0.25


def test_region_stats_numpy_percentiles():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(101)
    s = region_stats(x, "GM", "cbf", reference=np.ones(101))
    assert s.median == np.median(x)
    assert s.iqr == pytest.approx(np.subtract(*np.percentile(x, [75, 25])))
    assert s.rel_bias == pytest.approx(np.median(x - 1) * 100)
    empty = region_stats([], "GM", "cbf")
    assert empty.count == 0 and np.isnan(empty.median)


def test_map_report_units_and_bias():
    grid = (3, 2, 2)
    ref = ParameterMaps.from_external(np.full(grid, 50.0), np.full(grid, 1.0))
    est = ParameterMaps.from_external(np.full(grid, 55.0), np.full(grid, 0.9))
    rep = map_report(est, ref, _masks(grid), "x")
    gm = rep.get("GM", "cbf")
    assert gm.median == pytest.approx(55.0) and gm.rel_bias == pytest.approx(10.0)
    assert rep.get("WM", "att").rel_bias == pytest.approx(-10.0)
    assert rep.get("pathology", "cbf").count == 1
    with pytest.raises(KeyError):
        rep.get("CSF", "cbf")
    d = difference_maps(est, ref)
    np.testing.assert_allclose(d["cbf"], 0.1)


def test_report_serialization_roundtrip(tmp_path):
    grid = (3, 2, 2)
    rng = np.random.default_rng(1)
    ref = ParameterMaps.from_external(rng.uniform(10, 80, grid), rng.uniform(0.5, 2, grid))
    est = ParameterMaps.from_external(rng.uniform(10, 80, grid), rng.uniform(0.5, 2, grid))
    rep = map_report(est, ref, _masks(grid), "lab")
    rep.to_json(tmp_path / "r.json")
    back = StatsReport.from_json(tmp_path / "r.json")
    assert back == rep
    (parsed,) = parse_report_csv(rep.to_csv())
    assert parsed == rep      # repr-formatted floats survive exactly


def test_aggregate_replicas():
    grid = (2, 2, 1)
    maps = [ParameterMaps(np.full(grid, float(i)), np.full(grid, 2.0 * i)) for i in range(5)]
    s = aggregate_replicas(maps, failed=[{"seed": 9}])
    assert s.n_ok == 5 and s.failed == [{"seed": 9}]
    assert np.all(s.median.cbf == 2.0) and np.all(s.iqr.cbf == 2.0) and np.all(s.iqr.att == 4.0)
    ref = ParameterMaps(np.full(grid, 4.0), np.zeros(grid))
    rel = s.relative_iqr(ref)
    assert np.all(rel["cbf"] == 50.0) and np.all(np.isnan(rel["att"]))
    with pytest.raises(ValueError):
        aggregate_replicas([])


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2 ** 31))
def test_aggregate_matches_percentile_definition(n, seed):
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal((n, 2, 1, 1))
    s = aggregate_replicas([ParameterMaps(v, v) for v in vals])
    q = np.percentile(vals, [25, 50, 75], axis=0)
    assert np.array_equal(s.median.cbf, q[1]) and np.array_equal(s.iqr.att, q[2] - q[0])


def test_replica_report_rows():
    grid = (3, 2, 2)
    maps = [ParameterMaps.from_external(np.full(grid, 50.0 + i), np.full(grid, 1.0)) for i in range(4)]
    ref = ParameterMaps.from_external(np.full(grid, 50.0), np.full(grid, 1.0))
    rep = replica_report(aggregate_replicas(maps), ref, _masks(grid), "r")
    assert rep.get("GM", "cbf_rel_iqr").median == pytest.approx(1.5 / 50 * 100)
    assert rep.get("WM", "att_rel_iqr").median == 0.0


def test_tables():
    rep = StatsReport("a", [region_stats([1.0, 2.0], "GM", "cbf")])
    rows = boxplot_table([rep, rep])
    assert len(rows) == 2 and rows[0]["label"] == "a"
    vol = np.arange(24.0).reshape(2, 3, 4)
    cells = diffmap_table(vol, axis=2, index=1, name="d")
    assert len(cells) == 6 and cells[-1] == {"name": "d", "row": 1, "col": 2, "value": "21.0"}
    buf = io.StringIO()
    write_csv(buf, cells, fieldnames=("name", "row", "col", "value"))
    assert buf.getvalue().splitlines()[0] == "name,row,col,value"

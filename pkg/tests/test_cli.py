import json

import numpy as np
import pytest

from tgvasl import io as vio
from tgvasl.cli import EXIT_IO, EXIT_OK, EXIT_SOLVER, main

SMALL = {"phantom": {"grid": [24, 20, 20]},
         "solver": {"gn_steps": 2, "inner_iters_schedule": [30, 30]},
         "baseline": {"multistart": 0}}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(SMALL))
    assert main(["phantom", "--config", str(d / "cfg.json"), "--out-dir", str(d / "ph"),
                 "--case", "C3", "--seed", "3", "--raw"]) == EXIT_OK
    return d


def test_phantom_outputs(workdir):
    ph = workdir / "ph"
    for name in ("pwi", "m0", "gt_cbf", "gt_att", "labels", "control", "label"):
        assert (ph / f"{name}.nii").exists()
    info = json.loads((ph / "phantom.json").read_text())
    assert info["grid"] == [24, 20, 20] and info["n_frames"] == 32 and info["seed"] == 3
    d, proto, vs = vio.load_series(ph / "pwi.nii")
    assert d.shape == (32, 24, 20, 20) and vs == (9.0, 9.0, 9.0)


@pytest.mark.parametrize("method", ["tgv", "nlls"])
def test_fit_and_eval(workdir, method, capsys):
    out = workdir / f"fit_{method}"
    rc = main(["fit", str(workdir / "ph" / "pwi.nii"), "--config", str(workdir / "cfg.json"),
               "--method", method, "--out-dir", str(out)])
    assert rc == EXIT_OK
    man = json.loads((out / "manifest.json").read_text())
    assert man["method"] == method and len(man["config_sha256"]) == 64
    assert man["units"]["external"]["cbf"] == "ml/100g/min"
    cbf = vio.read_volume(out / "cbf.nii")
    assert cbf.shape == (24, 20, 20) and 0 <= cbf.min() and cbf.max() <= 300
    if method == "tgv":
        assert (out / "convergence.csv").read_text().startswith("gn_step,")
    else:
        assert (out / "qa.nii").exists()
    rc = main(["eval", "--maps", str(out), "--reference", str(workdir / "ph"),
               "--out-dir", str(workdir / f"ev_{method}"), "--label", method])
    assert rc == EXIT_OK
    stats = json.loads((workdir / f"ev_{method}" / "stats.json").read_text())
    assert stats["label"] == method and len(stats["rows"]) == 6
    assert "GM,cbf" in capsys.readouterr().out


def test_replica_and_plotdata(workdir):
    out = workdir / "rep"
    rc = main(["replica", "--config", str(workdir / "cfg.json"), "--method", "nlls", "--n", "2",
               "--case", "C1", "--out-dir", str(out), "--jobs", "1"])
    assert rc == EXIT_OK
    meta = json.loads((out / "replica.json").read_text())
    assert meta["n_ok"] == 2 and meta["failed"] == []
    assert (out / "rel_iqr_cbf.nii").exists()
    assert len(list((out / "realizations").iterdir())) == 2
    rc = main(["plotdata", str(out / "stats.json"), str(out / "stats.csv"),
               "--diff", str(workdir / "ev_nlls" / "reldiff_cbf.nii"),
               "--out-dir", str(workdir / "plot")])
    assert rc == EXIT_OK
    lines = (workdir / "plot" / "boxplot.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 12
    cells = (workdir / "plot" / "diffmap.csv").read_text().splitlines()
    assert len(cells) == 1 + 24 * 20


def test_missing_sidecar_exit_2(workdir, tmp_path, capsys):
    vio.write_volume(tmp_path / "pwi.nii", np.zeros((16, 2, 2, 2)))
    assert main(["fit", str(tmp_path / "pwi.nii"), "--out-dir", str(tmp_path / "o")]) == EXIT_IO
    assert "sidecar" in capsys.readouterr().err


def test_bad_config_exit_2(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"solver": {"nonsense": 1}}))
    assert main(["phantom", "--config", str(p), "--out-dir", str(tmp_path)]) == EXIT_IO
    assert "nonsense" in capsys.readouterr().err


def test_bad_threads_env(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("TGVASL_NUM_THREADS", "zero")
    rc = main(["replica", "--config", str(workdir / "cfg.json"), "--method", "nlls", "--n", "2",
               "--out-dir", str(tmp_path)])
    assert rc == EXIT_IO


def test_solver_failure_exit_1(workdir, tmp_path, capsys):
    cfg = dict(SMALL, solver={**SMALL["solver"], "ls_max_shrinks": 0, "ls_beta": 1e-12})
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    rc = main(["fit", str(workdir / "ph" / "pwi.nii"), "--config", str(p), "--out-dir",
               str(tmp_path / "o")])
    assert rc == EXIT_SOLVER
    assert "solver failure" in capsys.readouterr().err


def test_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["fit"])
    assert err.value.code == 2

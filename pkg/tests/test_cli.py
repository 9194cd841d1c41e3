from __future__ import annotations

import numpy as np
import pytest

from transduce import MemoryStore, ptns
from transduce.cli import main


@pytest.fixture
def data(tmp_path):
    assert main(["synth", str(tmp_path / "d"), "--count", "3", "--res", "32", "--seed", "5"]) == 0
    return tmp_path / "d"


def _build(tmp_path, data, name="m", n_sp="0", extra=()):
    inputs = sorted(str(p) for p in data.glob("*.in.ptns"))
    labels = sorted(str(p) for p in data.glob("*.lab.ptns"))
    argv = ["build-memory", str(tmp_path / name), "--inputs", *inputs, "--labels", *labels, "--n-sp", n_sp, *extra]
    return main(argv), tmp_path / name


def test_synth_writes_pairs_and_config(data):
    assert len(list(data.glob("*.in.ptns"))) == 3 and len(list(data.glob("*.lab.ptns"))) == 3
    echo = (data / "run_config.txt").read_text()
    assert "seed=5" in echo and "force" not in echo


def test_self_retrieval_is_exact(tmp_path, data, capsys):
    rc, store = _build(tmp_path, data)
    assert rc == 0
    out = tmp_path / "p"
    q = data / "x0001.in.ptns"
    assert main(["predict", str(out), "--store", str(store), "--query", str(q), "--no-mp", "--no-tta", "--emit-diagnostics"]) == 0
    for f in ("pred.lab.ptns", "raw.lab.ptns", "idx.ptns", "sim.ptns", "diagnostics.txt", "run_config.txt"):
        assert (out / f).exists()
    assert np.allclose(ptns.read_grid(out / "sim.ptns"), 1.0)
    metrics = tmp_path / "metrics.txt"
    assert main(["eval", "--pred", str(out / "pred.lab.ptns"), "--gt", str(data / "x0001.lab.ptns"), "--out", str(metrics)]) == 0
    assert metrics.read_text().startswith("miou=1.0\n")


def test_build_is_byte_identical(tmp_path, data):
    _, a = _build(tmp_path, data, "a")
    _, b = _build(tmp_path, data, "b")
    for f in sorted(a.iterdir()):
        if f.name != "run_config.txt":
            assert f.read_bytes() == (b / f.name).read_bytes(), f.name


def test_sparse_build_cascade(tmp_path, data):
    rc, path = _build(tmp_path, data, n_sp="2")
    assert rc == 0
    store = MemoryStore.load(path)
    pyr = store.get(store.ids[0]).pyramid
    assert [len(pyr.node_indices(l)) for l in range(1, 5)] == [64, 64, 64, 16]


def test_predict_with_mp_tta_and_chunks(tmp_path, data):
    _, store = _build(tmp_path, data)
    q = str(data / "x0002.in.ptns")
    outs = []
    for chunk in ("1", "64", "1024"):
        out = tmp_path / f"p{chunk}"
        assert main(["predict", str(out), "--store", str(store), "--query", q, "--chunk", chunk, "--threads", "2"]) == 0
        outs.append((out / "pred.lab.ptns").read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_output_guard_and_force(tmp_path, data):
    assert main(["synth", str(data), "--count", "1"]) == 2
    assert main(["synth", str(data), "--count", "1", "--force"]) == 0


def test_bad_files_and_validation(tmp_path, data):
    bad = tmp_path / "bad.ptns"
    bad.write_bytes(b"not a ptns file")
    assert main(["build-memory", str(tmp_path / "m"), "--inputs", str(bad), "--labels", str(bad)]) == 2
    _, store = _build(tmp_path, data, "ok")
    q = str(data / "x0000.in.ptns")
    assert main(["predict", str(tmp_path / "p"), "--store", str(store), "--query", q, "--scales", "1.5"]) == 1
    assert main(["predict", str(tmp_path / "p2"), "--store", str(tmp_path / "missing"), "--query", q]) == 2


def test_oracle_check(tmp_path, data, capsys):
    _, store = _build(tmp_path, data)
    q = str(data / "x0000.in.ptns")
    assert main(["oracle-check", "--store", str(store), "--queries", q, "--full-beam", "--k", "2"]) == 0
    assert "PASS mismatches=0" in capsys.readouterr().out
    assert main(["oracle-check", "--store", str(store), "--queries", q, "--out", str(tmp_path / "o")]) == 0
    assert "REPORT recall@1=" in (tmp_path / "o" / "oracle_report.txt").read_text()
    assert main(["oracle-check", "--store", str(store), "--queries", q, "--max-pairs", "10"]) == 1


def test_cl_run(tmp_path):
    cfg = tmp_path / "s.ini"
    cfg.write_text("[scenario]\nname = 1-1(3)\nres = 16\nseed = 2\n[memory]\nn_sp = 0\nlevels = 3\n[mp]\nenabled = no\n")
    assert main(["cl-run", str(tmp_path / "a"), "--config", str(cfg)]) == 0
    assert main(["cl-run", str(tmp_path / "b"), "--config", str(cfg)]) == 0
    assert (tmp_path / "a" / "retention.kv").read_text() == (tmp_path / "b" / "retention.kv").read_text()
    assert main(["cl-run", str(tmp_path / "c"), "--config", str(cfg), "--steps", "1"]) == 0
    assert "steps=1" in (tmp_path / "c" / "retention.kv").read_text()
    assert main(["cl-run", str(tmp_path / "d"), "--config", str(cfg), "--seed", "3"]) == 0
    assert "seed = 3" in (tmp_path / "d" / "scenario.ini").read_text()


def test_depth_eval(tmp_path):
    from transduce import LabelMap

    gt = LabelMap.scalar(np.arange(16.0), res=(4, 4))
    pred = LabelMap.scalar(np.arange(16.0) + 2.0, res=(4, 4))
    ptns.write_labels(tmp_path / "g.ptns", gt)
    ptns.write_labels(tmp_path / "p.ptns", pred)
    out = tmp_path / "m.txt"
    assert main(["eval", "--task", "depth", "--pred", str(tmp_path / "p.ptns"), "--gt", str(tmp_path / "g.ptns"), "--out", str(out)]) == 0
    assert out.read_text() == "rmse=2.0\n"

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ppids import cli
from ppids import harness as H
from ppids import iot
from ppids import model as M
from ppids.model import CLASS_NAMES


def test_matching_examples():
    a = np.arange(251) % 8
    b = a.copy()
    b[17] = (b[17] + 1) % 8
    assert round(100 * H.matching_rate(a, b), 1) == 99.6
    assert H.matching_rate(a, a) == 1.0
    assert H.matching_rate(a, (a + 1) % 8) == 0.0
    with pytest.raises(ValueError):
        H.matching_rate(a, a[:-1])
    with pytest.raises(ValueError):
        H.matching_rate([], [])


@given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 7)), min_size=1, max_size=50))
def test_matching_symmetric_and_reflexive(pairs):
    a, b = np.array(pairs).T
    assert H.matching_rate(a, b) == H.matching_rate(b, a)
    assert H.matching_rate(a, a) == 1.0


def test_confusion_layout():
    cm = H.confusion([0, 1, 1, 7], [0, 0, 1, 7])
    assert cm.counts[0, 1] == 1 and cm.counts[0, 0] == 1 and cm.total == 4
    assert cm.accuracy() == 0.75 and cm.classes == CLASS_NAMES
    assert "backdoor" in cm.format()
    with pytest.raises(ValueError):
        H.confusion([8], [0])
    with pytest.raises(ValueError):
        H.confusion([0, 1], [0])


def test_binary_metrics_perfect_and_degenerate():
    truth = np.array([0, 3, 3, 5])
    b = H.binary_metrics(H.confusion(truth, truth))
    assert (b.accuracy, b.tpr, b.fpr) == (1.0, 1.0, 0.0)
    only_normal = np.full(5, H.NORMAL)
    b = H.binary_metrics(H.confusion(only_normal, only_normal))
    assert b.tpr is None and b.fpr == 0.0 and b.as_row()["tpr"] == "n/a"
    only_attacks = np.array([0, 1, 2])
    b = H.binary_metrics(H.confusion(only_attacks, only_attacks))
    assert b.fpr is None and b.tpr == 1.0


@given(st.lists(st.integers(0, 7), min_size=1, max_size=60))
def test_binary_metrics_of_identity(labels):
    b = H.binary_metrics(H.confusion(labels, labels))
    assert b.accuracy == 1.0 and b.fn == b.fp == 0
    assert b.tpr in (1.0, None) and b.fpr in (0.0, None)


def test_attack_to_attack_swap_keeps_binary_metrics():
    g = np.random.default_rng(0)
    truth = g.integers(0, 8, 300)
    pred = np.where(g.random(300) < 0.9, truth, g.integers(0, 8, 300))
    i = np.flatnonzero((truth == 0) & (pred == 0))[0]
    moved = pred.copy()
    moved[i] = CLASS_NAMES.index("ransomware")
    a, b = H.confusion(pred, truth), H.confusion(moved, truth)
    assert not np.array_equal(a.counts, b.counts)
    assert H.binary_metrics(a) == H.binary_metrics(b)


def test_sweep_determinism_and_schema(desk, tmp_path):
    x = np.random.default_rng(1).normal(size=(20, 3, 32, 32))
    a = H.sweep_precision(desk, x, range(1, 11))
    b = H.sweep_precision(desk, x, range(1, 11))
    assert [r.__dict__ for r in a.rows] == [r.__dict__ for r in b.rows]
    assert all(r.matched <= r.total for r in a.rows)
    assert {r.mode for r in a.rows} <= set(H.FAILURE_MODES)
    assert a.row(10).mode == "overflow" and a.row(10).predictions is None
    band = a.band()
    assert band and band == list(range(band[0], band[-1] + 1))
    a.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == H.SWEEP_SCHEMA and len(lines) == 12


def test_sweep_bad_codec_is_overflow(desk):
    x = np.random.default_rng(1).normal(size=(2, 3, 32, 32))
    rep = H.sweep_precision(desk, x, [4], word_size=8)
    assert rep.row(4).mode == "overflow"


def test_encrypted_sweep_matches_proxy(desk):
    x = np.random.default_rng(2).normal(size=(2, 3, 32, 32))
    enc = H.sweep_precision(desk, x, [2, 4], encrypted=True, sample=2)
    proxy = H.sweep_precision(desk, x, [2, 4])
    assert [r.predictions for r in enc.rows] == [r.predictions for r in proxy.rows]


def test_near_tie_inputs_are_close():
    model = H.engineered_model()
    spec, w = M.fold_batchnorm(model.spec, model.weights)
    from ppids.engine import infer_plain_float

    logits = np.sort(infer_plain_float(spec, w, H.near_tie_inputs(model, 4)), axis=1)
    gap = (logits[:, -1] - logits[:, -2]) / np.abs(logits).max(axis=1)
    assert np.all(gap <= 1e-3)


def test_bench_schema(desk, tmp_path):
    x = np.random.default_rng(3).normal(size=(1, 3, 32, 32))
    rep = H.bench(desk, x, transports=("local",))
    assert [r.config for r in rep.rows] == ["plaintext-cpu", "encrypted-local"]
    assert rep.row("encrypted-local").matching == 1.0
    assert set(rep.row("encrypted-local").phases) == {"preprocessing", "upload", "online", "reveal"}
    rep.to_csv(tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == H.BENCH_SCHEMA and lines[1].startswith("config,items,duration_s,matching")
    with pytest.raises(ValueError):
        H.bench(desk, x, transports=("carrier-pigeon",))


def test_cli_pipeline(tmp_path, capsys):
    d = str(tmp_path)
    assert cli.main(["gen-model", "--arch", "desk", "--seed", "2", "--out", f"{d}/m.ppm"]) == 0
    assert cli.main(["gen-stream", "--rows", "60", "--out", f"{d}/s.csv"]) == 0
    assert cli.main(["encode-data", "--input", f"{d}/s.csv", "--height", "32", "--width", "32",
                     "--out", f"{d}/t.simg"]) == 0
    assert cli.main(["infer-plain", "--model", f"{d}/m.ppm", "--data", f"{d}/t.simg",
                     "--out", f"{d}/float.txt"]) == 0
    assert cli.main(["infer-plain", "--model", f"{d}/m.ppm", "--data", f"{d}/t.simg", "--fixed",
                     "--out", f"{d}/fixed.txt"]) == 0
    assert cli.main(["metrics", "--pred", f"{d}/fixed.txt", "--truth", f"{d}/float.txt",
                     "--confusion", "--binary", "--out", f"{d}/m.json"]) == 0
    text = (tmp_path / "m.json").read_text().splitlines()
    assert text[0] == H.METRICS_SCHEMA and json.loads("\n".join(text[1:]))["total"] == 29
    assert cli.main(["gen-inputs", "--model", f"{d}/m.ppm", "--count", "4", "--out", f"{d}/x.npy"]) == 0
    assert cli.main(["sweep-precision", "--model", f"{d}/m.ppm", "--data", f"{d}/x.npy",
                     "--pmin", "2", "--pmax", "9", "--out", f"{d}/sw.csv"]) == 0
    assert len((tmp_path / "sw.csv").read_text().splitlines()) == 10
    truth = iot.load_tensors(tmp_path / "t.simg")[1]
    assert np.array_equal(cli.read_labels(tmp_path / "t.simg"), truth)
    (tmp_path / "names.txt").write_text("normal\nxss\n3\n")
    assert cli.read_labels(tmp_path / "names.txt").tolist() == [3, 7, 3]
    capsys.readouterr()
    assert cli.main(["metrics", "--pred", f"{d}/missing.txt", "--truth", f"{d}/float.txt"]) == 1
    assert "ppids metrics:" in capsys.readouterr().err


def test_cli_parser_lists_spec_commands():
    sub = next(a for a in cli.build_parser()._actions if a.dest == "command")
    for name in ("dealer", "serve", "client", "infer-plain", "encode-data", "sweep-precision",
                 "metrics", "bench", "gen-model"):
        assert name in sub.choices

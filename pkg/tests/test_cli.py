import pytest

from trajdiff.cli import main
from trajdiff.evaluation import read_report


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "d.tsv"
    assert run("synth", "--out", path, "--users", 5, "--days", 10, "--seed", 2) == 0
    return path


def test_synth_is_deterministic(tmp_path, data):
    other = tmp_path / "again.tsv"
    assert run("synth", "--out", other, "--users", 5, "--days", 10, "--seed", 2) == 0
    # the header records the output path, so compare the body
    body = lambda p: [l for l in p.read_text().splitlines() if not l.startswith("# config")]
    assert body(other) == body(data)


def test_resolved_config_in_header_and_stderr(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("users = 3\ndays = 6  # short\nnoise = 0.1\n")
    out = tmp_path / "d.tsv"
    assert run("synth", "--config", cfg, "--out", out, "--days", 7) == 0
    header = out.read_text().splitlines()[1]
    assert "users=3" in header and "days=7" in header and "noise=0.1" in header
    assert "days=7" in capsys.readouterr().err


def test_unknown_config_key_exits_1(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("colour = red\n")
    assert run("synth", "--config", cfg, "--out", tmp_path / "x") == 1


def test_perfect_predictions_score_one(tmp_path, data):
    from trajdiff.ingest import read_dataset, split_chronological

    ds = split_chronological(read_dataset(data.read_text()))
    pred = tmp_path / "p.tsv"
    with open(pred, "w") as fh:
        for (user, day), mask in ds.masks.items():
            t = next(t for t in ds.users[user] if t.day == day)
            for n in mask.target_idx:
                rest = [i for i in range(ds.grid.n_cells) if i != t.slots[n]]
                fh.write(f"-\t{user}\t{day}\t{n}\t{','.join(map(str, [t.slots[n]] + rest))}\n")
    report = tmp_path / "r.txt"
    assert run("evaluate", "--input", data, "--predictions", pred, "--out", report) == 0
    values = read_report(report.read_text())
    assert values["recall"] == 1.0 and values["map"] == 1.0 and values["distance_m"] == 0.0


def test_baseline_then_evaluate_by_ratio(tmp_path, data):
    pred, report = tmp_path / "p.tsv", tmp_path / "r.txt"
    assert run("baseline", "--method", "history", "--input", data, "--out", pred, "--missing", "0.2,0.6") == 0
    assert run("evaluate", "--input", data, "--predictions", pred, "--out", report) == 0
    text = report.read_text()
    assert "[missing_ratio]" in text and "\n0.2\t" in text and "\n0.6\t" in text
    values = read_report(text)
    assert values["map"] >= values["recall"]


def test_pipeline_end_to_end(tmp_path, data):
    emb, ckpt, pred = tmp_path / "e.trem", tmp_path / "m.trck", tmp_path / "p.tsv"
    assert run("embed", "--input", data, "--out", emb, "--dim", 8, "--epochs", 5) == 0
    assert run("train", "--input", data, "--embedding", emb, "--out", ckpt, "--dim", 8, "--heads", 2,
               "--layers", 1, "--hidden", 8, "--blocks", 1, "--epochs", 1, "--steps", 4) == 0
    assert run("recover", "--input", data, "--checkpoint", ckpt, "--out", pred, "--top-k", 3) == 0
    rows = [l.split("\t") for l in pred.read_text().splitlines() if not l.startswith("#")]
    assert rows and all(r[0] == "-" and len(r[4].split(",")) == 3 for r in rows)


def test_build_graph_then_embed_from_graph(tmp_path, data):
    graph, emb = tmp_path / "g.tsv", tmp_path / "e.trem"
    assert run("build-graph", "--input", data, "--out", graph) == 0
    assert run("embed", "--input", graph, "--graph", "--n-locations", 16, "--out", emb, "--dim", 4, "--epochs", 2) == 0
    assert emb.read_bytes()[:4] == b"TREM"


def test_unknown_flag_exits_1(tmp_path, capsys):
    assert run("synth", "--out", tmp_path / "x", "--bogus", 1) == 1
    assert "usage" in capsys.readouterr().err


def test_bad_values_exit_1(tmp_path):
    assert run("synth", "--out", tmp_path / "x", "--noise", 2) == 1
    assert run("recover", "--input", "a", "--checkpoint", "b", "--out", "c", "--missing", "1.5") == 1


def test_bad_files_exit_2(tmp_path, data):
    junk = tmp_path / "junk"
    junk.write_bytes(b"\x00\x91 not a dataset")
    out = tmp_path / "o"
    assert run("evaluate", "--input", junk, "--predictions", junk, "--out", out) == 2
    assert run("evaluate", "--input", tmp_path / "missing", "--predictions", junk, "--out", out) == 2
    assert run("recover", "--input", data, "--checkpoint", junk, "--out", out) == 2
    bad_pred = tmp_path / "p.tsv"
    bad_pred.write_text("-\tu000\tx\t1\t2\n")
    assert run("evaluate", "--input", data, "--predictions", bad_pred, "--out", out) == 2

import json

import pytest

from rad.cli import build_parser, main
from rad.dataset import DatasetManifest

TINY_TRAIN = {"epochs": 1, "batch_size": 16, "dim": 16, "max_length": 48, "text_layers": 1, "decoder_layers": 1,
              "heads": 2}


def test_global_flags_before_or_after_subcommand():
    p = build_parser()
    a = p.parse_args(["--seed", "3", "--out", "x", "synth"])
    b = p.parse_args(["synth", "--seed", "3", "--out", "x"])
    assert (a.seed, a.out) == (b.seed, b.out) == (3, "x")


def test_nonzero_exit_on_error(tmp_path, capsys):
    assert main(["ingest", "--corpus", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "c")]) == 1
    assert "error" in capsys.readouterr().err


def test_manual_workflow(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--m", "3", "--n", "40", "--knowledge", "--seed", "1", "--out", str(data)]) == 0
    corpus = tmp_path / "corpus"
    assert main(["ingest", "--corpus", str(data / "corpus.jsonl"), "--out", str(corpus)]) == 0
    store = tmp_path / "guidelines"
    for did, name in DatasetManifest.load(data).diseases:
        retrieval = tmp_path / f"ret-{did}.json"
        assert main(["retrieve", "--disease", name, "--disease-id", did, "--k", "3", "--docs",
                     str(corpus / "docs.jsonl"), "--out", str(retrieval)]) == 0
        assert len(json.loads(retrieval.read_text())["hits"]) == 3
        assert main(["refine", "--disease", did, "--name", name, "--retrieval", str(retrieval), "--docs",
                     str(corpus / "docs.jsonl"), "--store", str(store), "--client", "echo"]) == 0
        assert main(["verify", "--disease", did, "--indicators", str(data / "indicators.json"),
                     "--store", str(store)]) == 0
        saved = json.loads((store / f"{did}.json").read_text())
        assert saved["verified"] and saved["indicators"]

    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": TINY_TRAIN}))
    train_out = tmp_path / "train"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--guidelines", str(store),
                 "--out", str(train_out)]) == 0
    ckpt = train_out / "model.pt"
    assert ckpt.exists()
    report = tmp_path / "report.json"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(report)]) == 0
    meta = json.loads(report.read_text())["meta"]
    assert meta["split"] == "test" and meta["config_hash"]
    interp = tmp_path / "interp"
    assert main(["interpret", "--checkpoint", str(ckpt), "--data", str(data), "--max-samples", "3",
                 "--out", str(interp)]) == 0
    assert (interp / "summary.json").exists() and (interp / "traces.jsonl").exists()
    capsys.readouterr()


def test_pipeline_command_memoizes(tmp_path, capsys):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text('[synth]\nm = 3\nn = 40\nimage_size = 12\n[train]\nepochs = 1\ndim = 16\nmax_length = 48\n'
                   'text_layers = 1\ndecoder_layers = 1\nheads = 2\n[interpret]\nmax_samples = 3\n')
    args = ["pipeline", "--config", str(cfg), "--out", str(tmp_path / "run")]
    assert main(args) == 0
    assert "cached: -" in capsys.readouterr().out
    assert main(args) == 0
    assert "ran: -" in capsys.readouterr().out
    assert main(args + ["--force", "--stages", "synth,eval"]) == 0
    assert "ran: synth, eval" in capsys.readouterr().out


def test_ablate_command(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"synth": {"m": 3, "n": 40, "image_size": 12}, "train": TINY_TRAIN}))
    assert main(["ablate", "--config", str(cfg), "--axes", "dual_decoder", "--seeds", "0",
                 "--out", str(tmp_path / "run")]) == 0
    table = json.loads((tmp_path / "run" / "ablation" / "table.json").read_text())
    assert [r["name"] for r in table["rows"]] == ["flags=110", "flags=111"]
    capsys.readouterr()


def test_ablate_rejects_unknown_axis(tmp_path, capsys):
    assert main(["ablate", "--axes", "nope", "--out", str(tmp_path)]) == 1
    capsys.readouterr()


@pytest.mark.parametrize("argv", [["retrieve"], ["nonsense"]])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as err:
        main(argv)
    assert err.value.code == 2

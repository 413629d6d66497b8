import json
import subprocess
import sys

import numpy as np
import pytest

from chatnct import cli
from chatnct.corpus import UtterancePool, make_context_view, make_nud_samples, make_si_samples, read_dialogue_file

TINY = ["d_model=16", "heads=2", "d_ff=32", "layers=1", "max_pos=64", "batch_tokens=300"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["prepare", "--synthetic", "8", "--out", str(out), "vector_dim=8"]) == 0
    return out


def test_prepare_outputs(data):
    for name in ("train.jsonl", "dev.jsonl", "parallel.tsv", "vectors.txt", "vocab.txt", "effective_config.json"):
        assert (data / name).exists()
    stats = json.loads((data / "prepare_stats.json").read_text())
    assert stats["dialogues"] == 8 and stats["sentence_pairs"] == 80


def test_evaluate_identical_files(tmp_path, capsys):
    f = tmp_path / "h.txt"
    f.write_text("a b c d\ne f g\n")
    assert cli.main(["evaluate", "--hyp", str(f), "--ref", str(f)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["bleu"] == 100.0 and report["ter"] == 0.0
    assert set(report) == {"bleu", "p1", "p2", "p3", "p4", "bp", "ter", "coherence"}


def test_evaluate_lowercase_and_char(tmp_path, capsys):
    h, r = tmp_path / "h.txt", tmp_path / "r.txt"
    h.write_text("The Cat\n")
    r.write_text("the cat\n")
    assert cli.main(["evaluate", "--hyp", str(h), "--ref", str(r), "--lowercase"]) == 0
    assert json.loads(capsys.readouterr().out)["bleu"] == 100.0
    h.write_text("你好 世界\n")
    r.write_text("你 好世界\n")
    assert cli.main(["evaluate", "--hyp", str(h), "--ref", str(r), "--char"]) == 0
    assert json.loads(capsys.readouterr().out)["ter"] == 0.0


def test_evaluate_with_coherence(data, capsys):
    args = ["evaluate", "--hyp", str(data / "dev.jsonl"), "--ref", str(data / "dev.jsonl"), "--format", "dialogue",
            "--vectors", str(data / "vectors.txt"), "vector_dim=8"]
    assert cli.main(args) == 0
    coh = json.loads(capsys.readouterr().out)["coherence"]
    assert set(coh) == {"n1", "n2", "n3", "skipped"}


def test_finetune_without_theta_checkpoint(data, tmp_path, capsys):
    code = cli.main(["finetune", "--corpus", str(data / "train.jsonl"), "--out", str(tmp_path / "x")])
    assert code == 1
    assert "stage-1 theta checkpoint" in capsys.readouterr().err


def test_unknown_flag_and_unknown_field(data, capsys):
    assert cli.main(["evaluate", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert cli.main(["make-samples", "--corpus", str(data / "train.jsonl"), "--out", "x.jsonl", "nosuch=1"]) == 1
    assert "unknown config field" in capsys.readouterr().err


def test_help_lists_consumed_fields(capsys):
    for command, consumed in cli.CONSUMES.items():
        assert cli.main([command, "--help"]) == 0
        text = " ".join(capsys.readouterr().out.split())
        for name in consumed:
            assert name in text, (command, name)


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"context_window": 2, "seed": 4, "T2": 9}))
    cfg = cli.effective_config("make-samples", str(cfg_file), ["context_window=5"], None)
    assert cfg == {"context_window": 5, "seed": 4}
    assert cli.effective_config("make-samples", str(cfg_file), [], 11)["seed"] == 11
    with pytest.raises(cli.UsageError):
        cli.effective_config("pretrain", None, ["vocab_size=3"], None)


def test_make_samples_deterministic_and_regenerable(data, tmp_path):
    outs = []
    for name in ("a", "b"):
        path = tmp_path / f"{name}.jsonl"
        assert cli.main(["make-samples", "--corpus", str(data / "train.jsonl"), "--out", str(path),
                         "--seed", "5"]) == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]
    records = [json.loads(line) for line in outs[0].decode().splitlines()]
    nud = [r for r in records if r["task"] == "nud"]
    si = [r for r in records if r["task"] == "si"]
    assert len(si) <= len(nud)
    # regenerate with the library functions and the same rng stream
    dialogues = read_dialogue_file(data / "train.jsonl")
    rng = np.random.default_rng([5, 3])
    pool = UtterancePool(dialogues)
    expected = []
    for i, d in enumerate(dialogues):
        for u in range(1, len(d) + 1):
            view = make_context_view(d, u, 3)
            for pair in (make_nud_samples(view, d, u, pool, rng, i), make_si_samples(view, d, u)):
                if pair:
                    expected += [{"dialogue_id": d.dialogue_id, **s.to_record()} for s in pair]
    assert records == expected


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck", "--seed", "7", "gradcheck_coords=1"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_full_pipeline(data, tmp_path, capsys):
    s1, s2 = tmp_path / "s1", tmp_path / "s2"
    assert cli.main(["pretrain", "--parallel", str(data / "parallel.tsv"), "--vocab", str(data / "vocab.txt"),
                     "--out", str(s1), "T1=10", *TINY]) == 0
    assert (s1 / "theta.npz").exists() and len((s1 / "train_log.jsonl").read_text().splitlines()) == 10
    assert cli.main(["finetune", "--corpus", str(data / "train.jsonl"), "--init", str(s1 / "theta.npz"),
                     "--out", str(s2), "T2=4", "batch_tokens=300", "finetune_warmup_steps=2"]) == 0
    manifest = json.loads((s2 / "load_manifest.json").read_text())
    assert "head.mrg.w" in manifest["freshly_initialized"] and "emb.word" in manifest["loaded"]
    echoed = json.loads((s2 / "effective_config.json").read_text())
    assert echoed["command"] == "finetune" and echoed["T2"] == 4
    hyp = tmp_path / "out" / "dev.hyp.jsonl"
    assert cli.main(["translate", "--model", str(s2 / "model.npz"), "--input", str(data / "dev.jsonl"),
                     "--output", str(hyp), "beam_size=2", "max_len=8"]) == 0
    assert len(read_dialogue_file(hyp, require_target=False)) == len(read_dialogue_file(data / "dev.jsonl"))
    assert hyp.with_suffix(".scores.jsonl").exists()
    capsys.readouterr()
    assert cli.main(["coherence", "--translations", str(hyp), "--reference", str(data / "dev.jsonl"),
                     "--vectors", str(data / "vectors.txt"), "vector_dim=8"]) == 0
    assert "skipped" in json.loads(capsys.readouterr().out)


def test_console_script_runs():
    res = subprocess.run([sys.executable, "-m", "chatnct.cli", "evaluate"], capture_output=True, text=True)
    assert res.returncode == 1 and "required" in res.stderr

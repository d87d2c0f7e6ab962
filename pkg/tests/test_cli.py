"""End-to-end CLI tests, run in-process through cli.main()."""

import numpy as np
import pytest

from anchorlm.cli import EXIT_CONTRACT, EXIT_INPUT, EXIT_USAGE, main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> prepare -> train once; the slow artifacts are shared."""
    root = tmp_path_factory.mktemp("runs")
    assert main(["synth", "--docs", "60", "--items", "8", "--seed", "1",
                 "--out", str(root / "synth")]) == 0
    assert main([
        "prepare", "--corpus", str(root / "synth" / "corpus.txt"),
        "--policy", "ac", "--vocab-size", "128", "--context-len", "48",
        "--out", str(root / "data"),
    ]) == 0
    assert main([
        "train", "--data", str(root / "data"), "--mask-mode", "ansan",
        "--steps", "8", "--batch-size", "4", "--seed", "2",
        "--n-layers", "1", "--n-heads", "2", "--d-model", "16",
        "--out", str(root / "train"),
    ]) == 0
    return root


def test_prepare_outputs(workspace):
    data = workspace / "data"
    assert (data / "vocab.txt").exists()
    assert (data / "blocks.jsonl").exists()
    assert (data / "manifest.txt").exists()
    manifest = (data / "manifest.txt").read_text()
    assert "command = prepare" in manifest
    assert "input." in manifest and "config.policy" in manifest


def test_prepare_is_deterministic(workspace, tmp_path):
    again = tmp_path / "data2"
    assert main([
        "prepare", "--corpus", str(workspace / "synth" / "corpus.txt"),
        "--policy", "ac", "--vocab-size", "128", "--context-len", "48",
        "--out", str(again),
    ]) == 0
    for name in ("vocab.txt", "blocks.jsonl", "data.cfg"):
        assert (again / name).read_bytes() == (workspace / "data" / name).read_bytes()


def test_train_outputs(workspace):
    out = workspace / "train"
    assert (out / "ckpt.bin").exists()
    losses = (out / "losses.log").read_text().splitlines()
    data_lines = [l for l in losses if not l.startswith("#")]
    assert len(data_lines) == 8
    assert (out / "timings.log").exists()
    assert (out / "train.cfg").exists()


def test_train_byte_stable(workspace, tmp_path):
    rerun = tmp_path / "train2"
    assert main([
        "train", "--data", str(workspace / "data"), "--mask-mode", "ansan",
        "--steps", "8", "--batch-size", "4", "--seed", "2",
        "--n-layers", "1", "--n-heads", "2", "--d-model", "16",
        "--out", str(rerun),
    ]) == 0
    for name in ("ckpt.bin", "losses.log"):
        assert (rerun / name).read_bytes() == (workspace / "train" / name).read_bytes()


def test_resume_matches_continuous(workspace, tmp_path):
    common = [
        "--data", str(workspace / "data"), "--mask-mode", "ansan",
        "--batch-size", "4", "--seed", "2",
        "--n-layers", "1", "--n-heads", "2", "--d-model", "16",
    ]
    a = tmp_path / "half"
    b = tmp_path / "resumed"
    full = tmp_path / "full"
    assert main(["train", *common, "--steps", "4", "--out", str(a)]) == 0
    assert main(["train", *common, "--steps", "4", "--out", str(b),
                 "--resume", str(a / "ckpt.bin")]) == 0
    assert main(["train", *common, "--steps", "8", "--out", str(full)]) == 0

    def records(path):
        return [l for l in (path / "losses.log").read_text().splitlines()
                if not l.startswith("#")]

    assert records(a) + records(b) == records(full)


def test_generate_reduce_on_off_same_text(workspace, tmp_path):
    args = [
        "generate", "--ckpt", str(workspace / "train" / "ckpt.bin"),
        "--vocab", str(workspace / "data" / "vocab.txt"),
        "--prompt", "the amber lamp holds the stone . a birch sign marks",
        "--policy", "ac", "--max-new", "8",
    ]
    on, off = tmp_path / "on", tmp_path / "off"
    assert main([*args, "--reduce", "on", "--out", str(on)]) == 0
    assert main([*args, "--reduce", "off", "--out", str(off)]) == 0
    body_on = (on / "generation.txt").read_text().splitlines()
    body_off = (off / "generation.txt").read_text().splitlines()
    assert body_on[0] == body_off[0]  # same text
    assert body_on[1] == body_off[1]  # same ids
    appends_on = int(next(l.split("=")[1] for l in body_on if l.startswith("appends")))
    discards_on = int(next(l.split("=")[1] for l in body_on if l.startswith("discards")))
    discards_off = int(next(l.split("=")[1] for l in body_off if l.startswith("discards")))
    assert discards_on > 0 and discards_off == 0
    assert appends_on > 0


def test_generate_strip_anchors(workspace, tmp_path):
    args = [
        "generate", "--ckpt", str(workspace / "train" / "ckpt.bin"),
        "--vocab", str(workspace / "data" / "vocab.txt"),
        "--prompt", "the amber lamp holds the stone .",
        "--policy", "ac", "--max-new", "6",
    ]
    plain, stripped = tmp_path / "plain", tmp_path / "stripped"
    assert main([*args, "--out", str(plain)]) == 0
    assert main([*args, "--strip-anchors", "--out", str(stripped)]) == 0
    text_stripped = (stripped / "generation.txt").read_text().splitlines()[0]
    assert "<AC>" not in text_stripped


def test_generate_max_new_one(workspace, tmp_path):
    assert main([
        "generate", "--ckpt", str(workspace / "train" / "ckpt.bin"),
        "--vocab", str(workspace / "data" / "vocab.txt"),
        "--prompt", "the amber lamp", "--policy", "ac", "--max-new", "1",
        "--out", str(tmp_path / "one"),
    ]) == 0
    ids = (tmp_path / "one" / "generation.txt").read_text().splitlines()[1]
    assert len(ids.split("=")[1].split()) == 1


def test_generate_prompt_over_context_contract_error(workspace, tmp_path, capsys):
    code = main([
        "generate", "--ckpt", str(workspace / "train" / "ckpt.bin"),
        "--vocab", str(workspace / "data" / "vocab.txt"),
        "--prompt", "word " * 100, "--policy", "ac", "--max-new", "1",
        "--out", str(tmp_path / "x"),
    ])
    assert code == EXIT_CONTRACT
    assert "exceeds" in capsys.readouterr().err


def test_eval_ppl(workspace, tmp_path):
    out = tmp_path / "ppl"
    assert main([
        "eval", "--task", "ppl", "--ckpt", str(workspace / "train" / "ckpt.bin"),
        "--vocab", str(workspace / "data" / "vocab.txt"),
        "--policy", "ac", "--mask-mode", "ansan",
        "--text", str(workspace / "synth" / "corpus.txt"),
        "--eval-context-len", "32", "--out", str(out),
    ]) == 0
    metrics = (out / "metrics.txt").read_text()
    assert "perplexity = " in metrics
    assert "task = ppl" in metrics


def test_eval_ppl_byte_stable(workspace, tmp_path):
    outs = []
    for name in ("p1", "p2"):
        out = tmp_path / name
        assert main([
            "eval", "--task", "ppl", "--ckpt", str(workspace / "train" / "ckpt.bin"),
            "--vocab", str(workspace / "data" / "vocab.txt"),
            "--policy", "ac", "--mask-mode", "ansan",
            "--text", str(workspace / "synth" / "corpus.txt"),
            "--eval-context-len", "32", "--out", str(out),
        ]) == 0
        outs.append((out / "metrics.txt").read_bytes())
    assert outs[0] == outs[1]


def test_eval_mc(workspace, tmp_path):
    out = tmp_path / "mc"
    assert main([
        "eval", "--task", "mc", "--ckpt", str(workspace / "train" / "ckpt.bin"),
        "--vocab", str(workspace / "data" / "vocab.txt"),
        "--policy", "ac", "--items", str(workspace / "synth" / "task.jsonl"),
        "--demo-pool", str(workspace / "synth" / "demos.jsonl"),
        "--shots", "2", "--ansan", "--reuse-demo-cache",
        "--out", str(out),
    ]) == 0
    metrics = (out / "metrics.txt").read_text()
    assert "accuracy = " in metrics
    assert "cache_reduction = " in metrics


def test_eval_ablation(workspace, tmp_path):
    ckpt = str(workspace / "train" / "ckpt.bin")
    out = tmp_path / "ablation"
    assert main([
        "eval", "--task", "ablation",
        "--vocab", str(workspace / "data" / "vocab.txt"),
        "--policy", "ac", "--items", str(workspace / "synth" / "task.jsonl"),
        "--demo-pool", str(workspace / "synth" / "demos.jsonl"),
        "--shots", "2",
        "--arm", f"ac@{ckpt}",
        "--arm", f"every-n=10@{ckpt}",
        "--arm", f"random-p=0.1@{ckpt}",
        "--out", str(out),
    ]) == 0
    table = (out / "ablation.txt").read_text().splitlines()
    assert len([l for l in table if not l.startswith("#")]) == 4  # header + 3 arms


def test_missing_corpus_is_input_error(tmp_path, capsys):
    code = main([
        "prepare", "--corpus", str(tmp_path / "nope.txt"), "--policy", "ep",
        "--out", str(tmp_path / "d"),
    ])
    assert code == EXIT_INPUT
    assert "error:" in capsys.readouterr().err


def test_bad_mask_mode_is_usage_error(workspace, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main([
            "train", "--data", str(workspace / "data"), "--mask-mode", "sideways",
            "--steps", "1", "--out", str(tmp_path / "t"),
        ])
    assert exc.value.code == EXIT_USAGE


def test_wrong_vocab_is_config_error(workspace, tmp_path, capsys):
    other_vocab = tmp_path / "other.txt"
    other_vocab.write_text("<pad>\n<bos>\n<eos>\n<unk>\n<AC>\nzzz\n", encoding="utf-8")
    code = main([
        "generate", "--ckpt", str(workspace / "train" / "ckpt.bin"),
        "--vocab", str(other_vocab), "--prompt", "zzz", "--policy", "ac",
        "--out", str(tmp_path / "g"),
    ])
    assert code == EXIT_USAGE
    assert "vocab" in capsys.readouterr().err


def test_missing_items_is_input_error(workspace, tmp_path, capsys):
    code = main([
        "eval", "--task", "mc", "--ckpt", str(workspace / "train" / "ckpt.bin"),
        "--vocab", str(workspace / "data" / "vocab.txt"),
        "--policy", "ac", "--items", str(tmp_path / "missing.jsonl"),
        "--out", str(tmp_path / "m"),
    ])
    assert code == EXIT_INPUT
    capsys.readouterr()


def test_checkpoint_cadence(workspace, tmp_path):
    out = tmp_path / "cadenced"
    assert main([
        "train", "--data", str(workspace / "data"), "--mask-mode", "ansan",
        "--steps", "4", "--batch-size", "4", "--seed", "2",
        "--n-layers", "1", "--n-heads", "2", "--d-model", "16",
        "--checkpoint-every", "2", "--out", str(out),
    ]) == 0
    assert (out / "ckpt-000002.bin").exists()
    assert (out / "ckpt-000004.bin").exists()
    assert (out / "ckpt.bin").exists()


def test_numeric_error_exit_code(workspace, tmp_path, capsys):
    from anchorlm.cli import EXIT_NUMERIC, _sha256
    from anchorlm.model import load_checkpoint, save_checkpoint

    weights, step, _, opt = load_checkpoint(workspace / "train" / "ckpt.bin")
    weights.embedding[:] = np.inf
    broken = tmp_path / "broken.bin"
    vocab_path = workspace / "data" / "vocab.txt"
    save_checkpoint(broken, weights, step, _sha256(vocab_path), opt)
    with np.errstate(all="ignore"):
        code = main([
            "generate", "--ckpt", str(broken), "--vocab", str(vocab_path),
            "--prompt", "the amber lamp", "--policy", "ac",
            "--out", str(tmp_path / "g"),
        ])
    assert code == EXIT_NUMERIC
    capsys.readouterr()


def test_default_out_uses_env_dir(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("ANCHORLM_DATA_DIR", str(tmp_path / "envruns"))
    assert main(["synth", "--docs", "2", "--items", "1"]) == 0
    runs = list((tmp_path / "envruns").iterdir())
    assert len(runs) == 1 and runs[0].name.startswith("synth-")

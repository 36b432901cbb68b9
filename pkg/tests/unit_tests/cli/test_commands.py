import argparse
import csv
import io
import json

import pytest

from sparsekit.cli.bench import BENCH_HEADER
from sparsekit.cli.bootstrap import ConsoleProvider, RunOptions, boot
from sparsekit.cli.commands import cmd_gradcheck, main
from sparsekit.container import Container
from sparsekit.exceptions import CheckFailedException
from sparsekit.ops.sparsek import sparsek, sparsek_jvp


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, out


def json_lines(out: str):
    return [json.loads(line) for line in out.splitlines() if line.strip()]


def test_eval_hand_example(capsys):
    code, out = run(capsys, "eval", "--scores", "[0.9,0.5,0.1]", "--k", "2")
    assert code == 0
    data = json_lines(out)[0]
    assert data["p"] == pytest.approx([1.0, 0.7, 0.3], abs=1e-12)
    assert data["tau"] == pytest.approx(-0.2, abs=1e-12)
    assert (data["u_count"], data["w_count"]) == (1, 3)


def test_eval_saturated(capsys):
    code, out = run(capsys, "eval", "--scores", "[0.3, -1, 2]", "--k", "3")
    assert code == 0
    assert json_lines(out)[0]["p"] == [1.0, 1.0, 1.0]


def test_eval_stream_equals_batch(capsys):
    scores = [0.4, -0.2, 1.3, 0.9, 0.1, 0.75]
    code, out = run(capsys, "eval", "--scores", json.dumps(scores), "--k", "2.5", "--stream")
    assert code == 0
    rows = json_lines(out)
    assert [r["t"] for r in rows] == list(range(1, 7))
    for t, row in enumerate(rows, start=1):
        assert row["p"] == pytest.approx(sparsek(scores[:t], 2.5).p.tolist(), abs=1e-9)


def test_eval_scores_from_file(capsys, tmp_path):
    path = tmp_path / "z.json"
    path.write_text("[0.9, 0.5, 0.1]")
    code, out = run(capsys, "eval", "--scores", str(path), "--k", "2", "--sort-cap", "3")
    assert code == 0
    assert json_lines(out)[0]["p"] == pytest.approx([1.0, 0.7, 0.3], abs=1e-12)


def test_exit_codes(capsys, tmp_path):
    assert run(capsys, "eval", "--scores", "[0.1, oops]", "--k", "1")[0] == 1
    assert run(capsys, "eval", "--scores", '["a"]', "--k", "1")[0] == 1
    assert run(capsys, "eval", "--scores", "[0.1]", "--k", "0")[0] == 1
    assert run(capsys, "eval", "--scores", "[0.1]")[0] == 1
    assert run(capsys, "nope")[0] == 1
    assert run(capsys, "eval", "--scores", "[0.1, NaN]", "--k", "1")[0] == 2
    assert run(capsys, "eval", "--scores", str(tmp_path / "missing.json"), "--k", "1")[0] == 3
    assert run(capsys, "--log-config", str(tmp_path / "none.yaml"), "eval", "--scores", "[1]", "--k", "1")[0] == 1


def test_threads_from_environment(capsys, monkeypatch):
    monkeypatch.setenv("SPARSEK_THREADS", "many")
    assert run(capsys, "eval", "--scores", "[1]", "--k", "1")[0] == 1
    monkeypatch.setenv("SPARSEK_THREADS", "1")
    assert run(capsys, "eval", "--scores", "[1]", "--k", "1")[0] == 0


def test_bench_csv(capsys, tmp_path):
    code, out = run(capsys, "bench", "--mode", "op", "--n", "16,32", "--repeats", "2")
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert tuple(rows[0]) == BENCH_HEADER
    assert [r[1] for r in rows[1:]] == ["16", "32"]

    target = tmp_path / "bench" / "attn.csv"
    code, _ = run(capsys, "bench", "--mode", "attn", "--n", "24", "--repeats", "1", "--out", str(target))
    assert code == 0
    with target.open() as f:
        assert next(csv.reader(f)) == list(BENCH_HEADER)
    assert run(capsys, "bench", "--mode", "op", "--n", "x")[0] == 1


def test_gradcheck_op(capsys):
    code, out = run(capsys, "gradcheck", "--size-preset", "op")
    assert code == 0
    report = json_lines(out)[0]
    assert report["passed"] and report["checked"] == 500


def test_gradcheck_catches_a_wrong_jacobian(capsys):
    container = Container()
    boot(container, bootstrappers=[], providers=[ConsoleProvider()])
    assert container.force_fetch(RunOptions).seed == 0

    def skewed(sol, v):
        return sparsek_jvp(sol, v) * 1.01

    with pytest.raises(CheckFailedException):
        cmd_gradcheck(argparse.Namespace(size_preset="op"), container, jvp=skewed)
    assert json_lines(capsys.readouterr().out)[0]["passed"] is False


def write_config(tmp_path, **model):
    cfg = {
        "task": "repeat",
        "model": {
            "vocab": 10, "dim": 8, "layers": 1, "heads": 2, "context": 12, "kind": "sparsek_sw",
            "attn": {"k": 2, "window": 2, "heads": 2, "head_dim": 4},
            **model,
        },
        "hyper": {"steps": 3, "batch": 2, "warmup": 1, "log_every": 1},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


def test_train_resume_and_generate(capsys, tmp_path):
    config = write_config(tmp_path, max_positions=40)
    out = tmp_path / "run"
    code, stdout = run(capsys, "train", "--config", str(config), "--out", str(out))
    assert code == 0
    summary = json_lines(stdout)[0]
    assert summary["steps"] == 3
    for name in ("config.json", "metrics.csv", "checkpoint.spkt"):
        assert (out / name).exists()

    checkpoint = out / "checkpoint.spkt"
    code, stdout = run(capsys, "train", "--config", str(config), "--out", str(out), "--resume", str(checkpoint),
                       "--steps", "5")
    assert code == 0
    assert json_lines(stdout)[0]["steps"] == 5
    with (out / "metrics.csv").open() as f:
        assert len(list(csv.DictReader(f))) == 5

    gen_dir = tmp_path / "gen"
    code, stdout = run(capsys, "generate", "--checkpoint", str(checkpoint), "--prompt-tokens", "[0, 1, 2]",
                       "--tokens", "4", "--out", str(gen_dir))
    assert code == 0
    first = json_lines(stdout)[0]["tokens"]
    assert len(first) == 4
    assert (gen_dir / "generation.json").exists() and (gen_dir / "cache_layer0.spkc").exists()

    code, stdout = run(capsys, "generate", "--checkpoint", str(checkpoint), "--resume", str(gen_dir),
                       "--tokens", "3")
    assert code == 0
    assert len(json_lines(stdout)[0]["tokens"]) == 3

    # byte prompt outside a 10-token vocabulary
    assert run(capsys, "generate", "--checkpoint", str(checkpoint), "--prompt", "hello")[0] == 1
    assert run(capsys, "generate", "--checkpoint", str(tmp_path / "nope.spkt"))[0] == 3
    assert run(capsys, "generate", "--checkpoint", str(checkpoint), "--resume", str(tmp_path / "void"))[0] == 3
    assert run(capsys, "passkey", "--checkpoint", str(checkpoint))[0] == 1


def test_passkey_command(capsys, tmp_path):
    config = write_config(tmp_path, vocab=256, context=128, attn={"k": 4, "window": 16, "heads": 2, "head_dim": 4})
    out = tmp_path / "pk"
    assert run(capsys, "train", "--config", str(config), "--out", str(out), "--steps", "0")[0] == 0
    target = out / "passkey.json"
    code, stdout = run(capsys, "passkey", "--checkpoint", str(out / "checkpoint.spkt"), "--samples", "1",
                       "--out", str(target))
    assert code == 0
    accuracy = json_lines(stdout)[0]
    assert list(accuracy) == ["16", "32", "48", "64"]
    assert json.loads(target.read_text()) == accuracy


def test_train_config_errors(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"vocab": 10, "colour": "blue"}}))
    assert run(capsys, "train", "--config", str(bad), "--out", str(tmp_path / "o"))[0] == 1
    bad.write_text("{not json")
    assert run(capsys, "train", "--config", str(bad), "--out", str(tmp_path / "o"))[0] == 1
    assert run(capsys, "train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o"))[0] == 3
    text_task = tmp_path / "text.json"
    text_task.write_text(json.dumps({"task": "text"}))
    assert run(capsys, "train", "--config", str(text_task), "--out", str(tmp_path / "o"))[0] == 1

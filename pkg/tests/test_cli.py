import json
import subprocess
import sys

import pytest

from rala_kit import analysis, trainer
from rala_kit.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_rank_default_outputs_csv(capsys):
    code, out, err = run(capsys, "rank", "--n", "64", "--d", "16", "--key-rank", "4")
    assert code == 0
    records = analysis.parse_table(out)
    by_name = {r.matrix_name: r for r in records}
    assert set(by_name) == set(analysis.TRACED)
    assert by_name["pre_modulation"].numerical_rank <= 4
    assert by_name["output"].numerical_rank == 16
    assert "resolved config" in err and "fingerprint" in err


def test_rank_vanilla_json(capsys):
    code, out, _ = run(capsys, "rank", "--variant", "linear_vanilla", "--n", "32", "--d", "8",
                       "--key-rank", "2", "--format", "json")
    assert code == 0
    rows = json.loads(out)
    assert max(r["numerical_rank"] for r in rows if r["matrix_name"] == "output") <= 2


def test_rank_on_model(capsys, tmp_path):
    out_path = tmp_path / "trace.csv"
    code, out, _ = run(capsys, "rank", "--preset", "toy", "--out", str(out_path))
    assert code == 0 and out == ""
    records = analysis.read_table(out_path)
    assert len({r.layer_index for r in records}) == 5


@pytest.mark.parametrize("argv", [
    ["rank", "--key-rank", "100"],
    ["bench", "--n-list", "196,392,784"],
    ["bench", "--n-list", "196,392,784,1000"],
    ["bench", "--n-list", "196,150,784,3136"],
    ["bench", "--variants", "hydra"],
    ["gradcheck", "--ops", "no_such_op"],
    ["gradcheck", "--h", "0.5"],
])
def test_usage_errors_exit_2(capsys, argv):
    code, out, err = run(capsys, *argv)
    assert code == 2 and out == ""
    assert "error" in err


def test_argparse_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["rank", "--variant", "hydra"])
    assert info.value.code == 2
    with pytest.raises(SystemExit):
        main(["rank", "--seed", str(2**64)])


def test_info_csv_and_json(capsys):
    code, out, _ = run(capsys, "info", "--preset", "ravlt-t")
    assert code == 0
    rows = dict(line.split(",", 1) for line in out.strip().splitlines()[1:])
    assert 0.85 * 15e6 <= int(rows["params"]) <= 1.15 * 15e6
    assert int(rows["flops_2x_macs"]) == 2 * int(rows["macs"])
    code, out, _ = run(capsys, "info", "--preset", "ravlt-t", "--resolution", "256", "--format", "json")
    data = json.loads(out)
    assert data["resolution"] == 256 and data["stage_heads"] == [1, 2, 4, 8]


def test_gradcheck_selected_ops(capsys):
    code, out, err = run(capsys, "gradcheck", "--ops", "matmul,softmax_rows", "--trials", "3")
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "op,max_rel_error,h,trials,passed"
    assert [l.split(",")[0] for l in lines[1:]] == ["matmul", "softmax_rows"]
    assert all(l.endswith("True") for l in lines[1:])
    assert "max relative error" in err


def test_gradcheck_failure_exits_1(capsys, monkeypatch):
    from rala_kit import gradcheck

    real = gradcheck.run_gradcheck

    def broken(*a, **kw):
        reps = real(*a, **kw)
        return [type(r)(r.op, 0.5, r.h, r.shapes) for r in reps]

    monkeypatch.setattr(gradcheck, "run_gradcheck", broken)
    code, out, _ = run(capsys, "gradcheck", "--ops", "tanh", "--trials", "1")
    assert code == 1 and out.strip().endswith("False")


def test_train_writes_history_and_checkpoint(capsys, tmp_path):
    ckpt = tmp_path / "m.ckpt"
    code, out, err = run(capsys, "train", "--preset", "toy", "--epochs", "1", "--n-samples", "10",
                         "--checkpoint", str(ckpt))
    assert code == 0
    assert out.startswith("epoch,loss,accuracy,lr\n0,")
    cfg, weights, metrics = trainer.load_checkpoint(ckpt)
    assert cfg.stage_blocks == (1, 1, 2, 1) and metrics["epochs_run"] == 1
    assert "epoch 0" in err


def test_train_from_config_file(capsys, tmp_path):
    conf = tmp_path / "train.json"
    conf.write_text(json.dumps({"epochs": 1, "n_samples": 8, "n_classes": 4, "batch_size": 4,
                                "model_overrides": {"input_resolution": 32}}))
    code, out, _ = run(capsys, "train", "--config", str(conf), "--no-kv-augment", "--no-out-augment",
                       "--format", "json")
    assert code == 0 and json.loads(out)[0]["epoch"] == 0
    conf.write_text(json.dumps({"epochz": 1}))
    code, _, _ = run(capsys, "train", "--config", str(conf))
    assert code == 2


def test_bench_outputs_and_warning(capsys):
    code, out, err = run(capsys, "bench", "--n-list", "8,16,32,128", "--d", "4", "--repeats", "1",
                         "--variants", "rala,linear_vanilla")
    assert code == 0
    records = analysis.parse_table(out)
    assert [r.N for r in records] == [8, 16, 32, 128] * 2
    assert "warning" in err and "slope rala" in err


def test_missing_output_directory_exits_1(capsys, tmp_path):
    code, _, err = run(capsys, "info", "--out", str(tmp_path / "nope" / "x.csv"))
    assert code == 1 and "Error" in err


def test_thread_env_validation(capsys, monkeypatch):
    monkeypatch.setenv("RALA_KIT_THREADS", "many")
    code, _, _ = run(capsys, "info")
    assert code == 2
    monkeypatch.setenv("RALA_KIT_THREADS", "1")
    assert run(capsys, "info")[0] == 0


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "rala_kit", "info", "--format", "json"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["preset"] == "ravlt-t"

import json
import math
from pathlib import Path

from crowd_mlp import cli
from crowd_mlp.model.crowdmlp import build_model
from crowd_mlp.settings import make_train_config


def _last_json(output: str) -> dict:
    return json.loads(output.strip().splitlines()[-1])


def test_verify_identity_passes(capsys) -> None:
    exit_code = cli.main(["verify-identity", "--samples", "5000", "--seed", "3"])

    assert exit_code == 0
    payload = _last_json(capsys.readouterr().out)
    assert payload["passed"] is True
    assert payload["samples"] == 5000
    assert payload["corollary_fraction"] == 1.0
    assert payload["max_residual"] < 1e-6


def test_verify_identity_reports_failure_with_exit_one(capsys) -> None:
    exit_code = cli.main(["verify-identity", "--samples", "100", "--tolerance", "0"])

    assert exit_code == 1
    assert _last_json(capsys.readouterr().out)["passed"] is False


def test_unknown_flag_is_a_usage_error(capsys) -> None:
    assert cli.main(["eval", "--frobnicate"]) == 2
    assert "usage:" in capsys.readouterr().err


def test_missing_command_is_a_usage_error(capsys) -> None:
    assert cli.main([]) == 2
    assert "usage:" in capsys.readouterr().err


def test_synth_writes_a_manifest(tmp_path: Path, capsys) -> None:
    exit_code = cli.main(
        ["synth", "--out", str(tmp_path), "--count", "3", "--n-min", "1", "--n-max", "4"]
    )

    assert exit_code == 0
    payload = _last_json(capsys.readouterr().out)
    manifest = Path(payload["manifest"])
    assert manifest.read_text(encoding="utf-8").splitlines()[0] == "image,count"
    assert len(list(tmp_path.glob("scene_*.png"))) == 3


def test_synth_rejects_inverted_count_range(tmp_path: Path, capsys) -> None:
    exit_code = cli.main(["synth", "--out", str(tmp_path), "--n-min", "9", "--n-max", "2"])

    assert exit_code == 2
    assert "Configuration error" in capsys.readouterr().err


def test_train_then_eval_and_export(tmp_path: Path, capsys) -> None:
    data = tmp_path / "data"
    assert cli.main(["synth", "--out", str(data), "--count", "2", "--width", "160"]) == 0
    run = tmp_path / "run"
    assert (
        cli.main(
            [
                "train",
                "--profile",
                "tiny",
                "--out",
                str(run),
                "--max-steps",
                "2",
                "--save-config",
                str(run / "config.json"),
            ]
        )
        == 0
    )
    trained = _last_json(capsys.readouterr().out)
    assert trained["steps"] == 2
    assert (run / "config.json").exists()

    manifest = str(data / "manifest.csv")
    checkpoint = trained["best_checkpoint"]
    assert cli.main(["eval", "--manifest", manifest, "--checkpoint", checkpoint]) == 0
    report = _last_json(capsys.readouterr().out)
    assert report["N"] == 2
    assert set(report) == {"N", "MAE", "MSE", "RMSE", "residuals"}

    assert cli.main(["eval", "--manifest", manifest, "--checkpoint", checkpoint, "--table"]) == 0
    assert "MAE" in capsys.readouterr().out

    out = tmp_path / "emb.csv"
    exit_code = cli.main(
        ["export-embeddings", "--manifest", manifest, "--checkpoint", checkpoint, "--out", str(out)]
    )
    assert exit_code == 0
    assert _last_json(capsys.readouterr().out)["dim"] == 16
    assert len(out.read_text(encoding="utf-8").splitlines()) == 3


def test_eval_with_a_missing_checkpoint_fails_cleanly(tmp_path: Path, capsys) -> None:
    manifest = tmp_path / "manifest.csv"
    manifest.write_text("image,count\n", encoding="utf-8")

    exit_code = cli.main(
        ["eval", "--manifest", str(manifest), "--checkpoint", str(tmp_path / "none.ckpt")]
    )

    assert exit_code == 2
    assert "none.ckpt" in capsys.readouterr().err


def test_train_with_an_unreadable_config(tmp_path: Path, capsys) -> None:
    config = tmp_path / "broken.json"
    config.write_text("{not json", encoding="utf-8")

    assert cli.main(["train", "--config", str(config)]) == 2
    assert "broken.json" in capsys.readouterr().err


def test_gradcheck_exit_code_follows_the_tolerance(monkeypatch, capsys) -> None:
    monkeypatch.setattr(cli, "check_primitives", lambda rng: {"add": 1e-9, "relu": 2e-8})
    monkeypatch.setattr(
        cli,
        "gradcheck_split_counting",
        lambda model, images, counts, rng, coords_per_param: {"a.weight": 3e-7, "b.bias": 5e-5},
    )

    assert cli.main(["gradcheck"]) == 0
    payload = _last_json(capsys.readouterr().out)
    assert payload["passed"] is True
    assert payload["worst_parameter"] == "b.bias"
    assert payload["max_relative_error"] == 5e-5

    assert cli.main(["gradcheck", "--tolerance", "1e-5"]) == 1
    assert _last_json(capsys.readouterr().out)["passed"] is False


def test_gradcheck_on_the_tiny_profile_passes(capsys) -> None:
    assert cli.main(["gradcheck", "--coords", "1", "--seed", "2"]) == 0

    payload = _last_json(capsys.readouterr().out)
    assert payload["passed"] is True
    assert payload["max_relative_error"] < 1e-4
    tiny = build_model(make_train_config("tiny").run_model_config())
    assert payload["parameters_checked"] == len(tiny.params)


def test_verify_identity_rejects_a_negative_seed(capsys) -> None:
    assert cli.main(["verify-identity", "--samples", "10", "--seed", "-1"]) == 2
    assert "non-negative" in capsys.readouterr().err


def test_ablate_trains_each_variant_for_one_step(tmp_path: Path, capsys) -> None:
    exit_code = cli.main(
        ["ablate", "--profile", "tiny", "--out", str(tmp_path), "--max-steps", "1", "--table"]
    )

    assert exit_code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split() == ["config", "parameters", "steps", "final_L_C", "val_mae"]
    rows = lines[1:]
    assert [row.split()[0] for row in rows] == ["baseline", "w/o", "w/o", "w/o", "w/o", "proxy"]
    assert all(int(row.split()[-3]) == 1 for row in rows)
    assert all(math.isfinite(float(row.split()[-2])) for row in rows)
    baseline = int(rows[0].split()[-4])
    assert all(int(row.split()[-4]) < baseline for row in rows[1:5])
    assert int(rows[5].split()[-4]) == baseline
    for slug in ("baseline", "wo_raw", "wo_16x16", "wo_8x8", "wo_4x4", "proxy_off"):
        assert (tmp_path / slug / "final.ckpt").exists()

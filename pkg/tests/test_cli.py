import json

import pytest

from facetouch.cli import layer_config, main

TINY = ["--set", "encoder.input_size=32", "--set", "encoder.widths=[8,16]", "--epochs", "1", "--batch-size", "32"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--n", 160, "--size", 32, "--seed", 7, "--out", root / "d") == 0
    assert run("train", "--data", root / "d", "--seed", 7, *TINY, "--out", root / "r") == 0
    assert run("gen-data", "--scenes", 4, "--figures", 1, 3, "--seed", 2, "--out", root / "s") == 0
    return root


def _primary(out):
    m = json.loads((out / "manifest.json").read_text())
    return m, {name: (out / name).read_bytes() for name in m["outputs"]}


@pytest.mark.parametrize("argv", [
    ["gen-data", "--n", 60, "--size", 32, "--seed", 3],
    ["gen-data", "--scenes", 3, "--seed", 1],
    ["train", "--data", "{d}", "--regime", "sl", "--loss", "focal", "--seed", 1, *TINY],
    ["train", "--data", "{d}", "--loss", "supcon-logout", "--seed", 1, *TINY],
    ["eval", "--ckpt", "{r}/model.ckpt", "--data", "{d}"],
    ["infer", "--ckpt", "{r}/model.ckpt", "--image", "{s}/frame_00001.pgm", "--truth", "{s}/truth.csv", "--index", 1],
    ["infer", "--ckpt", "{r}/model.ckpt", "--image", "{d}/images/000003.pgm"],
    ["stream", "--ckpt", "{r}/model.ckpt", "--frames", "{s}", "--attention"],
    ["gradcheck", "--seeds", 1],
    ["gradcam", "--ckpt", "{r}/model.ckpt", "--data", "{d}", "--count", 3],
], ids=lambda a: "-".join(str(x) for x in a[:2]))
def test_replay_from_manifest_is_byte_identical(work, tmp_path, argv):
    argv = [str(a).format(d=work / "d", r=work / "r", s=work / "s") for a in argv]
    assert run(*argv, "--out", tmp_path / "a") == 0
    assert run(argv[0], "--manifest", tmp_path / "a/manifest.json", "--out", tmp_path / "b") == 0
    ma, fa = _primary(tmp_path / "a")
    mb, fb = _primary(tmp_path / "b")
    assert fa and fa == fb and ma["outputs"] == mb["outputs"]


def test_gen_data_rerun_gives_identical_manifest(tmp_path):
    for name in "ab":
        assert run("gen-data", "--n", 50, "--size", 32, "--seed", 7, "--out", tmp_path / name) == 0
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()


def test_train_then_eval_reports_accuracy(work, tmp_path):
    assert run("eval", "--ckpt", work / "r/model.ckpt", "--data", work / "d", "--out", tmp_path / "e") == 0
    assert "accuracy" in json.loads((tmp_path / "e/metrics.json").read_text())


def test_manifest_echoes_effective_config(work):
    m = json.loads((work / "r/manifest.json").read_text())
    assert m["config"]["encoder"]["widths"] == [8, 16] and m["config"]["epochs"] == 1
    assert m["config"]["seed"] == 7 and m["dataset_hash"]


def test_flags_override_file_and_sets(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 5, "encoder": {"widths": [4]}, "augment.brightness": 0.3}))
    tree = layer_config({"epochs": 1, "encoder": {"widths": [1, 2]}, "augment": {"brightness": 0.1}},
                        str(cfg), ["epochs=7"], {"epochs": 9})
    assert tree == {"epochs": 9, "encoder": {"widths": [4]}, "augment": {"brightness": 0.3}}


@pytest.mark.parametrize("override,field", [
    ("encoder.first_stride=3", "encoder.first_stride"),
    ("encoder.nope=1", "encoder.nope"),
    ("epochs=\"ten\"", "epochs"),
    ("augment.translate=0.7", "augment.translate"),
    ("focal_gamma=-1", "focal_gamma"),
])
def test_invalid_config_exits_3_with_field(work, tmp_path, capsys, override, field):
    extra = ["--loss", "focal", "--regime", "sl"] if "focal" in override else []
    code = run("train", "--data", work / "d", "--set", override, *extra, "--out", tmp_path / "x")
    err = capsys.readouterr().err.strip().splitlines()
    assert code == 3
    payload = json.loads(err[-1])
    assert payload["error"] == "config" and payload["field"].startswith(field)
    assert not (tmp_path / "x").exists()


def test_supcon_loss_with_sl_regime_is_config_error(work, tmp_path):
    assert run("train", "--data", work / "d", "--regime", "sl", "--loss", "supcon-printed", "--out", tmp_path / "x") == 3


@pytest.mark.parametrize("argv", [["train", "--bogus", "--out", "x"], ["frobnicate"], ["eval", "--out", "x"], []])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert "usage" in capsys.readouterr().err


def test_runtime_error_is_one_json_line(tmp_path, capsys):
    code = run("eval", "--ckpt", tmp_path / "missing.ckpt", "--data", tmp_path, "--out", tmp_path / "e")
    lines = capsys.readouterr().err.strip().splitlines()
    assert code == 1 and len(lines) == 1 and json.loads(lines[0])["message"]


def test_gradcheck_exit_code_follows_tolerance(tmp_path):
    assert run("gradcheck", "--seeds", 1, "--out", tmp_path / "ok") == 0
    assert run("gradcheck", "--seeds", 1, "--tolerance", 1e-15, "--out", tmp_path / "strict") == 1
    report = json.loads((tmp_path / "strict/gradcheck.json").read_text())
    assert report["failed"]


def test_writes_stay_under_out(work, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    before = sorted(p.name for p in (work / "s").iterdir())
    assert run("stream", "--ckpt", work / "r/model.ckpt", "--frames", work / "s", "--out", "o") == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["o"]
    assert sorted(p.name for p in (work / "s").iterdir()) == before


def test_replay_refuses_other_command(work, tmp_path):
    assert run("eval", "--manifest", work / "r/manifest.json", "--out", tmp_path / "x") == 3

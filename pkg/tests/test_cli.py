import json
import re
import subprocess
import sys

import numpy as np
import pytest

from lidia import nn
from lidia.cli import COMMANDS, main
from lidia.image_io import load_image, psnr, save_image
from lidia.model_io import load_model, save_model
from lidia.network import init_params
from lidia.synthetic import scene_card, tiled_texture
from lidia.training import noisy_copy

from conftest import TINY

TINY_FLAGS = ["--patch-side", "5", "--k", "6", "--features", "16", "--window", "11"]


@pytest.fixture
def workspace(tmp_path):
    model = tmp_path / "tiny.lidia"
    save_model(init_params(TINY, 0, scheme="random"), model)
    clean = tiled_texture(32, seed=1)
    save_image(clean, tmp_path / "clean.pgm")
    save_image(noisy_copy(clean, 25, 3), tmp_path / "noisy.pgm")
    save_image(np.stack([clean[:, :, 0]] * 3, axis=-1), tmp_path / "colour.ppm")
    folder = tmp_path / "set"
    folder.mkdir()
    for i in range(3):
        save_image(tiled_texture(24, seed=10 + i), folder / f"im{i}.pgm")
    (folder / "notes.txt").write_text("not an image")
    return tmp_path


def test_denoise_writes_same_dims_and_psnr(workspace, capsys):
    w = workspace
    rc = main(["denoise", "--input", str(w / "noisy.pgm"), "--output", str(w / "out.pgm"),
               "--model", str(w / "tiny.lidia"), "--reference", str(w / "clean.pgm")])
    assert rc == 0
    assert load_image(w / "out.pgm").shape == (32, 32, 1)
    printed = float(re.search(r"PSNR (\S+)", capsys.readouterr().out).group(1))
    model = load_model(w / "tiny.lidia")
    clean, noisy = load_image(w / "clean.pgm"), load_image(w / "noisy.pgm")
    res = model.denoise(noisy, reference=clean)
    assert abs(printed - res.psnr) < 1e-9
    assert abs(printed - psnr(res.image, clean)) < 1e-9


def test_colour_image_with_gray_model_is_data_error(workspace, capsys):
    w = workspace
    rc = main(["denoise", "--input", str(w / "colour.ppm"), "--output", str(w / "out.ppm"),
               "--model", str(w / "tiny.lidia")])
    assert rc == 2
    assert "channel" in capsys.readouterr().err
    assert not (w / "out.ppm").exists()
    assert not any(p.name.startswith(".out") for p in w.iterdir())


def test_bad_inputs_exit_codes(workspace, capsys):
    w = workspace
    (w / "broken.pgm").write_bytes(b"P5\n4 4\n255\n")
    assert main(["denoise", "--input", str(w / "broken.pgm"), "--output", str(w / "o.pgm"),
                 "--model", str(w / "tiny.lidia")]) == 2
    (w / "bad.lidia").write_bytes(b"NOTAMODEL")
    assert main(["denoise", "--input", str(w / "noisy.pgm"), "--output", str(w / "o.pgm"),
                 "--model", str(w / "bad.lidia")]) == 2
    assert main(["denoise", "--input", str(w / "noisy.pgm")]) == 1
    assert main(["denoise", "--bogus"]) == 1
    assert main(["frobnicate"]) == 1
    assert main([]) == 1
    assert not (w / "o.pgm").exists()


def test_config_file_overlay(workspace, capsys):
    w = workspace
    cfg = w / "cfg.json"
    cfg.write_text(json.dumps({"input": str(w / "noisy.pgm"), "output": str(w / "fromfile.pgm"),
                               "model": str(w / "tiny.lidia")}))
    assert main(["denoise", "--config", str(cfg)]) == 0
    assert (w / "fromfile.pgm").exists()
    # flags override the file
    assert main(["denoise", "--config", str(cfg), "--output", str(w / "fromflag.pgm")]) == 0
    assert (w / "fromflag.pgm").exists()
    cfg.write_text(json.dumps({"input": "x", "wat": 1}))
    assert main(["denoise", "--config", str(cfg)]) == 1
    assert "wat" in capsys.readouterr().err
    cfg.write_text(json.dumps({"threads": "four"}))
    assert main(["denoise", "--config", str(cfg)]) == 1


def test_help_documents_every_flag_with_default(capsys):
    for cmd, opts in COMMANDS.items():
        with pytest.raises(SystemExit) as ex:
            main([cmd, "--help"])
        assert ex.value.code == 0
        text = " ".join(capsys.readouterr().out.split())
        for name, (_, default, _) in opts.items():
            flag = "--" + name.replace("_", "-")
            assert flag in text
            own = r"(?:(?!\s--[a-z]).)*?"  # stay inside this flag's help entry
            assert re.search(r"\s" + re.escape(flag) + r"\b" + own + r"\(default: " + re.escape(str(default)) + r"\)", text), flag


def test_help_defaults_follow_the_library():
    assert COMMANDS["train"]["adam_lr"][1] == 1e-2
    assert COMMANDS["train"]["sgd_lr"][1] == 1e-3
    assert COMMANDS["train"]["batch_images"][1] == 4
    assert COMMANDS["train"]["window"][1] == 37 and COMMANDS["train"]["k"][1] == 14
    assert COMMANDS["adapt-internal"]["epochs"][1] == 5


def test_adapt_zero_epochs_keeps_model(workspace):
    w = workspace
    assert main(["adapt-external", "--model", str(w / "tiny.lidia"), "--related", str(w / "clean.pgm"),
                 "--model-out", str(w / "same.lidia"), "--epochs", "0"]) == 0
    assert (w / "same.lidia").read_bytes() == (w / "tiny.lidia").read_bytes()
    assert main(["adapt-internal", "--model", str(w / "tiny.lidia"), "--input", str(w / "noisy.pgm"),
                 "--output", str(w / "int.pgm"), "--model-out", str(w / "same2.lidia"), "--epochs", "0"]) == 0
    assert (w / "same2.lidia").read_bytes() == (w / "tiny.lidia").read_bytes()


def _run_twice(args, outputs):
    got = []
    for _ in range(2):
        assert main(args) == 0
        got.append([p.read_bytes() for p in outputs])
    return got


def test_same_seed_same_csv(workspace, capsys):
    w = workspace
    args = ["adapt-internal", "--model", str(w / "tiny.lidia"), "--input", str(w / "noisy.pgm"),
            "--output", str(w / "a.pgm"), "--reference", str(w / "clean.pgm"), "--epochs", "1",
            "--log", str(w / "a.csv"), "--seed", "3"]
    first, second = _run_twice(args, [w / "a.csv", w / "a.pgm"])
    assert first == second
    text = (w / "a.csv").read_text()
    assert "# seed=3" in text and "# epochs=1" in text and "# lr=0.001" in text
    assert text.splitlines()[-3] == "epoch,step,loss,val_psnr"


def test_train_command(workspace, capsys):
    w = workspace
    args = ["train", "--train", str(w / "clean.pgm"), "--model-out", str(w / "t.lidia"), "--epochs", "2",
            "--batch-images", "1", "--crop-size", "32", "--log", str(w / "t.csv"), *TINY_FLAGS]
    first, second = _run_twice(args, [w / "t.csv", w / "t.lidia"])
    assert first == second
    assert load_model(w / "t.lidia").desc == TINY
    out = capsys.readouterr().out
    assert "epoch 1" in out and "epoch 2" in out
    assert main(args[:-8] + ["--blind"] + args[-8:]) == 0


def test_eval_folder(workspace, capsys):
    w = workspace
    assert main(["eval", "--model", str(w / "tiny.lidia"), "--images", str(w / "set"), "--csv", str(w / "e.csv")]) == 0
    rows = [l for l in (w / "e.csv").read_text().splitlines() if not l.startswith("#")]
    assert rows[0] == "image,noisy_psnr,psnr,status"
    assert [r.split(",")[0] for r in rows[1:]] == ["im0.pgm", "im1.pgm", "im2.pgm", "mean"]
    vals = [float(r.split(",")[2]) for r in rows[1:]]
    assert vals[-1] == pytest.approx(np.mean(vals[:-1]), abs=2e-6)


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") >= 5 and "[FAIL]" not in out


def test_selftest_catches_injected_backward_bug(monkeypatch, capsys):
    real = nn.sl_backward

    def broken(upstream, Z, p):
        dZ, dW1, dW2, dB = real(upstream, Z, p)
        return dZ, dW1, dW2 * 1.5, dB

    monkeypatch.setattr(nn, "sl_backward", broken)
    assert main(["selftest"]) == 3
    out = capsys.readouterr().out
    assert "[FAIL] gradient checks" in out
    assert "separable linear: W2" in out


def test_module_entry_point(workspace):
    proc = subprocess.run([sys.executable, "-m", "lidia", "eval", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "--images" in proc.stdout

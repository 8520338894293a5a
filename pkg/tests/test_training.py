import math
from pathlib import Path

import numpy as np
import pytest

from lidia import nn, training
from lidia.image_io import load_image, psnr, save_image
from lidia.model_io import dumps, load_model
from lidia.network import ArchDescriptor, init_params
from lidia.synthetic import scene_card, tiled_texture
from lidia.training import (
    AdaptConfig,
    TrainConfig,
    TrainingDivergedError,
    _crop_plan,
    adapt_external,
    adapt_internal,
    csv_text,
    draw_sigmas,
    evaluate,
    image_seed,
    noisy_copy,
    train_step,
    train_universal,
)

from conftest import TINY

CHI2_95_19DOF = 30.1435


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(adam_lr=0)
    with pytest.raises(ValueError):
        TrainConfig(sigma_range=(30, 10))
    with pytest.raises(ValueError):
        TrainConfig(switch_fraction=1.5)
    with pytest.raises(ValueError):
        AdaptConfig(mode="external")
    with pytest.raises(ValueError):
        AdaptConfig(mode="sideways")
    assert TrainConfig(epochs=10).adam_epochs == 8
    assert TrainConfig().batch_images == 4 and TrainConfig().adam_lr == 1e-2 and TrainConfig().sgd_lr == 1e-3
    assert AdaptConfig().epochs == 5 and AdaptConfig().learning_rate == 1e-3


def test_step_zero_loss_is_noise_power():
    m = init_params(TINY, 0, dtype=np.float64)
    clean = scene_card(64)
    loss = train_step(m, [noisy_copy(clean, 25, 3)], [clean], training=True)
    assert loss == pytest.approx((25 / 255) ** 2, rel=0.1)


def test_blind_sigma_is_uniform():
    cfg = TrainConfig(sigma_range=(10, 30), seed=4)
    draws = np.concatenate([draw_sigmas(cfg, e, s, 4) for e in range(50) for s in range(50)])
    assert draws.size == 10_000 and draws.min() >= 10 and draws.max() < 30
    counts, _ = np.histogram(draws, bins=20, range=(10, 30))
    chi2 = float(np.sum((counts - 500) ** 2 / 500))
    assert chi2 < CHI2_95_19DOF
    np.testing.assert_array_equal(draw_sigmas(TrainConfig(sigma=15), 0, 0, 3), 15.0)


def test_one_small_step_decreases_loss():
    decreased = 0
    for t in range(20):
        m = init_params(TINY, t, dtype=np.float64)
        clean = scene_card(64)[t : t + 24, t : t + 24]
        noisy = noisy_copy(clean, 25, t)
        before = train_step(m, [noisy], [clean], training=True)
        new, _ = nn.optimizer_step(m.param_arrays(), m.grads(), nn.OptimizerState("sgd", 1e-5, momentum=0.0))
        m.set_params(new)
        decreased += train_step(m, [noisy], [clean], training=True) < before
    assert decreased >= 19


def test_crop_plan_interleaves_distinct_images():
    images = [np.zeros((40, 40, 1))] * 4
    plan = _crop_plan(images, 20, epoch=0, seed=1)
    assert len(plan) == 16
    for b in range(0, 16, 4):
        assert len({i for i, _, _ in plan[b : b + 4]}) == 4
    assert all(0 <= t <= 20 and 0 <= l <= 20 for _, t, l in plan)
    assert plan != _crop_plan(images, 20, epoch=1, seed=1)


def test_training_is_reproducible_and_thread_independent():
    img = [scene_card(32)]
    cfg = TrainConfig(epochs=2, batch_images=1, crop_size=32, seed=5)
    a = train_universal(init_params(TINY, 0), img, cfg)
    b = train_universal(init_params(TINY, 0), img, TrainConfig(epochs=2, batch_images=1, crop_size=32, seed=5, threads=4))
    assert [r.loss for r in a.history] == [r.loss for r in b.history]
    assert dumps(a.model) == dumps(b.model)
    c = train_universal(init_params(TINY, 0), img, TrainConfig(epochs=2, batch_images=1, crop_size=32, seed=6))
    assert dumps(c.model) != dumps(a.model)


def test_adam_then_sgd(monkeypatch):
    kinds = []
    real = nn.optimizer_step

    def spy(params, grads, state):
        kinds.append(state.kind)
        return real(params, grads, state)

    monkeypatch.setattr(training.nn, "optimizer_step", spy)
    train_universal(init_params(TINY, 0), [scene_card(32)], TrainConfig(epochs=5, batch_images=1, crop_size=32))
    assert kinds == ["adam"] * 4 + ["sgd"]


def test_training_does_not_mutate_input_model():
    m = init_params(TINY, 0)
    before = dumps(m)
    train_universal(m, [scene_card(32)], TrainConfig(epochs=1, batch_images=1, crop_size=32))
    assert dumps(m) == before


def test_divergence_raises_with_last_good(monkeypatch, tmp_path):
    calls = []
    real = training.train_step

    def flaky(*a, **k):
        calls.append(1)
        return real(*a, **k) if len(calls) < 3 else float("nan")

    monkeypatch.setattr(training, "train_step", flaky)
    ckpt = tmp_path / "last.lidia"
    with pytest.raises(TrainingDivergedError) as err:
        train_universal(init_params(TINY, 0), [scene_card(32)],
                        TrainConfig(epochs=5, batch_images=1, crop_size=32, checkpoint_path=str(ckpt)))
    assert err.value.last_good is not None
    assert isinstance(err.value, FloatingPointError)
    assert dumps(load_model(ckpt)) == dumps(err.value.last_good)


def test_checkpoints_and_log(tmp_path):
    ckpt = tmp_path / "ck.lidia"
    seen = []
    res = train_universal(
        init_params(TINY, 0), [scene_card(32)],
        TrainConfig(epochs=2, batch_images=1, crop_size=32, checkpoint_every=1, checkpoint_path=str(ckpt)),
        val_images=[scene_card(32)], on_epoch=seen.append,
    )
    assert ckpt.exists() and dumps(load_model(ckpt)) == dumps(res.model)
    assert [r.epoch for r in seen] == [1, 2] and all(r.val_psnr is not None for r in seen)
    text = csv_text(res.history, {"seed": "0"})
    lines = text.splitlines()
    assert lines[0] == "# seed=0" and lines[1] == "epoch,step,loss,val_psnr" and len(lines) == 4


def test_empty_dataset_and_small_crops():
    with pytest.raises(ValueError):
        train_universal(init_params(TINY, 0), [], TrainConfig())
    with pytest.raises(ValueError):
        train_universal(init_params(TINY, 0), [np.zeros((8, 8, 1))], TrainConfig(epochs=1))


def test_zero_epoch_adaptations_are_identity():
    m = init_params(TINY, 1, scheme="random")
    clean = tiled_texture(32)
    ext = adapt_external(m, [clean], AdaptConfig(mode="external", epochs=0, related_paths=("x",)))
    assert dumps(ext.model) == dumps(m)
    noisy = noisy_copy(clean, 25, 0)
    res = adapt_internal(m, noisy, AdaptConfig(epochs=0))
    assert res.image.tobytes() == m.denoise(noisy).image.tobytes()
    assert dumps(res.model) == dumps(m)


def test_adapt_internal_keeps_caller_model_and_target():
    m = init_params(TINY, 0)
    before = dumps(m)
    clean = tiled_texture(32)
    noisy = noisy_copy(clean, 25, 1)
    res = adapt_internal(m, noisy, AdaptConfig(epochs=2, crop_size=32), reference=clean)
    assert dumps(m) == before
    assert dumps(res.model) != before
    assert res.universal.tobytes() == m.denoise(noisy).image.tobytes()
    assert [r.epoch for r in res.history] == [0, 1, 2]
    assert res.history[-1].val_psnr == pytest.approx(psnr(res.image, clean), abs=1e-12)


def test_adapt_internal_detects_target_change(monkeypatch):
    m = init_params(TINY, 0)
    noisy = noisy_copy(tiled_texture(32), 25, 1)
    real = training._fit

    def tamper(model, inputs, targets, **kw):
        targets[0][0, 0, 0] += 0.5
        return real(model, inputs, targets, **kw)

    monkeypatch.setattr(training, "_fit", tamper)
    with pytest.raises(RuntimeError, match="target changed"):
        adapt_internal(m, noisy, AdaptConfig(epochs=1, crop_size=32))


@pytest.fixture(scope="module")
def warm_model():
    cfg = TrainConfig(epochs=20, batch_images=1, crop_size=64, seed=0)
    return train_universal(init_params(TINY, 0), [scene_card(64)], cfg).model


def test_self_adaptation_does_not_hurt(warm_model):
    for s in range(2):
        clean = tiled_texture(32, seed=s)
        noisy = noisy_copy(clean, 25, 100 + s)
        before = warm_model.denoise(noisy, reference=clean).psnr
        res = adapt_external(warm_model, [clean], AdaptConfig(mode="external", epochs=5, related_paths=("self",),
                                                               crop_size=32, seed=s),
                             noisy=noisy, reference=clean)
        after = res.model.denoise(noisy, reference=clean).psnr
        assert after >= before
        assert res.history[0].val_psnr == before


def _write_set(tmp_path, count=3):
    paths = []
    for i in range(count):
        p = tmp_path / f"img{i}.pgm"
        save_image(tiled_texture(24, seed=i), p)
        paths.append(str(p))
    return paths


def test_evaluate_table(tmp_path):
    m = init_params(TINY, 0, scheme="random")
    paths = _write_set(tmp_path)
    a = evaluate(m, paths, 25, 7)
    b = evaluate(m, paths, 25, 7)
    assert a.to_csv() == b.to_csv()
    assert len(a.rows) == 3
    for row, p in zip(a.rows, paths):
        clean = load_image(p)
        noisy = noisy_copy(clean, 25, image_seed(7, Path(p).name))
        out = m.denoise(noisy).image
        mse = float(np.mean((out - clean) ** 2))
        assert abs(row.psnr - 10 * math.log10(1 / mse)) < 1e-9
        assert row.noisy_psnr == psnr(noisy, clean)
    assert a.mean_psnr == pytest.approx(np.mean([r.psnr for r in a.rows]), abs=1e-12)
    lines = a.to_csv(config={"sigma": "25"}).splitlines()
    assert lines[0] == "# sigma=25" and lines[1] == "image,noisy_psnr,psnr,status" and lines[-1].startswith("mean,")
    assert "runtime_s" in a.to_csv(timing=True)


def test_evaluate_single_image_and_bad_file(tmp_path):
    m = init_params(TINY, 0, scheme="random")
    paths = _write_set(tmp_path, 1)
    one = evaluate(m, paths, 25, 0)
    assert one.mean_psnr == one.rows[0].psnr
    bad = tmp_path / "broken.pgm"
    bad.write_bytes(b"P5\n9 9\n255\n\x00")
    rep = evaluate(m, paths + [str(bad), str(tmp_path / "missing.pgm")], 25, 0)
    assert [r.status.split(":")[0] for r in rep.rows] == ["ok", "skipped", "skipped"]
    assert rep.mean_psnr == one.mean_psnr
    with pytest.raises(ValueError):
        evaluate(m, [], 25, 0)

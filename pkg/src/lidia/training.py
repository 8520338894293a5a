"""Supervised training, external/internal adaptation and evaluation.

Training runs on random crops.  An epoch visits every image with
``ceil(H/c) * ceil(W/c)`` crops; crops are interleaved across images so that a
batch holds distinct images whenever the dataset allows.  Every random draw
comes from a stream derived from ``(seed, purpose, epoch, ...)``, so runs are
reproducible and independent of thread count.
"""

from __future__ import annotations

import hashlib
import io
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .image_io import NoiseSpec, add_awgn, as_plane, load_image, psnr
from .model_io import save_model
from .network import LidiaNet, build_geometry
from .rng import Xoshiro256pp, derive_seed

log = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "step", "loss", "val_psnr")


class TrainingDivergedError(FloatingPointError):
    """Raised on a non-finite loss; ``last_good`` holds the parameters before the bad step."""

    def __init__(self, message, last_good: LidiaNet | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_images: int = 4
    crop_size: int = 64
    sigma: float = 25.0
    sigma_range: tuple[float, float] | None = None  # blind training, e.g. (10, 30)
    adam_lr: float = 1e-2
    sgd_lr: float = 1e-3
    sgd_momentum: float = 0.9
    switch_fraction: float = 0.8
    seed: int = 0
    val_sigma: float | None = None
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_images < 1:
            raise ValueError("epochs must be >= 0 and batch_images >= 1")
        if not (self.adam_lr > 0 and self.sgd_lr > 0):
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.switch_fraction <= 1.0:
            raise ValueError("switch_fraction must lie in [0, 1]")
        if self.sigma_range is not None:
            lo, hi = self.sigma_range
            if not 0 <= lo <= hi:
                raise ValueError(f"sigma range must be non-empty and non-negative, got {self.sigma_range}")
        elif self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    @property
    def adam_epochs(self) -> int:
        return int(round(self.switch_fraction * self.epochs))


@dataclass
class AdaptConfig:
    mode: str = "internal"  # or "external"
    epochs: int = 5
    sigma: float = 25.0
    related_paths: Sequence[str] = ()
    learning_rate: float = 1e-3
    seed: int = 0
    crop_size: int = 32
    batch_images: int = 1
    freeze_batchnorm: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.mode not in ("internal", "external"):
            raise ValueError(f"mode must be 'internal' or 'external', got {self.mode!r}")
        if self.mode == "external" and not self.related_paths:
            raise ValueError("external adaptation needs at least one related image")
        if self.epochs < 0 or not self.learning_rate > 0:
            raise ValueError("epochs must be >= 0 and learning_rate > 0")


@dataclass
class EpochRecord:
    epoch: int
    step: int
    loss: float
    val_psnr: float | None

    def csv_row(self) -> str:
        v = "" if self.val_psnr is None else f"{self.val_psnr:.6f}"
        loss = "" if math.isnan(self.loss) else f"{self.loss:.9e}"
        return f"{self.epoch},{self.step},{loss},{v}"


@dataclass
class TrainResult:
    model: LidiaNet
    history: list[EpochRecord] = field(default_factory=list)


def csv_text(history: Sequence[EpochRecord], config: dict | None = None) -> str:
    """Loss log as CSV, with the resolved configuration echoed as ``#`` comments."""
    buf = io.StringIO()
    for k, v in (config or {}).items():
        buf.write(f"# {k}={v}\n")
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for r in history:
        buf.write(r.csv_row() + "\n")
    return buf.getvalue()


def load_dataset(paths) -> list[np.ndarray]:
    images = [load_image(p) for p in paths]
    if not images:
        raise ValueError("dataset is empty")
    return images


# ---------------------------------------------------------------- schedule


def _crop_plan(images, crop: int, epoch: int, seed: int) -> list[tuple[int, int, int]]:
    """(image index, top, left) for every crop of one epoch, interleaved across images."""
    rng = Xoshiro256pp(derive_seed(seed, 0xC409, epoch))
    per_image = []
    for i, im in enumerate(images):
        h, w = im.shape[:2]
        count = math.ceil(h / crop) * math.ceil(w / crop)
        tops = rng.integers(h - crop + 1, count)
        lefts = rng.integers(w - crop + 1, count)
        per_image.append([(i, int(t), int(l)) for t, l in zip(tops, lefts)])
    plan = []
    rounds = max(len(p) for p in per_image)
    for r in range(rounds):
        order = np.argsort(rng.random(len(images)), kind="stable")
        plan += [per_image[i][r] for i in order if r < len(per_image[i])]
    return plan


def _effective_crop(images, crop: int, min_side: int) -> int:
    c = min([crop] + [min(im.shape[:2]) for im in images])
    if c < min_side:
        raise ValueError(f"crop size {c} is smaller than twice the patch side ({min_side})")
    return c


def draw_sigmas(cfg: TrainConfig, epoch: int, step: int, count: int) -> np.ndarray:
    if cfg.sigma_range is None:
        return np.full(count, float(cfg.sigma))
    lo, hi = cfg.sigma_range
    return Xoshiro256pp(derive_seed(cfg.seed, 0x5167, epoch, step)).uniform(lo, hi, count)


def noisy_copy(clean: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    return add_awgn(clean, NoiseSpec(sigma=float(sigma), seed=seed))


def train_step(model: LidiaNet, noisy: list, clean: list, *, training: bool, threads: int = 1) -> float:
    """Forward + backward on one batch; gradients are left in ``model.params[*].grad``."""
    geom = build_geometry(noisy, model.desc, threads=threads)
    target = np.concatenate([as_plane(c).reshape(-1) for c in clean]).astype(model.dtype)
    model.zero_grad()
    out = model.forward(geom, training=training)
    diff = out.astype(np.float64) - target
    loss = float(np.mean(diff**2))
    if not math.isfinite(loss):
        return loss
    model.backward((2.0 * diff / diff.size).astype(model.dtype))
    return loss


def _fit(
    model: LidiaNet,
    inputs: list,
    targets: list,
    *,
    epochs: int,
    crop_size: int,
    batch_images: int,
    seed: int,
    lr_for_epoch: Callable[[int], tuple[str, float]],
    sigma_for: Callable[[int, int, int], np.ndarray],
    bn_training: bool,
    momentum: float = 0.9,
    validate: Callable[[LidiaNet], float | None] | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    checkpoint: Callable[[LidiaNet, int], None] | None = None,
    epoch_hook: Callable[[int], None] | None = None,
    threads: int = 1,
) -> list[EpochRecord]:
    """Shared optimisation loop.  ``inputs[i]`` is noised and mapped towards ``targets[i]``."""
    crop = _effective_crop(inputs, crop_size, 2 * model.desc.patch_side)
    history = []
    state = None
    step = 0
    for epoch in range(epochs):
        if epoch_hook is not None:
            epoch_hook(epoch)
        kind, lr = lr_for_epoch(epoch)
        if state is None or state.kind != kind:
            state = nn.OptimizerState(kind, lr, momentum=momentum)
        plan = _crop_plan(inputs, crop, epoch, seed)
        losses = []
        for b0 in range(0, len(plan), batch_images):
            batch = plan[b0 : b0 + batch_images]
            sigmas = sigma_for(epoch, step, len(batch))
            noisy, clean = [], []
            for j, (i, t, l) in enumerate(batch):
                src = inputs[i][t : t + crop, l : l + crop]
                noisy.append(noisy_copy(src, sigmas[j], derive_seed(seed, 0x7015E, epoch, step, j)))
                clean.append(targets[i][t : t + crop, l : l + crop])
            last_good = model.copy()
            loss = train_step(model, noisy, clean, training=bn_training, threads=threads)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch + 1}, step {step + 1}", last_good)
            new, state = nn.optimizer_step(model.param_arrays(), model.grads(), state)
            model.set_params(new)
            losses.append(loss)
            step += 1
        val = validate(model) if validate is not None else None
        rec = EpochRecord(epoch + 1, step, float(np.mean(losses)) if losses else float("nan"), val)
        history.append(rec)
        log.info("epoch %d step %d loss %.6e val_psnr %s", rec.epoch, rec.step, rec.loss, rec.val_psnr)
        if on_epoch is not None:
            on_epoch(rec)
        if checkpoint is not None:
            checkpoint(model, epoch + 1)
    return history


# ------------------------------------------------------------ public entry


def make_validator(images, sigma: float, seed: int, threads: int = 1):
    if not images:
        return None
    noisy = [noisy_copy(im, sigma, derive_seed(seed, 0x7A1, i)) for i, im in enumerate(images)]

    def validate(model: LidiaNet) -> float:
        return float(np.mean([model.denoise(y, reference=x, threads=threads).psnr for y, x in zip(noisy, images)]))

    return validate


def train_universal(
    model: LidiaNet,
    images: list,
    cfg: TrainConfig,
    *,
    val_images: list | None = None,
    on_epoch=None,
) -> TrainResult:
    """Supervised training on clean images with synthetic noise (Adam, then SGD)."""
    if not images:
        raise ValueError("dataset is empty")
    model = model.copy()
    images = [as_plane(im) for im in images]
    val_sigma = cfg.val_sigma if cfg.val_sigma is not None else (
        cfg.sigma if cfg.sigma_range is None else 0.5 * sum(cfg.sigma_range)
    )
    checkpoint = None
    if cfg.checkpoint_every and cfg.checkpoint_path:
        def checkpoint(m, epoch):
            if epoch % cfg.checkpoint_every == 0:
                save_model(m, cfg.checkpoint_path)

    def schedule(epoch):
        return ("adam", cfg.adam_lr) if epoch < cfg.adam_epochs else ("sgd", cfg.sgd_lr)

    try:
        history = _fit(
            model, images, images,
            epochs=cfg.epochs, crop_size=cfg.crop_size, batch_images=cfg.batch_images, seed=cfg.seed,
            lr_for_epoch=schedule,
            sigma_for=lambda e, s, c: draw_sigmas(cfg, e, s, c),
            bn_training=True, momentum=cfg.sgd_momentum,
            validate=make_validator(val_images or [], val_sigma, cfg.seed, cfg.threads),
            on_epoch=on_epoch, checkpoint=checkpoint, threads=cfg.threads,
        )
    except TrainingDivergedError as err:
        if cfg.checkpoint_path and err.last_good is not None:
            save_model(err.last_good, cfg.checkpoint_path)
        raise
    return TrainResult(model, history)


def _adapt(model, inputs, targets, cfg: AdaptConfig, validate, on_epoch, epoch_hook=None) -> TrainResult:
    adapted = model.copy()
    history = []
    if validate is not None:
        history.append(EpochRecord(0, 0, float("nan"), validate(adapted)))
        if on_epoch is not None:
            on_epoch(history[-1])
    history += _fit(
        adapted, inputs, targets,
        epochs=cfg.epochs, crop_size=cfg.crop_size, batch_images=cfg.batch_images, seed=cfg.seed,
        lr_for_epoch=lambda e: ("adam", cfg.learning_rate),
        sigma_for=lambda e, s, c: np.full(c, float(cfg.sigma)),
        bn_training=not cfg.freeze_batchnorm,
        validate=validate, on_epoch=on_epoch, epoch_hook=epoch_hook, threads=cfg.threads,
    )
    return TrainResult(adapted, history)


def adapt_external(model: LidiaNet, related: list, cfg: AdaptConfig, *, noisy=None, reference=None, on_epoch=None) -> TrainResult:
    """Fine-tune on clean related images.  The input model is left untouched.

    With ``noisy`` and ``reference`` given, each epoch logs the PSNR of the
    adapted network on that pair (PSNR-versus-epochs curve).
    """
    if not related:
        raise ValueError("external adaptation needs at least one related image")
    related = [as_plane(im) for im in related]
    validate = None
    if noisy is not None and reference is not None:
        validate = lambda m: m.denoise(noisy, reference=reference, threads=cfg.threads).psnr  # noqa: E731
    return _adapt(model, related, related, cfg, validate, on_epoch)


@dataclass
class InternalAdaptResult:
    model: LidiaNet
    image: np.ndarray
    universal: np.ndarray
    history: list[EpochRecord]


def _digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def adapt_internal(model: LidiaNet, noisy, cfg: AdaptConfig, *, reference=None, on_epoch=None) -> InternalAdaptResult:
    """Fine-tune on the network's own output: minimise ||f(Y_hat + n) - Y_hat||^2, then re-denoise."""
    noisy = as_plane(noisy)
    target = model.denoise(noisy, threads=cfg.threads).image
    digest = _digest(target)

    def check_target(epoch):
        if _digest(target) != digest:
            raise RuntimeError(f"adaptation target changed before epoch {epoch + 1}")

    validate = None
    if reference is not None:
        validate = lambda m: m.denoise(noisy, reference=reference, threads=cfg.threads).psnr  # noqa: E731
    res = _adapt(model, [target], [target], cfg, validate, on_epoch, epoch_hook=check_target)
    check_target(cfg.epochs)
    image = res.model.denoise(noisy, threads=cfg.threads).image if cfg.epochs else target.copy()
    return InternalAdaptResult(res.model, image, target, res.history)


# --------------------------------------------------------------- evaluation


@dataclass
class EvalRow:
    name: str
    noisy_psnr: float | None
    psnr: float | None
    runtime: float | None
    status: str = "ok"


@dataclass
class EvalReport:
    rows: list[EvalRow]
    sigma: float
    seed: int

    @property
    def mean_psnr(self) -> float:
        vals = [r.psnr for r in self.rows if r.status == "ok"]
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self, *, timing: bool = False, config: dict | None = None) -> str:
        buf = io.StringIO()
        for k, v in (config or {}).items():
            buf.write(f"# {k}={v}\n")
        cols = ["image", "noisy_psnr", "psnr", "status"] + (["runtime_s"] if timing else [])
        buf.write(",".join(cols) + "\n")
        for r in self.rows:
            vals = [r.name, _fmt(r.noisy_psnr), _fmt(r.psnr), r.status]
            if timing:
                vals.append("" if r.runtime is None else f"{r.runtime:.3f}")
            buf.write(",".join(vals) + "\n")
        buf.write(",".join(["mean", "", _fmt(self.mean_psnr), "ok"] + ([""] if timing else [])) + "\n")
        return buf.getvalue()


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def image_seed(seed: int, name: str) -> int:
    """Noise seed for one evaluation image; depends on its file name, not on its position."""
    return derive_seed(seed, zlib.crc32(name.encode("utf-8")))


def evaluate(model: LidiaNet, paths, sigma: float, seed: int, *, threads: int = 1) -> EvalReport:
    paths = list(paths)
    if not paths:
        raise ValueError("evaluation set is empty")
    rows = []
    for p in paths:
        name = Path(p).name
        try:
            clean = load_image(p)
        except (OSError, ValueError) as err:
            log.warning("skipping %s: %s", p, err)
            rows.append(EvalRow(name, None, None, None, status=f"skipped: {type(err).__name__}"))
            continue
        noisy = noisy_copy(clean, sigma, image_seed(seed, name))
        t0 = time.perf_counter()
        res = model.denoise(noisy, reference=clean, threads=threads)
        rows.append(EvalRow(name, psnr(noisy, clean), res.psnr, time.perf_counter() - t0))
    return EvalReport(rows, sigma, seed)

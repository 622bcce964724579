"""Training and evaluation pipeline.

One logical thread owns the model, the optimizer and a single
``numpy.random.Generator`` that drives patch sampling and augmentation, so a
run is fully determined by its config and seed.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import imaging
from .checkpoint import Checkpoint, model_tensors
from .models import AttnSRModel, ModelConfig, predict
from .tensor import Parameter, ShapeError, Tensor, record

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    train_manifest: str = ""
    val_manifest: str = ""
    scale: int = 2
    patch_size: int = 48
    batch_size: int = 16
    max_epochs: int = 80
    steps_per_epoch: int = 1000
    lr0: float = 1e-4
    lr_halve_every: int = 10
    early_stop_patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1 or self.batch_size < 1:
            raise ValueError("patch_size and batch_size must be positive")
        if self.patch_size % self.scale:
            raise ValueError(f"patch_size {self.patch_size} must be divisible by scale {self.scale}")
        if (self.patch_size * self.scale) % 4:
            raise ValueError("patch_size * scale must be divisible by 4 for the attention branch")
        if self.steps_per_epoch < 0 or self.max_epochs < 0:
            raise ValueError("steps_per_epoch and max_epochs must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


REQUIRED_RUN_FIELDS = ("scale", "train_manifest", "val_manifest")


def load_run_config(path: Union[str, Path]) -> Tuple[ModelConfig, TrainConfig]:
    """Parse a flat JSON run config whose keys are TrainConfig and ModelConfig fields.

    ``scale`` feeds both configs. Errors name the offending field, or the
    line and column for malformed JSON.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValueError(f"{path}: cannot read config ({exc})") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: top level must be a JSON object")
    return run_config_from_dict(doc, source=str(path))


def run_config_from_dict(doc: dict, source: str = "config") -> Tuple[ModelConfig, TrainConfig]:
    for name in REQUIRED_RUN_FIELDS:
        if name not in doc:
            raise ValueError(f"{source}: missing required field '{name}'")
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(doc) - model_fields - train_fields
    if unknown:
        raise ValueError(f"{source}: unknown field(s) {sorted(unknown)}")
    try:
        mcfg = ModelConfig(**{k: v for k, v in doc.items() if k in model_fields})
        tcfg = TrainConfig(**{k: v for k, v in doc.items() if k in train_fields})
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{source}: {exc}") from exc
    return mcfg, tcfg


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def load_images(manifest: Union[str, Path]) -> List[Tuple[str, np.ndarray]]:
    """Read every image in a manifest as (name, 3-channel HR array)."""
    out = []
    for p in imaging.read_manifest(manifest):
        img = imaging.png_read(p)
        if img.shape[0] == 1:
            img = np.repeat(img, 3, axis=0)
        out.append((p.name, img))
    return out


def sample_patch(
    hr: np.ndarray, r: int, rng: np.random.Generator, patch_size: int = 48
) -> Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Crop an HR patch on the r-grid and synthesize its LR and ILR counterparts.

    Returns ``(lr, ilr, hr)`` with shapes (3,P,P), (3,rP,rP), (3,rP,rP), or
    ``None`` (with a warning) if the image is too small.
    """
    hr = imaging.modcrop(hr, r)
    size = patch_size * r
    _, h, w = hr.shape
    if h < size or w < size:
        logger.warning("image %dx%d smaller than patch %d, skipped", h, w, size)
        return None
    y0 = r * int(rng.integers(0, (h - size) // r + 1))
    x0 = r * int(rng.integers(0, (w - size) // r + 1))
    hp = hr[:, y0 : y0 + size, x0 : x0 + size]
    lr = imaging.quantize(imaging.downscale(hp, r))
    ilr = imaging.quantize(imaging.upscale(lr, r))
    return lr, ilr, hp


def dihedral(a: np.ndarray, k: int) -> np.ndarray:
    """Transform ``k`` in 0..7 of the square's symmetry group: ``k % 4`` quarter
    turns, followed by a horizontal flip when ``k >= 4``."""
    out = np.rot90(a, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment(lr, ilr, hr, rng: np.random.Generator):
    k = int(rng.integers(8))
    return dihedral(lr, k), dihedral(ilr, k), dihedral(hr, k)


def make_batch(images: Sequence[np.ndarray], cfg: TrainConfig, rng: np.random.Generator):
    lrs, ilrs, hrs = [], [], []
    attempts = 0
    while len(lrs) < cfg.batch_size:
        attempts += 1
        if attempts > 100 * cfg.batch_size:
            raise ValueError("no training image is large enough for the patch size")
        sample = sample_patch(images[int(rng.integers(len(images)))], cfg.scale, rng, cfg.patch_size)
        if sample is None:
            continue
        lr, ilr, hr = augment(*sample, rng)
        lrs.append(lr)
        ilrs.append(ilr)
        hrs.append(hr)
    return tuple(np.stack(x).astype(np.float32) for x in (lrs, ilrs, hrs))


# ---------------------------------------------------------------------------
# loss, optimizer, schedule
# ---------------------------------------------------------------------------


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the subgradient at zero is zero."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    sign = np.sign(diff)
    n = diff.size

    def bw(g):
        gp = sign * (g / n)
        return gp, -gp

    return record("l1_loss", np.asarray(np.abs(diff).mean(), dtype=pred.dtype), (pred, target), bw)


class Adam:
    """Adam with bias correction; moments are kept per named parameter."""

    def __init__(self, params: Dict[str, Parameter], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise RuntimeError(f"parameter {name} has no gradient")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {f"adam.m/{k}": v for k, v in self.m.items()}
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return out

    def load(self, t: int, tensors: Dict[str, np.ndarray]) -> None:
        self.t = int(t)
        for k in self.params:
            self.m[k] = np.array(tensors[f"adam.m/{k}"], dtype=self.params[k].dtype)
            self.v[k] = np.array(tensors[f"adam.v/{k}"], dtype=self.params[k].dtype)


def lr_schedule(epoch: int, lr0: float = 1e-4, halve_every: int = 10) -> float:
    """Step decay: ``lr0 * 0.5 ** (epoch // halve_every)`` for 0-based ``epoch``."""
    return lr0 * 0.5 ** (epoch // halve_every)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    rows: List[Tuple[str, float, float]]
    failures: List[Tuple[str, str]]

    @property
    def finite_psnrs(self) -> List[float]:
        return [p for _, p, _ in self.rows if math.isfinite(p)]

    @property
    def n_infinite(self) -> int:
        return sum(1 for _, p, _ in self.rows if not math.isfinite(p))

    @property
    def mean_psnr(self) -> float:
        vals = self.finite_psnrs
        if vals:
            return float(np.mean(vals))
        return math.inf if self.rows else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([s for _, _, s in self.rows])) if self.rows else math.nan

    def to_csv(self) -> str:
        lines = ["name,psnr_db,ssim"]
        for name, p, s in self.rows:
            lines.append(f"{name},{_fmt(p)},{s:.6f}")
        lines.append(f"mean,{_fmt(self.mean_psnr)},{self.mean_ssim:.6f}")
        return "\n".join(lines) + "\n"


def _fmt(p: float) -> str:
    return "inf" if math.isinf(p) else f"{p:.4f}"


def super_resolve(model: AttnSRModel, lr: np.ndarray, ilr: np.ndarray) -> np.ndarray:
    hr, _ = predict(model, lr[None].astype(np.float32), ilr[None].astype(np.float32))
    return hr[0].astype(np.float64)


def evaluate(
    model: Union[AttnSRModel, str],
    images: Union[str, Path, Sequence[Tuple[str, np.ndarray]]],
    r: int,
) -> EvalReport:
    """Y-channel PSNR/SSIM with an ``r``-pixel border removed, per image.

    ``model`` may be ``"bicubic"`` to score the interpolated LR image itself.
    LR inputs are synthesized from the HR images by bicubic reduction.
    """
    rows, failures = [], []
    if isinstance(images, (str, Path)):
        entries = [(p.name, p) for p in imaging.read_manifest(images)]
    else:
        entries = list(images)
    for name, item in entries:
        try:
            hr = imaging.png_read(item) if isinstance(item, Path) else item
            if hr.shape[0] == 1:
                hr = np.repeat(hr, 3, axis=0)
            hr, lr, ilr = imaging.degrade(hr, r)
            pred = ilr if isinstance(model, str) else super_resolve(model, lr, ilr)
            p, s = imaging.y_metrics(pred, hr, r)
            rows.append((name, p, s))
        except (OSError, ValueError) as exc:
            logger.error("evaluation failed for %s: %s", name, exc)
            failures.append((name, str(exc)))
    return EvalReport(rows, failures)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class Trainer:
    """Owns model, optimizer, RNG and bookkeeping for one training run."""

    def __init__(
        self,
        config: TrainConfig,
        model: AttnSRModel,
        out_dir: Optional[Union[str, Path]] = None,
        log: Callable[[str], None] = print,
        mask_snapshots: int = 0,
        train_images: Optional[Sequence[np.ndarray]] = None,
        val_images: Optional[Sequence[Tuple[str, np.ndarray]]] = None,
    ):
        if config.scale != model.scale:
            raise ValueError(f"config scale {config.scale} differs from model scale {model.scale}")
        self.config = config
        self.model = model
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.log = log
        self.mask_snapshots = mask_snapshots
        self.rng = np.random.default_rng(config.seed)
        self.adam = Adam(dict(model.named_parameters()))
        self.epoch = 0
        self.best_psnr: Optional[float] = None
        self.bad_epochs = 0
        self.step_losses: List[float] = []
        self.epoch_log: List[dict] = []
        if train_images is None:
            train_images = [img for _, img in load_images(config.train_manifest)] if config.steps_per_epoch else []
        if val_images is None:
            val_images = load_images(config.val_manifest) if config.val_manifest else []
        self.train_images = list(train_images)
        self.val_images = list(val_images)

    # state ------------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        tensors = model_tensors(self.model)
        tensors.update(self.adam.tensors())
        header = {
            "epoch": self.epoch,
            "best_psnr": self.best_psnr,
            "bad_epochs": self.bad_epochs,
            "adam_t": self.adam.t,
            "rng_state": self.rng.bit_generator.state,
            "train_config": self.config.to_dict(),
        }
        return Checkpoint(self.model.config, tensors, header)

    def restore(self, ckpt: Checkpoint) -> None:
        if ckpt.model_config != self.model.config:
            raise ValueError("checkpoint model config differs from the model being trained")
        self.model.load_state_dict(ckpt.model_state())
        self.adam.load(ckpt.header.get("adam_t", 0), ckpt.tensors)
        self.epoch = ckpt.epoch
        self.best_psnr = ckpt.best_psnr
        self.bad_epochs = int(ckpt.header.get("bad_epochs", 0))
        self.rng.bit_generator.state = ckpt.header["rng_state"]

    # loop -------------------------------------------------------------

    def train_step(self, lr_rate: float) -> float:
        cfg = self.config
        lr, ilr, hr = make_batch(self.train_images, cfg, self.rng)
        self.model.train()
        pred, _ = self.model(Tensor(lr), Tensor(ilr))
        loss = l1_loss(pred, Tensor(hr))
        value = loss.item()
        if not math.isfinite(value):
            self._dump_nan(value)
            raise FloatingPointError(f"non-finite loss {value} at epoch {self.epoch}, step {len(self.step_losses)}")
        self.model.zero_grad()
        loss.backward()
        self.adam.step(lr_rate)
        self.step_losses.append(value)
        return value

    def validate(self) -> Tuple[float, float]:
        if not self.val_images:
            return math.nan, math.nan
        report = evaluate(self.model, self.val_images, self.config.scale)
        return report.mean_psnr, report.mean_ssim

    def run(self) -> Checkpoint:
        cfg = self.config
        if cfg.steps_per_epoch == 0:
            return self.checkpoint()
        best = self.checkpoint() if self.best_psnr is None else None
        while self.epoch < cfg.max_epochs:
            t0 = time.perf_counter()
            rate = lr_schedule(self.epoch, cfg.lr0, cfg.lr_halve_every)
            losses = [self.train_step(rate) for _ in range(cfg.steps_per_epoch)]
            val_psnr, val_ssim = self.validate()
            self.epoch += 1
            improved = math.isfinite(val_psnr) and (self.best_psnr is None or val_psnr > self.best_psnr)
            if improved:
                self.best_psnr = val_psnr
                self.bad_epochs = 0
            else:
                self.bad_epochs += 1
            ckpt = self.checkpoint()
            if improved:
                best = ckpt
            if self.out_dir is not None:
                ckpt.save(self.out_dir / "last.ckpt")
                if improved:
                    ckpt.save(self.out_dir / "best.ckpt")
                if self.mask_snapshots and self.epoch % self.mask_snapshots == 0:
                    self._snapshot_mask()
            entry = {
                "epoch": self.epoch,
                "lr": rate,
                "loss": float(np.mean(losses)),
                "val_psnr": val_psnr,
                "val_ssim": val_ssim,
                "seconds": time.perf_counter() - t0,
            }
            self.epoch_log.append(entry)
            self.log(
                f"epoch {entry['epoch']:3d}  lr {rate:.3e}  loss {entry['loss']:.5f}  "
                f"val_psnr {val_psnr:.3f}  val_ssim {val_ssim:.4f}  {entry['seconds']:.1f}s"
            )
            if self.bad_epochs >= cfg.early_stop_patience:
                self.log(f"no validation improvement for {self.bad_epochs} epochs, stopping")
                break
        return best if best is not None else self.checkpoint()

    def _snapshot_mask(self) -> None:
        if not self.val_images or not self.model.config.use_attention:
            return
        name, img = self.val_images[0]
        hr, lr, ilr = imaging.degrade(img, self.config.scale)
        _, mask = predict(self.model, lr[None].astype(np.float32), ilr[None].astype(np.float32))
        imaging.png_write(self.out_dir / "masks" / f"epoch_{self.epoch:03d}.png", mask[0].astype(np.float64))

    def _dump_nan(self, value: float) -> None:
        if self.out_dir is None:
            return
        bad = [n for n, p in self.model.named_parameters() if not np.all(np.isfinite(p.data))]
        diag = {"epoch": self.epoch, "step": len(self.step_losses), "loss": repr(value), "nonfinite_params": bad}
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "nan_dump.json").write_text(json.dumps(diag, indent=2))


def train(config: TrainConfig, model: AttnSRModel, **kwargs) -> Checkpoint:
    """Train ``model`` and return the checkpoint with the best validation PSNR."""
    return Trainer(config, model, **kwargs).run()

"""Training loop, optimizer, LR schedule, and evaluation runs.

The optimizer is decoupled-weight-decay Adam with bias-corrected moments,
implemented directly over named parameter tensors so its state serializes
into the checkpoint format byte-for-byte.  The learning rate follows a
cosine curve from ``lr_init`` down to ``lr_min`` over the scheduled step
count.  Runs are deterministic under a fixed seed, and resuming from a
checkpoint restores parameters, moments, step counter and RNG state.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import AugmentConfig, Manifest, augment, load_image
from .engine import EngineError, seed_all
from .losses import LossConfig, composite_loss
from .metrics import (
    PSNR_REPORT_CAP,
    EvalReport,
    EvalRow,
    psnr,
    ssim_index,
    uciqe,
    uiqm,
)
from .model import ModelConfig, Restorer


class TrainingError(RuntimeError):
    """Raised when a training step cannot proceed (e.g. NaN gradients)."""


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    crop: int = 256
    lr_init: float = 2e-4
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    seed: int = 0
    max_steps: Optional[int] = None        # overrides epochs when set
    checkpoint_every: int = 1000
    log_every: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.lr_min >= self.lr_init:
            raise EngineError(f"lr_min {self.lr_min} must be below lr_init {self.lr_init}")
        if self.batch_size < 1:
            raise EngineError(f"batch_size must be >= 1, got {self.batch_size}")


def desk_preset(seed: int = 0, steps: int = 2000) -> TrainConfig:
    """Small-footprint settings for desk-scale runs (not the reference setup)."""
    return TrainConfig(
        batch_size=4,
        crop=64,
        seed=seed,
        max_steps=steps,
        checkpoint_every=max(steps // 2, 1),
        augment=AugmentConfig.identity(crop=64),
    )


def cosine_lr(step: int, total: int, lr_init: float, lr_min: float) -> float:
    """Cosine annealing from lr_init (step 0) to lr_min (step == total)."""
    if step < 0:
        raise EngineError(f"step must be non-negative, got {step}")
    if step >= total:
        return lr_min
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * step / total))


@dataclass
class AdamWState:
    """Bias-corrected first/second moments keyed by parameter name."""

    step: int = 0
    exp_avg: Dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: Dict[str, torch.Tensor] = field(default_factory=dict)

    @staticmethod
    def for_params(params: Dict[str, torch.Tensor]) -> "AdamWState":
        return AdamWState(
            step=0,
            exp_avg={k: torch.zeros_like(v) for k, v in params.items()},
            exp_avg_sq={k: torch.zeros_like(v) for k, v in params.items()},
        )


def adamw_step(
    params: Dict[str, torch.Tensor],
    grads: Dict[str, torch.Tensor],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay multiplies parameters by (1 - lr*wd) before the moment update is
    applied; moments are bias-corrected by their step count.
    """
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}; step aborted")
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    names = [n for n in params if grads.get(n) is not None]
    with torch.no_grad():
        ps = [params[n] for n in names]
        gs = [grads[n] for n in names]
        ms = [state.exp_avg[n] for n in names]
        vs = [state.exp_avg_sq[n] for n in names]
        torch._foreach_mul_(ms, beta1)
        torch._foreach_add_(ms, gs, alpha=1.0 - beta1)
        torch._foreach_mul_(vs, beta2)
        torch._foreach_addcmul_(vs, gs, gs, value=1.0 - beta2)
        if weight_decay:
            torch._foreach_mul_(ps, 1.0 - lr * weight_decay)
        denoms = torch._foreach_div(vs, bc2)
        torch._foreach_sqrt_(denoms)
        torch._foreach_add_(denoms, eps)
        torch._foreach_addcdiv_(ps, ms, denoms, value=-lr / bc1)


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    log: List[dict]
    wall_seconds: float = 0.0


class _TrainData:
    """Deterministic in-memory batch sampler over the train split."""

    def __init__(self, manifest: Manifest, cfg: TrainConfig, log: list):
        records = []
        for r in manifest.split("train"):
            records.extend([r] * r.repeat_factor)
        if not records:
            raise TrainingError("manifest has no train records")
        self.records = records
        self.cfg = cfg
        self.log = log
        self.cache: dict = {}

    def _load_pair(self, record):
        key = record.input_path
        if key not in self.cache:
            self.cache[key] = (load_image(record.input_path), load_image(record.target_path))
        return self.cache[key]

    def batch(self, rng: np.random.Generator):
        inputs, targets = [], []
        while len(inputs) < self.cfg.batch_size:
            idx = int(rng.integers(0, len(self.records)))
            record = self.records[idx]
            try:
                inp, tgt = self._load_pair(record)
            except Exception as e:  # unreadable image: warn once, keep going
                self.log.append({"warning": f"skipping {record.input_path}: {e}"})
                self.records = [r for r in self.records if r.input_path != record.input_path]
                if not self.records:
                    raise TrainingError("all train images failed to decode") from e
                continue
            inp, tgt = augment(inp, tgt, self.cfg.augment, rng)
            inputs.append(inp)
            targets.append(tgt)
        x = torch.from_numpy(np.stack(inputs)).permute(0, 3, 1, 2).contiguous()
        t = torch.from_numpy(np.stack(targets)).permute(0, 3, 1, 2).contiguous()
        return x, t


def _rng_snapshot(rng: np.random.Generator) -> dict:
    return {
        "numpy": rng.bit_generator.state,
        "torch": torch.get_rng_state().numpy().astype(np.uint8).tolist(),
    }


def _rng_restore(snapshot: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = snapshot["numpy"]
    torch.set_rng_state(torch.tensor(snapshot["torch"], dtype=torch.uint8))
    return rng


def train(
    manifest: Manifest,
    model_cfg: ModelConfig = ModelConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    work_dir="runs",
    resume_from: Optional[str] = None,
    stop_at_step: Optional[int] = None,
) -> TrainResult:
    """Run the optimization loop and return checkpoint/log paths.

    Per step: sample a batch (seeded), forward, composite loss, backward,
    cosine-scheduled optimizer update explicit in the loss log.  Periodic and
    final checkpoints carry optimizer moments and RNG state so a resumed run
    continues the original trajectory; ``stop_at_step`` interrupts early
    without shortening the schedule (resume with the same config to finish).
    """
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    log: List[dict] = []
    data = _TrainData(manifest, train_cfg, log)

    steps_per_epoch = max(len(data.records) // train_cfg.batch_size, 1)
    total_steps = (
        train_cfg.max_steps if train_cfg.max_steps is not None
        else train_cfg.epochs * steps_per_epoch
    )

    seed_all(train_cfg.seed)
    model = Restorer(model_cfg)
    model.train()
    params = dict(model.named_parameters())
    state = AdamWState.for_params(params)
    rng = np.random.default_rng(train_cfg.seed)
    start_step = 0

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model.load_state_dict({k: v for k, v in ckpt.params.items()})
        state = AdamWState(
            step=ckpt.extra["optimizer_step"],
            exp_avg={k: ckpt.exp_avg[k] for k in params},
            exp_avg_sq={k: ckpt.exp_avg_sq[k] for k in params},
        )
        rng = _rng_restore(ckpt.extra["rng"])
        start_step = ckpt.step

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            config=model_cfg.to_dict(),
            step=step,
            params={k: v.detach().clone() for k, v in model.state_dict().items()},
            exp_avg={k: v.clone() for k, v in state.exp_avg.items()},
            exp_avg_sq={k: v.clone() for k, v in state.exp_avg_sq.items()},
            extra={
                "optimizer_step": state.step,
                "total_steps": total_steps,
                "rng": _rng_snapshot(rng),
                "train_config": {
                    "lr_init": train_cfg.lr_init,
                    "lr_min": train_cfg.lr_min,
                    "batch_size": train_cfg.batch_size,
                    "crop": train_cfg.crop,
                    "seed": train_cfg.seed,
                },
            },
        )

    ckpt_path = work_dir / "checkpoint.uwrc"
    log_path = work_dir / "loss_log.jsonl"
    last_step = total_steps if stop_at_step is None else min(stop_at_step, total_steps)
    t_start = time.time()
    for step in range(start_step, last_step):
        x, t = data.batch(rng)
        lr = cosine_lr(step, total_steps, train_cfg.lr_init, train_cfg.lr_min)
        out = model(x)
        loss, parts = composite_loss(out, t, train_cfg.loss)
        model.zero_grad(set_to_none=True)
        loss.backward()
        grads = {k: p.grad for k, p in params.items()}
        adamw_step(
            params, grads, state, lr,
            beta1=train_cfg.beta1, beta2=train_cfg.beta2,
            weight_decay=train_cfg.weight_decay,
        )
        if (step + 1) % train_cfg.log_every == 0 or step == start_step:
            entry = {"step": step + 1, "lr": lr, "loss": loss.item()}
            entry.update({k: v.item() for k, v in parts.items()})
            log.append(entry)
        if (step + 1) % train_cfg.checkpoint_every == 0:
            save_checkpoint(ckpt_path, snapshot(step + 1))

    if last_step == total_steps:
        # terminal LR is part of the schedule contract: log it explicitly
        log.append({
            "step": total_steps,
            "lr": cosine_lr(total_steps, total_steps, train_cfg.lr_init, train_cfg.lr_min),
            "event": "schedule_end",
        })
    save_checkpoint(ckpt_path, snapshot(last_step))
    with open(log_path, "w") as f:
        for entry in log:
            f.write(json.dumps(entry) + "\n")
    return TrainResult(str(ckpt_path), str(log_path), log, wall_seconds=time.time() - t_start)


def restore_image(model: Restorer, img: np.ndarray) -> np.ndarray:
    """Run one HWC [0, 1] image through the model in eval mode."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
        x = x.permute(2, 0, 1).unsqueeze(0)
        y = model(x).squeeze(0).permute(1, 2, 0).numpy()
    if was_training:
        model.train()
    return y


def evaluate(
    manifest: Manifest,
    model: Restorer,
    split: str = "test_paired",
    dataset: str = "all",
    perceptual_backend=None,
    psnr_cap: float = PSNR_REPORT_CAP,
) -> EvalReport:
    """Metric report over one test split.

    Paired splits get PSNR/SSIM (and LPIPS when a backend is supplied) plus
    the non-reference scores; unpaired splits get UCIQE/UIQM only.
    """
    records = manifest.split(split)
    if dataset != "all":
        records = [r for r in records if r.source == dataset]
    if not records:
        raise EngineError(f"no records in split {split!r} for dataset {dataset!r}")
    paired = split == "test_paired"
    report = EvalReport(dataset=dataset, split=split)
    for record in records:
        if paired and not record.target_path:
            raise EngineError(f"paired record {record.input_path} has no target")
        inp = load_image(record.input_path)
        out = restore_image(model, inp)
        values: dict = {}
        if paired:
            tgt = load_image(record.target_path)
            p = psnr(out, tgt)
            values["psnr"] = min(p, psnr_cap)
            values["ssim"] = ssim_index(out, tgt)
            if perceptual_backend is not None:
                a = torch.from_numpy(out.transpose(2, 0, 1)[None].copy())
                b = torch.from_numpy(tgt.transpose(2, 0, 1)[None].copy())
                values["lpips"] = float(perceptual_backend(a, b))
        values["uciqe"] = uciqe(out)
        values["uiqm"] = uiqm(out)
        report.rows.append(EvalRow(name=Path(record.input_path).name, values=values))
    return report

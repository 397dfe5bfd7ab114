"""Training loop: warm-up/step schedule, optional frozen-trunk alignment
phase for randomly initialised attention blocks, checkpoints and a JSON-lines
metrics log."""
from __future__ import annotations

import json
import logging
import math
import os
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .data.augment import AugmentationConfig, ImageBatchLoader, batch_tensors
from .data.manifest import DatasetManifest
from .data.sampler import PKBatchSpec, PKSampler
from .losses import LossWeights, lbs_total
from .model.network import MBRModel, build_model
from .model.presets import ArchitectureSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainPlan:
    epochs: int = 120
    base_lr: float = 1e-4
    warmup_epochs: int = 10
    decay_epochs: tuple[int, ...] = (40, 70, 100)
    decay_factor: float = 0.1
    # None: run the frozen-trunk phase only when the model has attention blocks
    freeze_phase: bool | None = None
    freeze_epochs: int = 10
    freeze_lr: float = 1e-4
    checkpoint_every: int = 10
    adam_betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(self.decay_epochs))
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.base_lr <= 0 or self.freeze_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.warmup_epochs < 0 or self.freeze_epochs < 0:
            raise ValueError("warmup_epochs and freeze_epochs must be >= 0")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError("decay epochs must be strictly increasing")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")

    def runs_freeze_phase(self, spec: ArchitectureSpec) -> bool:
        if self.freeze_phase is None:
            return spec.has_attention and self.freeze_epochs > 0
        return self.freeze_phase and self.freeze_epochs > 0


def lr_at(epoch: int, plan: TrainPlan) -> float:
    """Learning rate of main-phase ``epoch`` (0-based)."""
    if epoch < plan.warmup_epochs:
        return plan.base_lr * (epoch + 1) / plan.warmup_epochs
    steps = sum(1 for d in plan.decay_epochs if d <= epoch)
    return plan.base_lr * plan.decay_factor**steps


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: str | None):
        super().__init__(message if snapshot is None else f"{message} (snapshot: {snapshot})")
        self.snapshot = snapshot


@dataclass
class TrainResult:
    out_dir: Path
    checkpoints: list[Path] = field(default_factory=list)
    epoch_losses: dict[int, float] = field(default_factory=dict)

    @property
    def metrics_path(self) -> Path:
        return self.out_dir / "metrics.jsonl"

    @property
    def last_checkpoint(self) -> Path | None:
        return self.checkpoints[-1] if self.checkpoints else None


# ---------------------------------------------------------------------------
# checkpoints


def _rng_state() -> dict:
    return {"torch": torch.get_rng_state(), "numpy": np.random.get_state(), "python": random.getstate()}


def _set_rng_state(state: dict) -> None:
    torch.set_rng_state(state["torch"])
    np.random.set_state(state["numpy"])
    random.setstate(state["python"])


def save_checkpoint(path: str | os.PathLike, model: MBRModel, optimizer, epoch: int, extra: dict | None = None) -> Path:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "weights": model.state_dict(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "epoch": epoch,
        "spec": model.spec.to_dict(),
        "n_classes": model.n_classes,
        "rng": _rng_state(),
    }
    payload.update(extra or {})
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def model_from_checkpoint(path_or_payload) -> MBRModel:
    ckpt = path_or_payload if isinstance(path_or_payload, dict) else load_checkpoint(path_or_payload)
    spec = ArchitectureSpec.from_dict(ckpt["spec"])
    model = build_model(spec, pretrained=False, n_classes=ckpt.get("n_classes", 0))
    model.load_state_dict(ckpt["weights"])
    return model


# ---------------------------------------------------------------------------
# loop


def _adam(model: MBRModel, lr: float, plan: TrainPlan) -> torch.optim.Adam:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=lr, betas=plan.adam_betas, weight_decay=plan.weight_decay)


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _snapshot(out_dir: Path, model: MBRModel, epoch: int, it: int, records, breakdown) -> Path:
    path = out_dir / f"diverged_e{epoch}_i{it}.pt"
    torch.save(
        {
            "epoch": epoch,
            "iter": it,
            "image_ids": [r.image_id for r in records],
            "breakdown": [asdict(b) for b in breakdown],
            "weights": model.state_dict(),
        },
        path,
    )
    return path


def run_training(
    model: MBRModel,
    manifest: DatasetManifest,
    plan: TrainPlan = TrainPlan(),
    weights: LossWeights = LossWeights(),
    sampler: PKBatchSpec = PKBatchSpec(),
    out_dir: str | os.PathLike = "runs/train",
    augmentation: AugmentationConfig | None = AugmentationConfig(),
    seed: int = 0,
    resume: str | os.PathLike | None = None,
    deterministic: bool = True,
    workers: int = 0,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train ``model`` on ``manifest``.

    Epochs of the frozen-trunk phase are numbered -F..-1, the main schedule
    0..epochs-1. Every iteration appends one JSON record to
    ``out_dir/metrics.jsonl``; checkpoints go to ``out_dir/checkpoints``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if model.n_classes != manifest.n_classes:
        raise ValueError(f"model has {model.n_classes} classes, manifest has {manifest.n_classes}")
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    random.seed(seed)

    label_map = manifest.label_map()
    loader = ImageBatchLoader(model.spec.input_size, augmentation, seed=seed, workers=workers, cache=True)
    n_freeze = plan.freeze_epochs if plan.runs_freeze_phase(model.spec) else 0
    schedule = list(range(-n_freeze, plan.epochs))
    result = TrainResult(out_dir)

    start = 0
    resume_state = None
    if resume is not None:
        resume_state = load_checkpoint(resume)
        model.load_state_dict(resume_state["weights"])
        start = schedule.index(resume_state["epoch"]) + 1
        result.epoch_losses = {int(k): v for k, v in resume_state.get("epoch_losses", {}).items()}

    metrics = open(out_dir / "metrics.jsonl", "a" if resume is not None else "w")
    optimizer = None
    phase = None
    try:
        for pos in range(start, len(schedule)):
            epoch = schedule[pos]
            frozen = epoch < 0
            if phase != ("freeze" if frozen else "main"):
                phase = "freeze" if frozen else "main"
                model.set_shared_trainable(not frozen)
                optimizer = _adam(model, plan.freeze_lr if frozen else lr_at(max(epoch, 0), plan), plan)
                if resume_state is not None:
                    if resume_state.get("phase") == phase:
                        optimizer.load_state_dict(resume_state["optimizer"])
                    _set_rng_state(resume_state["rng"])
                    resume_state = None
            lr = plan.freeze_lr if frozen else lr_at(epoch, plan)
            _set_lr(optimizer, lr)

            model.train()
            if frozen:
                # keep the trunk's norm statistics fixed too
                model.shared.eval()
            total, count = 0.0, 0
            for it, idx in enumerate(PKSampler(manifest, sampler, epoch=pos)):
                records = [manifest.records[i] for i in idx]
                images = loader.load(records, pos, it)
                cams, views, targets = batch_tensors(records, label_map)
                bundle = model(images, cams, views, with_logits=True)
                loss, breakdown = lbs_total(bundle, targets, weights)
                if not torch.isfinite(loss):
                    snap = _snapshot(out_dir, model, epoch, it, records, breakdown)
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, iteration {it}", str(snap))
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()

                value = float(loss.detach())
                total += value
                count += 1
                metrics.write(
                    json.dumps(
                        {
                            "epoch": epoch,
                            "iter": it,
                            "lr": lr,
                            "loss_total": value,
                            "loss_by_branch": [
                                {"unit": i, **asdict(b)} for i, b in enumerate(breakdown)
                            ],
                        }
                    )
                    + "\n"
                )
            metrics.flush()
            mean = total / max(count, 1)
            result.epoch_losses[epoch] = mean
            log.info("epoch %d lr %.2e loss %.4f", epoch, lr, mean)
            if on_epoch is not None:
                on_epoch(epoch, mean)

            last = pos == len(schedule) - 1
            if last or (pos + 1) % plan.checkpoint_every == 0 or pos + 1 == n_freeze:
                path = out_dir / "checkpoints" / ("last.pt" if last else f"epoch_{epoch:+04d}.pt")
                save_checkpoint(
                    path,
                    model,
                    optimizer,
                    epoch,
                    {"phase": phase, "plan": asdict(plan), "label_map": label_map, "epoch_losses": result.epoch_losses},
                )
                result.checkpoints.append(path)
    finally:
        metrics.close()
        model.set_shared_trainable(True)
    return result


def read_metrics(path: str | os.PathLike) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def epoch_means(records: list[dict]) -> dict[int, float]:
    sums: dict[int, list[float]] = {}
    for r in records:
        sums.setdefault(r["epoch"], []).append(r["loss_total"])
    return {e: math.fsum(v) / len(v) for e, v in sums.items()}

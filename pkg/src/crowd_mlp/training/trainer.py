"""Training orchestration over the Split-Counting objective."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from crowd_mlp.data.manifest import load_image, load_manifest
from crowd_mlp.data.synth import SceneSample, generate_scenes
from crowd_mlp.data.transforms import augment, fit_to_model, random_crop
from crowd_mlp.engine.rng import RngState, StackedRng
from crowd_mlp.evaluation import compute_metrics, sliding_window_count
from crowd_mlp.log import debug_detail, logger
from crowd_mlp.model.config import ConfigurationError
from crowd_mlp.model.crowdmlp import CrowdMLP, build_model
from crowd_mlp.split_counting import LossBundle, split_counting_step
from crowd_mlp.training.checkpoint import Checkpoint, save_checkpoint
from crowd_mlp.training.config import TrainConfig
from crowd_mlp.training.optim import AdamState, adam_step, clip_gradients, multistep_lr

LOG_NAME = "train_log.jsonl"
BEST_NAME = "best.ckpt"
FINAL_NAME = "final.ckpt"


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    loss: LossBundle
    lr: float
    val_mae: float | None

    def to_dict(self) -> dict[str, object]:
        return {
            "epoch": self.epoch,
            "steps": self.steps,
            **self.loss.as_dict(),
            "lr": self.lr,
            "val_mae": self.val_mae,
        }


@dataclass
class TrainResult:
    best_checkpoint: Path
    final_checkpoint: Path
    log_path: Path
    steps: int
    history: list[EpochRecord] = field(default_factory=list)
    first_step: LossBundle | None = None
    model: CrowdMLP | None = field(default=None, repr=False)

    @property
    def best_val_mae(self) -> float | None:
        maes = [r.val_mae for r in self.history if r.val_mae is not None]
        return min(maes) if maes else None


def schedule_lr(epoch: int, cfg: TrainConfig) -> float:
    return multistep_lr(epoch, cfg.lr, cfg.resolved_milestones(), cfg.gamma)


def load_dataset(cfg: TrainConfig) -> list[SceneSample]:
    """Synthetic scenes with points, or manifest images resized to the model input."""
    if cfg.manifest is not None:
        records = load_manifest(cfg.manifest)
        scenes = [
            fit_to_model(SceneSample(image=load_image(r.path), count=r.count), cfg.crop_size)
            for r in records
        ]
    else:
        scenes = generate_scenes(cfg.synth, cfg.num_scenes)
    if not scenes:
        raise ConfigurationError("The training dataset is empty")
    return scenes


def split_indices(n: int, fraction: float, rng: RngState) -> tuple[list[int], list[int]]:
    """Hold out round(fraction·n) scenes for validation, always leaving one to train on."""
    held = min(int(round(fraction * n)), n - 1)
    order = [int(i) for i in rng.permutation(n)]
    return sorted(order[held:]), sorted(order[:held])


def make_batches(order: list[int], batch_size: int) -> list[list[int]]:
    """Consecutive batches; a trailing single example joins the previous batch.

    Train-mode normalization over a batch of one collapses the pooled count to a constant.
    """
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2].extend(batches.pop())
    return batches


def train(cfg: TrainConfig) -> TrainResult:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / LOG_NAME
    best_path = out_dir / BEST_NAME
    final_path = out_dir / FINAL_NAME

    root = RngState(cfg.seed)
    scenes = load_dataset(cfg)
    train_idx, val_idx = split_indices(len(scenes), cfg.val_fraction, root.derive("split"))
    model = build_model(cfg.run_model_config(), seed=cfg.seed)
    optimizer = AdamState.create(model.params)
    logger.info(
        "Training %d parameters on %d scenes (%d held out), streams %s, proxy %s",
        model.parameter_count(),
        len(train_idx),
        len(val_idx),
        ",".join(model.config.streams),
        "on" if cfg.use_proxy else "off",
    )

    result = TrainResult(
        best_checkpoint=best_path, final_checkpoint=final_path, log_path=log_path, steps=0
    )
    best_score = math.inf
    step = 0
    previous_lr = None
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(cfg.epochs):
            lr = schedule_lr(epoch, cfg)
            if lr != previous_lr:
                logger.info("Epoch %d: learning rate %.3g", epoch, lr)
                previous_lr = lr

            permutation = root.derive("order", epoch).permutation(len(train_idx))
            order = [train_idx[int(i)] for i in permutation]
            bundles: list[LossBundle] = []
            for batch in make_batches(order, cfg.batch_size):
                samples = [_training_view(scenes[i], cfg, root, epoch, i) for i in batch]
                images = np.stack([s.image for s in samples])
                counts = np.array([s.count for s in samples])
                raw_rng = None
                if cfg.raw_drop_schedule == "per_epoch":
                    raw_rng = StackedRng([root.derive("raw-drop", epoch, i) for i in batch])

                outcome = split_counting_step(
                    images,
                    counts,
                    model,
                    root.derive("step", step),
                    "train",
                    use_proxy=cfg.use_proxy,
                    raw_rng=raw_rng,
                )
                if cfg.clip_norm is not None:
                    clip_gradients(outcome.gradients, cfg.clip_norm)
                adam_step(model.params, outcome.gradients, optimizer, lr)

                if result.first_step is None:
                    result.first_step = outcome.loss
                bundles.append(outcome.loss)
                log.write(
                    json.dumps({"epoch": epoch, "step": step, **outcome.loss.as_dict(), "lr": lr})
                    + "\n"
                )
                debug_detail(f"step {step}: L={outcome.loss.L:.4f} L_C={outcome.loss.L_C:.4f}")
                step += 1
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break

            epoch_loss = LossBundle.mean(bundles)
            val_mae = _validate(model, [scenes[i] for i in val_idx], cfg.crop_size)
            record = EpochRecord(
                epoch=epoch, steps=len(bundles), loss=epoch_loss, lr=lr, val_mae=val_mae
            )
            result.history.append(record)
            logger.info(
                "Epoch %d: L=%.4f L_C=%.4f L_SS=%.4f L_I=%.4f val MAE=%s",
                epoch,
                epoch_loss.L,
                epoch_loss.L_C,
                epoch_loss.L_SS,
                epoch_loss.L_I,
                "n/a" if val_mae is None else f"{val_mae:.3f}",
            )

            score = val_mae if val_mae is not None else epoch_loss.L_C
            if score < best_score:
                best_score = score
                save_checkpoint(
                    best_path,
                    Checkpoint.from_model(
                        model, epoch=epoch, metadata={"val_mae": val_mae, "step": step}
                    ),
                )
                logger.info("Saved best checkpoint (epoch %d) to %s", epoch, best_path)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break

    save_checkpoint(
        final_path,
        Checkpoint.from_model(
            model,
            optimizer=optimizer,
            rng_state=root.get_state(),
            epoch=result.history[-1].epoch,
            metadata={"step": step},
        ),
    )
    result.steps = step
    result.model = model
    return result


def _training_view(
    scene: SceneSample, cfg: TrainConfig, root: RngState, epoch: int, index: int
) -> SceneSample:
    if scene.points is not None:
        scene = random_crop(scene, cfg.crop_size, root.derive("crop", epoch, index))
    if cfg.augment:
        scene = augment(scene, root.derive("augment", epoch, index))
    return scene


def _validate(model: CrowdMLP, scenes: list[SceneSample], window: int) -> float | None:
    if not scenes:
        return None
    predictions = [sliding_window_count(s.image, model, window).total for s in scenes]
    return compute_metrics(predictions, [s.count for s in scenes]).mae

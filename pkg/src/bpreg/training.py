"""Self-supervised training loop with the fixed schedule arithmetic.

The schedule keeps the number of 2D slices a model sees fixed across
choices of m: each mini-batch holds ``slices_per_batch`` slices grouped
into items of m, and every volume contributes exactly one m-slice item
per epoch, so ``total_slices_per_volume = m * epochs`` holds exactly.
"""

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augmentation import AugmentationConfig
from .errors import ConfigError, TrainingDivergedError
from .evaluation import build_reference_table, lmse
from .losses import LOSS_KINDS, combined_loss
from .model import ModelConfig, SliceScoreModel, build_model, config_hash
from .sampling import sample_training_item


@dataclass
class TrainConfig:
    m: int = 4
    loss_kind: str = "heuristic"
    alpha: float = 0.0
    beta: float = 0.01                      # 1/mm
    delta_h_range: tuple = (5.0, 100.0)     # mm
    learning_rate: float = 1e-4
    slices_per_batch: int = 256
    total_slices_per_volume: int = 1920
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def validate(self):
        if self.m < 2:
            raise ConfigError("need m >= 2 slices per item")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.alpha > 0 and self.m < 3:
            raise ConfigError("the distance term needs m >= 3")
        if self.loss_kind == "none" and self.alpha <= 0:
            raise ConfigError("loss_kind 'none' requires alpha > 0")
        if self.loss_kind == "heuristic" and self.beta <= 0:
            raise ConfigError("the heuristic order loss needs beta > 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        lo, hi = self.delta_h_range
        if not 0 < lo <= hi:
            raise ConfigError("delta_h_range must satisfy 0 < min <= max")
        if self.slices_per_batch % self.m != 0:
            raise ConfigError(
                f"slices_per_batch={self.slices_per_batch} is not divisible by m={self.m}"
            )
        if self.total_slices_per_volume % self.m != 0:
            raise ConfigError(
                f"total_slices_per_volume={self.total_slices_per_volume} is not divisible by m={self.m}"
            )
        self.model.validate()
        self.augmentation.validate()

    def to_dict(self):
        d = asdict(self)
        d["delta_h_range"] = list(self.delta_h_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        if "augmentation" in d and isinstance(d["augmentation"], dict):
            d["augmentation"] = AugmentationConfig.from_dict(d["augmentation"])
        if "delta_h_range" in d:
            d["delta_h_range"] = tuple(d["delta_h_range"])
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def derive_schedule(m, slices_per_batch=256, total_slices_per_volume=1920):
    """Batch size and epoch count from the fixed slice budgets.

    The epoch count must come out integral (every volume contributes m
    slices per epoch); the per-batch item count is rounded to the nearest
    integer since the slice budget per batch is approximate.
    """
    if m < 2:
        raise ConfigError("need m >= 2")
    if total_slices_per_volume % m != 0:
        raise ConfigError(
            f"total_slices_per_volume={total_slices_per_volume} is not divisible by m={m}"
        )
    batch_size = max(1, round(slices_per_batch / m))
    epochs = total_slices_per_volume // m
    return batch_size, epochs


@dataclass
class TrainResult:
    model: SliceScoreModel
    history: list
    best_epoch: int
    best_val_lmse: float


def _epoch_rng(seed, epoch, stream):
    return np.random.default_rng(np.random.SeedSequence((seed, epoch, stream)))


def _forward_items(model, items, dtype):
    slices = np.concatenate([item.slices for item in items])  # (B*m, H, W)
    x = torch.from_numpy(slices).unsqueeze(1).to(dtype)
    scores = model(x).reshape(len(items), -1)
    delta_h = torch.tensor([item.delta_h for item in items], dtype=scores.dtype)
    return scores, delta_h


def _save_history(history, out_dir):
    if out_dir is not None:
        with open(Path(out_dir) / "history.json", "w") as fh:
            json.dump(history, fh, indent=1)


def load_history(out_dir):
    path = Path(out_dir) / "history.json"
    if not path.exists():
        return []
    with open(path) as fh:
        return json.load(fh)


def train(train_volumes, val_volumes, annotations, cfg: TrainConfig, out_dir=None, resume=False) -> TrainResult:
    """Train a slice-score model on preprocessed volumes.

    ``annotations`` drives the per-epoch monitoring: the reference table
    is rebuilt from the annotated training volumes (train-only pool) and
    the validation LMSE is computed against it.  The checkpoint with the
    best validation LMSE wins.  Fully deterministic for a fixed config:
    epoch e draws its samples from seed (cfg.seed, e), so training,
    interrupted or not, always walks the same path.
    """
    cfg.validate()
    if not train_volumes:
        raise ConfigError("need at least one training volume")
    batch_size, epochs = derive_schedule(cfg.m, cfg.slices_per_batch, cfg.total_slices_per_volume)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "train_config.json", "w") as fh:
            fh.write(cfg.to_json())

    model = build_model(cfg.model, cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    param_dtype = next(model.parameters()).dtype

    history = []
    start_epoch = 0
    best_epoch, best_val_lmse, best_state = -1, float("inf"), None

    if resume:
        if out_dir is None:
            raise ConfigError("resume requires an output directory")
        last = out_dir / "checkpoint-last.pt"
        if last.exists():
            payload = torch.load(last, map_location="cpu", weights_only=False)
            if payload["config_hash"] != config_hash(cfg.model):
                raise ConfigError("resume checkpoint was trained with a different model config")
            model.load_state_dict(payload["state_dict"])
            optimizer.load_state_dict(payload["optimizer"])
            history = load_history(out_dir)
            start_epoch = payload["epoch"] + 1
            best_epoch = payload["best_epoch"]
            best_val_lmse = payload["best_val_lmse"]
            best_state = payload["best_state"]

    if best_state is None:
        best_state = {k: v.clone() for k, v in model.state_dict().items()}

    annotated_train = [v for v in train_volumes if v.source_id in annotations]
    if not annotated_train:
        raise ConfigError("no annotated training volume for the reference table")

    for epoch in range(start_epoch, epochs):
        data_rng = _epoch_rng(cfg.seed, epoch, 0)
        model.train()
        order = data_rng.permutation(len(train_volumes))
        batch_losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            items = [
                sample_training_item(train_volumes[i], cfg.m, cfg.delta_h_range, cfg.augmentation, data_rng)
                for i in idx
            ]
            scores, delta_h = _forward_items(model, items, param_dtype)
            loss = combined_loss(scores, delta_h, cfg.loss_kind, cfg.alpha, cfg.beta)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss in epoch {epoch} (kind={cfg.loss_kind}, alpha={cfg.alpha})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            batch_losses.append(loss.item())
        model.eval()

        val_rng = _epoch_rng(cfg.seed, epoch, 1)
        with torch.no_grad():
            val_items = [
                sample_training_item(v, cfg.m, cfg.delta_h_range, cfg.augmentation, val_rng)
                for v in val_volumes
            ]
            if val_items:
                scores, delta_h = _forward_items(model, val_items, param_dtype)
                val_loss = combined_loss(scores, delta_h, cfg.loss_kind, cfg.alpha, cfg.beta).item()
            else:
                val_loss = float("nan")

        # the score scale can be degenerate (d <= 0) before the ordering is
        # learned; the LMSE is simply not measurable yet then
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                table = build_reference_table(model, annotated_train, annotations)
                val_lmse = lmse(model, val_volumes, annotations, table).mean
        except ConfigError:
            val_lmse = float("inf")

        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(batch_losses)),
                "val_loss": val_loss,
                "val_lmse": val_lmse,
            }
        )
        _save_history(history, out_dir)

        if val_lmse < best_val_lmse:
            best_val_lmse = val_lmse
            best_epoch = epoch
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
            if out_dir is not None:
                _save_checkpoint(out_dir / "checkpoint-best.pt", model.config, best_state, None, epoch, best_epoch, best_val_lmse)

        if out_dir is not None:
            _save_checkpoint(
                out_dir / "checkpoint-last.pt",
                model.config,
                model.state_dict(),
                optimizer.state_dict(),
                epoch,
                best_epoch,
                best_val_lmse,
                best_state=best_state,
            )

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model=model, history=history, best_epoch=best_epoch, best_val_lmse=best_val_lmse)


def _save_checkpoint(path, model_config, state_dict, optimizer_state, epoch, best_epoch, best_val_lmse, best_state=None):
    torch.save(
        {
            "config": model_config.to_dict(),
            "config_hash": config_hash(model_config),
            "state_dict": state_dict,
            "optimizer": optimizer_state,
            "epoch": epoch,
            "best_epoch": best_epoch,
            "best_val_lmse": best_val_lmse,
            "best_state": best_state,
        },
        path,
    )

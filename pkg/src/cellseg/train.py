"""Datasets, the training loop and slice-wise volume inference."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError
from .metrics import ConfusionCounts
from .microcellseg import Model, forward, save_weights
from .numcore import AdamState, PlateauScheduler, Tape, adam_step, dice_loss, focal_loss_heatmap
from .postproc import render_center_heatmap
from .pseudocolor import DEFAULT_PARAMS, PseudocolorParams, pseudocolor_volume
from .volumestore import TilePlan, resize_bilinear, resize_nearest, stitch, tile_plan

INPUT_MODES = ("pseudocolor", "gray-replicate")


@dataclass
class RunConfig:
    task: str = "mask"
    input_mode: str = "pseudocolor"
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    min_lr: float = 1e-5
    seed: int = 0
    postproc: str = "none"
    input_size: int = 96
    decoder_filters: tuple[int, ...] = (32, 24, 16, 8)
    heatmap_sigma: float = 2.0
    val_fraction: float = 0.2
    data: list[str] = field(default_factory=list)
    out: str | None = None

    def __post_init__(self):
        self.decoder_filters = tuple(int(v) for v in self.decoder_filters)
        self.data = [str(p) for p in self.data]

    def validate(self) -> "RunConfig":
        if self.task not in ("mask", "centers"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"unknown input mode {self.input_mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("plateau factor must lie in (0, 1)")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_filters"] = list(self.decoder_filters)
        return d


@dataclass
class Dataset:
    """Per-slice network inputs (N, 3, S, S) and targets (N, 1, S, S)."""
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx])

    @classmethod
    def concat(cls, parts: list["Dataset"]) -> "Dataset":
        if not parts:
            raise ConfigError("no data")
        return cls(np.concatenate([p.inputs for p in parts]), np.concatenate([p.targets for p in parts]))


def _resize_stack(stack: np.ndarray, size: int) -> np.ndarray:
    if stack.shape[-2:] == (size, size):
        return stack
    lead = stack.shape[:-2]
    flat = stack.reshape((-1,) + stack.shape[-2:])
    out = np.stack([resize_bilinear(s, size, size) for s in flat])
    return out.reshape(lead + (size, size)).astype(stack.dtype)


def volume_inputs(volume: np.ndarray, input_mode: str = "pseudocolor", size: int | None = None,
                  params: PseudocolorParams = DEFAULT_PARAMS) -> np.ndarray:
    """(Z, 3, S, S) float32 network inputs; pseudocoloring runs at native resolution."""
    x = pseudocolor_volume(volume, params, mode=input_mode)
    return x if size is None else _resize_stack(x, size)


def volume_targets(labels: np.ndarray, task: str, size: int, sigma: float = 2.0) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.shape[1:] != (size, size):
        lab = np.stack([resize_nearest(s, size, size) for s in lab])
    if task == "mask":
        t = (lab > 0).astype(np.float32)
    else:
        # rendered at the working resolution so every centroid keeps an exact 1
        t = render_center_heatmap(lab, sigma)
    return t[:, None]


def build_dataset(volumes, label_volumes, task: str = "mask", input_mode: str = "pseudocolor",
                  size: int = 96, sigma: float = 2.0, params: PseudocolorParams = DEFAULT_PARAMS) -> Dataset:
    parts = []
    for vol, lab in zip(volumes, label_volumes):
        if np.shape(vol) != np.shape(lab):
            raise DimensionError(f"volume {np.shape(vol)} and labels {np.shape(lab)} differ in shape")
        parts.append(Dataset(volume_inputs(vol, input_mode, size, params), volume_targets(lab, task, size, sigma)))
    return Dataset.concat(parts)


def loss_for(task: str):
    return dice_loss if task == "mask" else focal_loss_heatmap


@dataclass
class TrainResult:
    history: list[dict]
    best_state: dict
    best_epoch: int
    epoch_seconds: list[float]


def _counts(pred: np.ndarray, target: np.ndarray) -> ConfusionCounts:
    return ConfusionCounts.from_masks(pred > 0.5, target > 0.5)


def evaluate(model: Model, data: Dataset, task: str, batch_size: int = 8) -> tuple[float, float]:
    """Mean loss (weighted by batch size) and pooled MeanIoU in infer mode."""
    loss_fn = loss_for(task)
    total, counts = 0.0, None
    for i in range(0, len(data), batch_size):
        xb, yb = data.inputs[i:i + batch_size], data.targets[i:i + batch_size]
        p = forward(model, xb, "infer")
        total += loss_fn(p, yb).item() * len(xb)
        c = _counts(p.data, yb)
        counts = c if counts is None else counts + c
    return total / len(data), counts.mean_iou()


def train_loop(model: Model, train: Dataset, config: RunConfig, val: Dataset | None = None,
               history_path=None, weights_path=None, weights_extra: dict | None = None) -> TrainResult:
    """Adam with a reduce-on-plateau schedule on the validation loss.

    Shuffling is driven by ``config.seed``. After the last epoch the model holds
    the weights of the epoch with the lowest validation loss (training loss
    when there is no validation set). History lines are appended per epoch.
    """
    config.validate()
    if len(train) == 0:
        raise ConfigError("training dataset is empty")
    if val is not None and len(val) == 0:
        val = None
    loss_fn = loss_for(config.task)
    params = model.parameters()
    opt = AdamState(lr=config.lr)
    sched = PlateauScheduler(config.plateau_factor, config.plateau_patience, config.min_lr)
    rng = np.random.default_rng(config.seed)
    if history_path is not None:
        Path(history_path).write_text("")

    history, times = [], []
    best_loss, best_epoch, best_state = np.inf, 0, model.copy_state()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        total, counts = 0.0, None
        for i in range(0, len(order), config.batch_size):
            idx = np.sort(order[i:i + config.batch_size])
            xb, yb = train.inputs[idx], train.targets[idx]
            with Tape() as tape:
                p = forward(model, xb, "train")
                loss = loss_fn(p, yb)
            grads = tape.backward(loss)
            adam_step(params, [grads.get(t) for t in params], opt)
            total += loss.item() * len(idx)
            c = _counts(p.data, yb)
            counts = c if counts is None else counts + c
        train_loss, train_iou = total / len(train), counts.mean_iou()
        if val is not None:
            val_loss, val_iou = evaluate(model, val, config.task, config.batch_size)
        else:
            val_loss, val_iou = train_loss, train_iou
        times.append(time.perf_counter() - t0)

        if val_loss < best_loss:
            best_loss, best_epoch, best_state = val_loss, epoch, model.copy_state()
            if weights_path is not None:
                save_weights(model, weights_path, extra=dict(weights_extra or {}, epoch=epoch))
        record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                  "train_iou": train_iou, "val_iou": val_iou, "lr": opt.lr}
        sched.step(val_loss, opt)
        history.append(record)
        if history_path is not None:
            with open(history_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    model.load_state(best_state)
    return TrainResult(history, best_state, best_epoch, times)


# ---------------------------------------------------------------------------
# inference

def predict_slices(model: Model, inputs: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """(N, 3, S, S) -> (N, S, S) probabilities."""
    out = [forward(model, inputs[i:i + batch_size], "infer").data[:, 0] for i in range(0, len(inputs), batch_size)]
    return np.concatenate(out).astype(np.float32)


def predict_volume(model: Model, volume: np.ndarray, input_mode: str = "pseudocolor",
                   patch_size: int | None = None, min_overlap: int = 0, batch_size: int = 8,
                   params: PseudocolorParams = DEFAULT_PARAMS) -> np.ndarray:
    """Per-voxel probabilities with the input's (Z, Y, X) shape.

    Slices (or tiles of ``patch_size``) are resized to the model input size,
    predicted, resized back bilinearly and, for tiles, averaged where they overlap.
    """
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise DimensionError(f"expected a (Z, Y, X) volume, got {vol.shape}")
    Z, H, W = vol.shape
    S = model.config.input_size
    full = pseudocolor_volume(vol, params, mode=input_mode)
    if patch_size is None:
        plan = TilePlan(H, W, 0, [(0, 0)])
        windows = [full]
    else:
        plan = tile_plan(H, W, patch_size, min_overlap)
        windows = [full[..., y:y + patch_size, x:x + patch_size] for y, x in plan.origins]
    per_window = []
    for win in windows:
        h, w = win.shape[-2:]
        if (h, w) == (S, S):
            x = win
        else:
            x = np.stack([[resize_bilinear(c, S, S) for c in sl] for sl in win]).astype(np.float32)
        probs = predict_slices(model, x, batch_size)
        if (h, w) != (S, S):
            probs = np.stack([resize_bilinear(p, h, w) for p in probs])
        per_window.append(probs)
    if patch_size is None:
        return per_window[0].astype(np.float32)
    return np.stack([stitch(plan, [pw[z] for pw in per_window]) for z in range(Z)]).astype(np.float32)

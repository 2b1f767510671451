"""Training, multi-trial evaluation and checkpoint I/O."""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .augment import lossy_roundtrip
from .clustering import AssignMode
from .encoder import level_loss
from .labels import Annotation
from .metrics import MetricsReport, PredictionRecord, aggregate, average_trials
from .model import MamConfig, MamNet, images_to_tensor
from .numeric import DTYPE, Adam, RngStream

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MAMKITCK"
CHECKPOINT_VERSION = 1
SEED_ENV = "MAMKIT_SEED"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    lr_cnn: float = 2e-4
    lr_transformer: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    epochs: int = 30
    patience: int = 3
    seed: int = 0
    augment: bool = True


# ----------------------------------------------------------------------------
# config file
# ----------------------------------------------------------------------------

_TRAIN_KEYS = {"batch_size": int, "lr_cnn": float, "lr_transformer": float, "epochs": int,
               "patience": int, "seed": int}
_MAM_KEYS = {"temperature": ("temperature", float), "model_width": ("width", int),
             "depth": ("depth", int), "heads": ("heads", int)}


def _parse_rates(text: str) -> tuple[float, ...]:
    return tuple(float(Fraction(part.strip())) for part in text.strip("[]() ").split(",") if part.strip())


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` (or ``key: value``) lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":"
        key, found, value = line.partition(sep)
        if not found:
            raise ValueError(f"config line {lineno}: expected key = value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def build_configs(
    values: dict[str, str | None],
    train: TrainConfig = TrainConfig(),
    mam: MamConfig = MamConfig(),
    environ: dict[str, str] | None = None,
) -> tuple[TrainConfig, MamConfig]:
    """Apply key/value overrides (file first, flags later), then ``MAMKIT_SEED``."""
    t_kw, m_kw = {}, {}
    for key, value in values.items():
        if value is None:
            continue
        if key in _TRAIN_KEYS:
            t_kw[key] = _TRAIN_KEYS[key](value)
        elif key in _MAM_KEYS:
            name, cast = _MAM_KEYS[key]
            m_kw[name] = cast(value)
        elif key == "rates":
            m_kw["rates"] = value if isinstance(value, tuple) else _parse_rates(str(value))
        else:
            raise ValueError(f"unknown config key {key!r}")
    env = os.environ if environ is None else environ
    if env.get(SEED_ENV):
        t_kw["seed"] = int(env[SEED_ENV])
    return replace(train, **t_kw), replace(mam, **m_kw)


def load_config_file(path: str | Path | None) -> dict[str, str]:
    return parse_config_text(Path(path).read_text()) if path else {}


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: MamNet, meta: dict | None = None) -> None:
    """Named float64 tensors behind a JSON header that echoes the model config."""
    state = model.state_dict()
    header = {
        "format": CHECKPOINT_VERSION,
        "config": model.config.to_json(),
        "meta": meta or {},
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for v in state.values():
            fh.write(v.detach().to(DTYPE).contiguous().numpy().astype("<f8").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    data = path.read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 8 + struct.calcsize("<IQ")
    header = json.loads(data[offset : offset + hlen])
    offset += hlen
    tensors = {}
    for entry in header["tensors"]:
        count = math.prod(entry["shape"])
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float64))
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return header, tensors


def load_checkpoint(path: str | Path) -> tuple[MamNet, dict]:
    header, tensors = read_checkpoint(path)
    model = MamNet(MamConfig.from_json(header["config"]))
    model.load_state_dict(tensors)
    return model, header.get("meta", {})


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------


def augment_batch(images: np.ndarray, streams: Sequence[RngStream], enabled: bool = True) -> torch.Tensor:
    if enabled:
        images = np.stack([lossy_roundtrip(img, rng)[0] for img, rng in zip(images, streams)])
    return images_to_tensor(images)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_metrics: dict

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: MamNet
    history: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield start, min(start + size, n)


@torch.no_grad()
def predict_levels(
    model: MamNet,
    images: np.ndarray,
    streams: Sequence[RngStream] | None,
    batch_size: int = 32,
    labels: np.ndarray | None = None,
) -> tuple[np.ndarray, float | None]:
    """Argmax levels (eval-mode clustering) and, with ``labels``, the mean loss."""
    preds, total = [], 0.0
    for lo, hi in _batches(len(images), batch_size):
        x = augment_batch(images[lo:hi], streams[lo:hi] if streams else [], streams is not None)
        logits = model(x, AssignMode.EVAL)
        preds.append(logits.argmax(dim=-1).numpy())
        if labels is not None:
            total += float(level_loss(logits, torch.from_numpy(labels[lo:hi]))) * (hi - lo)
    pred = np.concatenate(preds) if preds else np.empty((0, 4), dtype=np.int64)
    return pred, (total / len(images) if labels is not None and len(images) else None)


def to_records(pred: np.ndarray, labels: np.ndarray, ids: Sequence[int] | None = None) -> list[PredictionRecord]:
    ids = range(len(pred)) if ids is None else ids
    return [
        PredictionRecord(int(i), Annotation.from_levels(p.tolist()), Annotation.from_levels(t.tolist()))
        for i, p, t in zip(ids, pred, labels)
    ]


def train(
    model: MamNet,
    train_data: tuple[np.ndarray, np.ndarray],
    val_data: tuple[np.ndarray, np.ndarray],
    config: TrainConfig = TrainConfig(),
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Minimize the summed level cross-entropy with Adam and validation-loss early exit.

    Batch order, augmentation and Gumbel draws depend only on
    ``(seed, epoch, index)``. The returned model holds the best-validation weights.
    """
    x_train, y_train = train_data
    x_val, y_val = val_data
    if len(x_train) == 0:
        raise DataError("training split is empty")
    if len(x_val) == 0:
        raise DataError("validation split is empty")
    groups = model.parameter_groups()
    opt = Adam(
        [([p for _, p in groups["cnn"]], config.lr_cnn),
         ([p for _, p in groups["transformer"]], config.lr_transformer)],
        betas=config.betas,
    )
    seed = config.seed
    val_streams = [RngStream(seed, f"val-augment/{i}") for i in range(len(x_val))]
    result = TrainResult(model)
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = RngStream(seed, f"shuffle/{epoch}").permutation(len(x_train))
        total = 0.0
        model.train()
        for step, (lo, hi) in enumerate(_batches(len(order), config.batch_size)):
            idx = order[lo:hi]
            streams = [RngStream(seed, f"train-augment/{epoch}/{i}") for i in idx]
            x = augment_batch(x_train[idx], streams, config.augment)
            y = torch.from_numpy(y_train[idx])
            loss = model.loss(x, y, AssignMode.TRAIN, RngStream(seed, f"gumbel/{epoch}/{step}"))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        model.eval()
        pred, val_loss = predict_levels(
            model, x_val, val_streams if config.augment else None, labels=y_val
        )
        report = aggregate(to_records(pred, y_val))
        entry = EpochLog(epoch, total / len(x_train), val_loss, report.to_json())
        result.history.append(entry)
        log.info("epoch %d train_loss %.4f val_loss %.4f", epoch, entry.train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(entry)
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state_dict(best_state)
    return result


def write_run_log(path: str | Path, history: Sequence[EpochLog]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in history:
            fh.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------


@dataclass
class EvalResult:
    average: MetricsReport
    trials: list[MetricsReport]
    predictions: list[np.ndarray]


def evaluate(
    model: MamNet,
    images: np.ndarray,
    labels: np.ndarray,
    trials: int = 5,
    seed: int = 0,
    trial_seeds: Sequence[int] | None = None,
    augment: bool = True,
    batch_size: int = 32,
) -> EvalResult:
    """Average TP/TN/AC over ``trials`` independently augmented test passes."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if len(images) == 0:
        raise DataError("evaluation split is empty")
    if trial_seeds is None:
        trial_seeds = [seed + t for t in range(trials)]
    if len(trial_seeds) != trials:
        raise ValueError(f"{trials} trials but {len(trial_seeds)} trial seeds")
    model.eval()
    reports, preds = [], []
    for t_seed in trial_seeds:
        streams = [RngStream(t_seed, f"eval-augment/{i}") for i in range(len(images))] if augment else None
        pred, _ = predict_levels(model, images, streams, batch_size)
        preds.append(pred)
        reports.append(aggregate(to_records(pred, labels)))
    return EvalResult(average_trials(reports, expected=trials), reports, preds)


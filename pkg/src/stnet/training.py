"""Training loop, evaluation, and checkpointing.

Training is bitwise reproducible given (seed, config, dataset bytes): the
shuffle generator, optimizer moments, and step counters all serialize into
checkpoints, so resuming replays the exact trajectory of an uninterrupted
run. Checkpoints are a JSON header (config, manifest, optimizer scalars,
RNG state, history) followed by raw little-endian parameter and moment
blobs in manifest order.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetContainer, DimensionMismatchError, denormalize
from .metrics import NmseResult, mse_loss, nmse
from .model import ModelConfig, Stnet
from .optim import Adam
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"STCK"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIQ")


class DivergenceError(RuntimeError):
    """Training loss went non-finite; carries the last good checkpoint path."""

    def __init__(self, message: str, last_checkpoint: str | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 200
    epochs: int = 1000
    max_steps: int | None = None        # stop once this many Adam steps ran
    lr: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 0           # epochs between checkpoints; 0 = only final
    validate_every: int = 1             # epochs between validation passes
    target_nmse_db: float | None = None  # early stop once train NMSE reaches this
    out_dir: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_nmse_db: float | None
    val_nmse_db: float | None
    seconds: float
    step: int


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def final_loss(self) -> float:
        return self.records[-1].train_loss if self.records else float("nan")


@dataclass(frozen=True)
class EvalReport:
    scenario: str
    gamma: str
    nmse_db: float
    nmse_linear: float
    samples: int
    excluded: int


def _check_dims(model: Stnet, dataset: DatasetContainer) -> None:
    cfg = model.config
    if dataset.n_delay != cfg.n_delay or dataset.n_antennas != cfg.n_antennas:
        raise DimensionMismatchError(
            f"dataset grid {dataset.n_delay}x{dataset.n_antennas} != model "
            f"{cfg.n_delay}x{cfg.n_antennas}")


def reconstruct(model: Stnet, samples: np.ndarray, batch_size: int = 200) -> np.ndarray:
    """Run the autoencoder over normalized samples without recording gradients."""
    outputs = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            batch = Tensor(samples[start:start + batch_size])
            outputs.append(model(batch).data)
    return np.concatenate(outputs) if outputs else np.zeros_like(samples)


def evaluate(model: Stnet, dataset: DatasetContainer,
             batch_size: int = 200) -> EvalReport:
    """NMSE of the model over a dataset, on de-normalized channels."""
    _check_dims(model, dataset)
    recon = reconstruct(model, dataset.samples, batch_size)
    meta = dataset.normalization
    result = nmse(dataset.denormalized(),
                  denormalize(recon.astype(np.float64), meta))
    return EvalReport(scenario=dataset.scenario, gamma=str(model.config.gamma),
                      nmse_db=result.db, nmse_linear=result.linear,
                      samples=result.samples, excluded=result.excluded)


def train(model: Stnet, dataset: DatasetContainer, config: TrainConfig,
          val_dataset: DatasetContainer | None = None,
          resume_from: str | Path | None = None) -> TrainHistory:
    """Adam on batch MSE with seeded shuffling and periodic checkpoints."""
    _check_dims(model, dataset)
    if len(dataset) == 0:
        raise ValueError("dataset is empty")

    params = model.params()
    optimizer = Adam(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    start_epoch = 0
    step = 0

    if resume_from is not None:
        state = load_checkpoint(resume_from, model=model, optimizer=optimizer)
        rng.bit_generator.state = state["rng_state"]
        start_epoch = state["epoch"]
        step = state["step"]
        history.records = [EpochRecord(**r) for r in state["history"]]

    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    last_checkpoint: str | None = None

    def save(tag: str, epoch: int) -> None:
        nonlocal last_checkpoint
        if out_dir is None:
            return
        path = out_dir / f"checkpoint_{tag}.stck"
        save_checkpoint(path, model, optimizer, rng_state=rng.bit_generator.state,
                        epoch=epoch, step=step, history=history)
        last_checkpoint = str(path)

    samples = dataset.samples
    n = len(samples)
    done = False
    for epoch in range(start_epoch, config.epochs):
        tic = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            batch = Tensor(samples[idx])
            loss = mse_loss(batch, model(batch))
            value = float(loss.data)
            if not np.isfinite(value):
                save("diverged_last_good", epoch)
                raise DivergenceError(
                    f"loss became non-finite at epoch {epoch}, step {step}",
                    last_checkpoint)
            losses.append(value)
            backward(loss)
            optimizer.step()
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break

        train_nmse_db = None
        val_nmse_db = None
        if config.validate_every and (epoch + 1) % config.validate_every == 0:
            train_nmse_db = evaluate(model, dataset, config.batch_size).nmse_db
            if val_dataset is not None:
                val_nmse_db = evaluate(model, val_dataset, config.batch_size).nmse_db

        history.records.append(EpochRecord(
            epoch=epoch, train_loss=float(np.mean(losses)),
            train_nmse_db=train_nmse_db, val_nmse_db=val_nmse_db,
            seconds=time.perf_counter() - tic, step=step))

        if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save(f"epoch{epoch + 1}", epoch + 1)
        if (config.target_nmse_db is not None and train_nmse_db is not None
                and train_nmse_db <= config.target_nmse_db):
            history.stopped_early = True
            done = True
        if done:
            break

    save("final", epoch + 1 if history.records else start_epoch)
    return history


# --------------------------------------------------------------------------
# checkpoint format
# --------------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: Stnet, optimizer: Adam,
                    rng_state: dict, epoch: int, step: int,
                    history: TrainHistory | None = None) -> None:
    params = model.params()
    manifest = [{"name": name, "shape": list(p.shape), "dtype": str(p.data.dtype)}
                for name, p in params.items()]
    header = {
        "model_config": asdict(model.config),
        "manifest": manifest,
        "optimizer": {"lr": optimizer.lr, "beta1": optimizer.beta1,
                      "beta2": optimizer.beta2, "eps": optimizer.eps,
                      "t": optimizer.t},
        "rng_state": rng_state,
        "epoch": epoch,
        "step": step,
        "history": [asdict(r) for r in (history.records if history else [])],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name, p in params.items():
            fh.write(np.ascontiguousarray(p.data).tobytes())
        for name in params:
            fh.write(np.ascontiguousarray(optimizer.m[name]).tobytes())
            fh.write(np.ascontiguousarray(optimizer.v[name]).tobytes())


def load_checkpoint(path: str | Path, model: Stnet | None = None,
                    optimizer: Adam | None = None) -> dict:
    """Read a checkpoint; restores into ``model``/``optimizer`` when given.

    Returns the header dict plus a freshly built model under ``"model"``
    when none was passed in.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise ValueError(f"{path}: not a checkpoint (too small)")
    magic, version, json_len = _CKPT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = _CKPT_HEADER.size
    header = json.loads(raw[offset:offset + json_len].decode())
    offset += json_len

    config = ModelConfig(**header["model_config"])
    if model is None:
        model = Stnet(config)
    elif asdict(model.config) != asdict(config):
        raise ValueError(f"{path}: checkpoint config {config} does not match model")

    params = model.params()
    arrays: dict[str, np.ndarray] = {}
    for entry in header["manifest"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dtype.itemsize
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype=dtype, count=count, offset=offset).reshape(entry["shape"]).copy()
        offset += nbytes
    for name, p in params.items():
        p.data[...] = arrays[name]

    if optimizer is not None:
        opt_meta = header["optimizer"]
        optimizer.lr = opt_meta["lr"]
        optimizer.beta1 = opt_meta["beta1"]
        optimizer.beta2 = opt_meta["beta2"]
        optimizer.eps = opt_meta["eps"]
        optimizer.t = opt_meta["t"]
        for entry in header["manifest"]:
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            m = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
            offset += count * dtype.itemsize
            v = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
            offset += count * dtype.itemsize
            optimizer.m[entry["name"]][...] = m.reshape(entry["shape"])
            optimizer.v[entry["name"]][...] = v.reshape(entry["shape"])

    header["model"] = model
    return header

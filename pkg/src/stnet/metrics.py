"""Reconstruction metrics: batch-mean squared error (the training loss) and
normalized MSE with its dB form (the reporting metric)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeMismatchError, Tensor, mul, scale, sub, tensor_sum

NMSE_DB_FLOOR = -300.0


def mse_loss(target: Tensor, reconstruction: Tensor) -> Tensor:
    """(1/B) * sum of squared errors over the whole batch tensor."""
    if target.shape != reconstruction.shape:
        raise ShapeMismatchError(f"mse: shapes {target.shape} != {reconstruction.shape}")
    batch = target.shape[0]
    diff = sub(target, reconstruction)
    return scale(tensor_sum(mul(diff, diff)), 1.0 / batch)


@dataclass(frozen=True)
class NmseResult:
    linear: float
    db: float
    samples: int
    excluded: int  # zero-norm samples dropped from the average

    def __str__(self) -> str:
        return f"NMSE {self.db:.2f} dB over {self.samples} samples"


def nmse(target: np.ndarray, reconstruction: np.ndarray) -> NmseResult:
    """Mean over samples of ||H - H_hat||^2 / ||H||^2, also in dB.

    Inputs are [batch, ...] arrays; zero-norm samples are excluded from the
    average and reported. The dB value is floored at -300 so an exact
    reconstruction stays finite.
    """
    target = np.asarray(target, dtype=np.float64)
    reconstruction = np.asarray(reconstruction, dtype=np.float64)
    if target.shape != reconstruction.shape:
        raise ShapeMismatchError(f"nmse: shapes {target.shape} != {reconstruction.shape}")
    flat_t = target.reshape(target.shape[0], -1)
    flat_r = reconstruction.reshape(reconstruction.shape[0], -1)
    power = np.square(flat_t).sum(axis=1)
    err = np.square(flat_t - flat_r).sum(axis=1)
    keep = power > 0
    excluded = int((~keep).sum())
    if not keep.any():
        raise ValueError("nmse: every sample has zero norm")
    linear = float((err[keep] / power[keep]).mean())
    db = 10.0 * np.log10(linear) if linear > 0 else NMSE_DB_FLOOR
    return NmseResult(linear=linear, db=float(max(db, NMSE_DB_FLOOR)),
                      samples=int(keep.sum()), excluded=excluded)

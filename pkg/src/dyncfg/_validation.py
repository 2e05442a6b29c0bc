"""Input validation helpers shared by the public entry points."""

from __future__ import annotations

import numpy as np


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


def as_latents(x, d: int | None = None, name: str = "x") -> np.ndarray:
    """Return ``x`` as a float64 array of shape (n, d).

    A 1-D input is treated as a single latent.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ContractError(f"{name} must be 1-D or 2-D, got shape {arr.shape}")
    if d is not None and arr.shape[1] != d:
        raise ContractError(f"{name} has dimension {arr.shape[1]}, expected {d}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite entries")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, names=("a", "b")) -> None:
    if np.shape(a) != np.shape(b):
        raise ContractError(
            f"dimension mismatch: {names[0]} {np.shape(a)} vs {names[1]} {np.shape(b)}"
        )


def as_timesteps(t, n: int, T: int) -> np.ndarray:
    """Broadcast a scalar or per-row timestep to an int array of length n."""
    arr = np.asarray(t)
    if arr.ndim == 0:
        arr = np.full(n, int(arr), dtype=np.int64)
    else:
        arr = arr.astype(np.int64).reshape(-1)
        if arr.shape[0] != n:
            raise ContractError(f"got {arr.shape[0]} timesteps for {n} latents")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > T:
        raise ContractError(f"timestep outside [0, {T}]")
    return arr


def as_conditions(cond, n: int, n_classes: int, allow_null: bool = True) -> np.ndarray:
    """Broadcast a condition to an int array of length n; -1 encodes the null condition."""
    if cond is None:
        if not allow_null:
            raise ContractError("conditional scorer invoked with the null condition")
        return np.full(n, -1, dtype=np.int64)
    arr = np.asarray(cond)
    if arr.ndim == 0:
        arr = np.full(n, int(arr), dtype=np.int64)
    else:
        arr = arr.astype(np.int64).reshape(-1)
        if arr.shape[0] != n:
            raise ContractError(f"got {arr.shape[0]} conditions for {n} latents")
    if arr.max(initial=-1) >= n_classes or arr.min(initial=0) < -1:
        raise ContractError(f"class label outside [0, {n_classes})")
    if not allow_null and np.any(arr < 0):
        raise ContractError("conditional scorer invoked with the null condition")
    return arr

"""Input validation helpers for the array-facing estimator API."""

from __future__ import annotations

import numpy as np

from .events import CameraGeometry, EventSlice


def check_event_array(X, geometry: CameraGeometry) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Validate an (n, 3) [t, x, y] array and return typed columns.

    ``x`` and ``y`` must hold integer pixel coordinates inside the
    geometry; ``t`` must be finite, non-negative seconds.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 3:
        raise ValueError(f"expected an (n, 3) array of [t, x, y], got shape {X.shape}")
    t = X[:, 0]
    x = X[:, 1]
    y = X[:, 2]
    if not np.all(np.isfinite(X[:, :3])):
        raise ValueError("event array contains non-finite values")
    if np.any(t < 0):
        raise ValueError("timestamps must be non-negative seconds")
    if np.any(x != np.round(x)) or np.any(y != np.round(y)):
        raise ValueError("pixel coordinates must be integer-valued")
    xi = x.astype(np.int32)
    yi = y.astype(np.int32)
    inside = geometry.contains(xi, yi)
    if not np.all(inside):
        bad = int(np.flatnonzero(~inside)[0])
        raise ValueError(
            f"event {bad} at ({xi[bad]}, {yi[bad]}) outside geometry "
            f"{geometry.width}x{geometry.height}"
        )
    return t, xi, yi


def check_flow_array(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n, 2):
        raise ValueError(f"expected ({n}, 2) flow targets, got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("flow targets must be finite")
    return y


def slice_from_array(X, geometry: CameraGeometry, window: float) -> EventSlice:
    """Build one event slice from an array, sorting by time if needed.

    The earliest timestamp becomes the window start; the span must fit the
    declared window.
    """
    t, x, y = check_event_array(X, geometry)
    if len(t) and np.any(np.diff(t) < 0):
        order = np.argsort(t, kind="stable")
        t, x, y = t[order], x[order], y[order]
    t_start = float(t[0]) if len(t) else 0.0
    if len(t) and float(t[-1]) - t_start > window:
        raise ValueError(
            f"events span {float(t[-1]) - t_start:.6f}s which exceeds the slice "
            f"window {window:.6f}s; split the stream into slices first"
        )
    return EventSlice(t=t, x=x, y=y, t_start=t_start, window=window, geometry=geometry)

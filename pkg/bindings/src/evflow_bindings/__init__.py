"""Array-in/array-out access to the event encoder and flow head.

This package is a deliberately thin adapter for scripting workflows:
events travel as three parallel flat arrays, queries as an index array,
and results come back as plain numeric arrays row-aligned with the query
order. Outputs are bit-identical to the core library on the same inputs
and precision — the functions below construct the same slice objects and
call the same kernels, nothing is re-implemented.

All heavy computation happens inside numpy kernels, which release the
interpreter lock; concurrent calls on distinct inputs are safe.
"""

from __future__ import annotations

from typing import Mapping, Tuple, Union

import numpy as np

from evflow import (
    CameraGeometry,
    EncoderConfig,
    EventSlice,
    QuerySet,
)
from evflow.encoder import encode as _core_encode
from evflow.flow import embed_to_features, load_weights, predict_flows
from evflow.presets import Preset, load_config_preset

__all__ = ["encode", "predict", "load_config_preset"]

__version__ = "0.1.0"

ConfigLike = Union[Preset, Mapping]


def _resolve_config(config: ConfigLike) -> Tuple[EncoderConfig, CameraGeometry]:
    if isinstance(config, Preset):
        return config.encoder, config.geometry
    if isinstance(config, Mapping):
        geometry = CameraGeometry(int(config.get("width", 640)),
                                  int(config.get("height", 480)))
        cfg = EncoderConfig(
            delta_t=float(config["delta_t"]),
            delta_x=int(config.get("delta_x", 10)),
            delta_y=int(config.get("delta_y", 10)),
            embed_dim=int(config.get("embed_dim", 64)),
            sigma2=float(config.get("sigma2", 25.0)),
            seeds=tuple(config.get("seeds", (0, 1, 2))),
            precision=str(config.get("precision", "f32")),
        )
        return cfg, geometry
    raise TypeError("config must be a Preset or a mapping of encoder settings")


def _as_slice(t, x, y, queries, cfg: EncoderConfig, geometry: CameraGeometry):
    """Validate parallel arrays, sort by time, and remap query indices.

    Query indices refer to positions in the arrays as given; the earliest
    timestamp becomes the window start (the encoding depends only on time
    differences).
    """
    t = np.ascontiguousarray(t, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.int32)
    y = np.ascontiguousarray(y, dtype=np.int32)
    if not (len(t) == len(x) == len(y)):
        raise ValueError(
            f"parallel arrays must share one length, got t={len(t)} x={len(x)} y={len(y)}"
        )
    queries = np.asarray(queries, dtype=np.int64)
    if queries.ndim != 1:
        raise ValueError("queries must be a flat index array")
    if len(queries):
        bad = np.flatnonzero((queries < 0) | (queries >= len(t)))
        if len(bad):
            raise IndexError(
                f"query index {queries[bad[0]]} at position {bad[0]} outside [0, {len(t)})"
            )
    if np.any(np.diff(t) < 0):
        order = np.argsort(t, kind="stable")
        inverse = np.empty_like(order)
        inverse[order] = np.arange(len(order))
        t, x, y = t[order], x[order], y[order]
        queries = inverse[queries]
    t_start = float(t[0]) if len(t) else 0.0
    if len(t) and float(t[-1]) - t_start > cfg.window:
        raise ValueError(
            f"events span {float(t[-1]) - t_start:.6f}s > slice window {cfg.window:.6f}s"
        )
    sl = EventSlice(t=t, x=x, y=y, t_start=t_start, window=cfg.window,
                    geometry=geometry)
    return sl, QuerySet(queries)


def encode(t, x, y, queries, config: ConfigLike, threads: int = 1) -> np.ndarray:
    """Embed each queried event's neighborhood; returns (n_queries, 2*D).

    Row layout is ``[Re(emb); Im(emb)]``, row-aligned with ``queries``.
    """
    cfg, geometry = _resolve_config(config)
    sl, query_set = _as_slice(t, x, y, queries, cfg, geometry)
    batch = _core_encode(sl, query_set, cfg, threads=threads)
    return embed_to_features(batch)


def predict(t, x, y, queries, weights_path: str, config: ConfigLike,
            threads: int = 1) -> np.ndarray:
    """Predict normal flow for each queried event; returns (n_queries, 2).

    ``weights_path`` must point to a weight file whose embedding dimension
    matches the config; its embedded frequency vectors are used.
    """
    cfg, geometry = _resolve_config(config)
    sl, query_set = _as_slice(t, x, y, queries, cfg, geometry)
    weights = load_weights(weights_path)
    predictions, failures = predict_flows(sl, query_set, cfg, weights, threads=threads)
    if failures:
        index, reason = failures[0]
        raise ValueError(f"query for event {index} failed: {reason}")
    out = np.empty((len(query_set), 2), dtype=np.float32)
    for row, pred in enumerate(predictions):
        out[row, 0] = pred.nx
        out[row, 1] = pred.ny
    return out

"""Accuracy metrics built on the generalized normal-flow constraint.

Metric definitions used throughout (also written into every report header,
since published summary tables do not spell them out):

* PEE: mean over valid pairs of ``|n · (u - n)| / |n|`` — the projected
  endpoint error of the ground-truth flow ``u`` against prediction ``n``,
  in pixels per second. Zero exactly when the constraint ``n·(u-n)=0``
  holds.
* %Pos: ``100 × fraction`` of valid pairs with ``n · u > 0``, i.e. the
  prediction points within 90 degrees of the true flow. ``n · u == 0``
  counts as not positive.

Pairs with a zero-magnitude prediction cannot be scored; they are excluded
and their count reported.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import EventParseError, GeometryError
from .events import CameraGeometry

FLOWMAP_MAGIC = b"FLW1"

METRIC_DEFINITIONS = (
    "PEE = mean |n.(u-n)|/|n| over valid pairs (pixels/second); "
    "pct_pos = 100 * fraction of valid pairs with n.u > 0 (ties count as not positive). "
    "Published tables may normalize differently (per-pixel vs per-event averaging)."
)


@dataclass(frozen=True)
class FlowPair:
    n_hat: np.ndarray
    u: np.ndarray
    valid: bool = True


@dataclass
class FlowMap:
    """Dense per-pixel ground-truth optical flow, indexed ``flow[x, y]``."""

    flow: np.ndarray  # (W, H, 2) float32
    valid: np.ndarray  # (W, H) bool
    geometry: CameraGeometry

    def __post_init__(self) -> None:
        W, H = self.geometry.width, self.geometry.height
        if self.flow.shape != (W, H, 2) or self.valid.shape != (W, H):
            raise GeometryError(
                f"flow map arrays {self.flow.shape}/{self.valid.shape} do not match "
                f"geometry {W}x{H}"
            )


def constraint_residual(n_hat: np.ndarray, u: np.ndarray) -> float:
    """``|n·(u−n)| / |n|``: how far u's projection onto n falls from |n|."""
    n_hat = np.asarray(n_hat, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    norm = np.linalg.norm(n_hat)
    if norm == 0:
        raise ValueError("constraint residual undefined for zero-magnitude prediction")
    return float(abs(np.dot(n_hat, u - n_hat)) / norm)


def _as_arrays(pairs: Iterable[FlowPair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pairs = list(pairs)
    if not pairs:
        return np.empty((0, 2)), np.empty((0, 2)), np.empty(0, dtype=bool)
    n_hat = np.array([p.n_hat for p in pairs], dtype=np.float64)
    u = np.array([p.u for p in pairs], dtype=np.float64)
    valid = np.array([p.valid for p in pairs], dtype=bool)
    return n_hat, u, valid


def pee(pairs: Iterable[FlowPair]) -> float:
    """Mean projected endpoint error over valid, nonzero-prediction pairs."""
    n_hat, u, valid = _as_arrays(pairs)
    norms = np.linalg.norm(n_hat, axis=1)
    usable = valid & (norms > 0)
    if not usable.any():
        raise ValueError("PEE needs at least one valid pair with |n| > 0")
    r = np.abs(np.sum(n_hat * (u - n_hat), axis=1))
    return float(np.mean(r[usable] / norms[usable]))


def pct_pos(pairs: Iterable[FlowPair]) -> float:
    """Percentage of valid pairs predicting within 90 degrees of u."""
    n_hat, u, valid = _as_arrays(pairs)
    if not valid.any():
        raise ValueError("pct_pos needs at least one valid pair")
    dots = np.sum(n_hat * u, axis=1)
    return float(100.0 * np.mean(dots[valid] > 0))


@dataclass
class SequenceMetrics:
    sequence: str
    pee: Optional[float]
    pct_pos: Optional[float]
    n_valid: int
    n_excluded: int


@dataclass
class EvalReport:
    rows: list[SequenceMetrics] = field(default_factory=list)
    definitions: str = METRIC_DEFINITIONS

    @property
    def aggregate(self) -> SequenceMetrics:
        for row in self.rows:
            if row.sequence == "aggregate":
                return row
        raise ValueError("report has no aggregate row")


def _score(sequence: str, n_hat: np.ndarray, u: np.ndarray, valid: np.ndarray) -> SequenceMetrics:
    norms = np.linalg.norm(n_hat, axis=1) if len(n_hat) else np.empty(0)
    usable = valid & (norms > 0)
    excluded = int(len(valid) - usable.sum())
    if not usable.any():
        return SequenceMetrics(sequence, None, None, 0, excluded)
    r = np.abs(np.sum(n_hat[usable] * (u[usable] - n_hat[usable]), axis=1)) / norms[usable]
    dots = np.sum(n_hat[usable] * u[usable], axis=1)
    return SequenceMetrics(
        sequence,
        float(np.mean(r)),
        float(100.0 * np.mean(dots > 0)),
        int(usable.sum()),
        excluded,
    )


def evaluate(
    pred_x: np.ndarray,
    pred_y: np.ndarray,
    pred_flow: np.ndarray,
    gt: FlowMap,
    sequences: Optional[Sequence[str]] = None,
) -> EvalReport:
    """Pair each predicted event with the GT flow at its pixel and score.

    Lookup is nearest-pixel (no interpolation); predictions at GT-invalid
    pixels are excluded and counted. ``sequences`` optionally labels each
    prediction for per-sequence rows; an aggregate row is always emitted.
    """
    pred_x = np.asarray(pred_x, dtype=np.int64)
    pred_y = np.asarray(pred_y, dtype=np.int64)
    pred_flow = np.asarray(pred_flow, dtype=np.float64)
    if not np.all(gt.geometry.contains(pred_x, pred_y)):
        bad = int(np.flatnonzero(~gt.geometry.contains(pred_x, pred_y))[0])
        raise GeometryError(
            f"prediction {bad} at ({pred_x[bad]}, {pred_y[bad]}) outside GT geometry "
            f"{gt.geometry.width}x{gt.geometry.height}"
        )
    valid = gt.valid[pred_x, pred_y]
    u = gt.flow[pred_x, pred_y].astype(np.float64)

    report = EvalReport()
    if sequences is not None:
        labels = np.asarray(sequences)
        for name in sorted(set(labels.tolist())):
            mask = labels == name
            report.rows.append(_score(str(name), pred_flow[mask], u[mask], valid[mask]))
    report.rows.append(_score("aggregate", pred_flow, u, valid))
    return report


def write_report_csv(report: EvalReport, path: str, header_extra: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {report.definitions}\n")
        if header_extra:
            for line in header_extra.splitlines():
                fh.write(f"# {line}\n")
        fh.write("sequence,PEE,pct_pos,n_valid,n_excluded\n")
        for row in report.rows:
            pee_s = "" if row.pee is None else f"{row.pee:.9g}"
            pos_s = "" if row.pct_pos is None else f"{row.pct_pos:.9g}"
            fh.write(f"{row.sequence},{pee_s},{pos_s},{row.n_valid},{row.n_excluded}\n")


def write_flow_map(gt: FlowMap, path: str) -> None:
    """Serialize: magic, u32 W, u32 H, then per pixel f32 ux, f32 uy,
    u8 valid, row-major (y rows, x within a row), little-endian."""
    W, H = gt.geometry.width, gt.geometry.height
    record = np.dtype([("ux", "<f4"), ("uy", "<f4"), ("valid", "u1")])
    out = np.empty(W * H, dtype=record)
    # transpose to (H, W) so flat order is row-major over y then x
    out["ux"] = gt.flow[:, :, 0].T.reshape(-1)
    out["uy"] = gt.flow[:, :, 1].T.reshape(-1)
    out["valid"] = gt.valid.T.reshape(-1).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(FLOWMAP_MAGIC)
        fh.write(struct.pack("<II", W, H))
        fh.write(out.tobytes())


def read_flow_map(path: str) -> FlowMap:
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) < 12 or header[:4] != FLOWMAP_MAGIC:
            raise EventParseError(f"{path}: missing {FLOWMAP_MAGIC!r} header")
        W, H = struct.unpack("<II", header[4:12])
        payload = fh.read()
    record = np.dtype([("ux", "<f4"), ("uy", "<f4"), ("valid", "u1")])
    if len(payload) != W * H * record.itemsize:
        raise EventParseError(f"{path}: expected {W * H} pixel records, payload truncated")
    data = np.frombuffer(payload, dtype=record)
    flow = np.empty((W, H, 2), dtype=np.float32)
    flow[:, :, 0] = data["ux"].reshape(H, W).T
    flow[:, :, 1] = data["uy"].reshape(H, W).T
    valid = data["valid"].reshape(H, W).T.astype(bool)
    return FlowMap(flow=flow, valid=valid, geometry=CameraGeometry(W, H))

"""Local event encoding via random Fourier features with pixel-grid pooling.

Each queried event's spatiotemporal neighborhood is summarized as a
D-dimensional complex vector: the mean of ``exp(i * [dt/δt, dx/δx, dy/δy]
· [time_freqs; x_freqs; y_freqs])`` over all events within the spatial
window. Because pixel coordinates are integers, the spatial phase factors
take only ``(2δx+1)(2δy+1)`` distinct values, so the expensive per-pair sum
factorizes into two stages:

1. accumulate per-pixel temporal phase sums and event counts once for the
   whole slice (cost linear in the number of events), then
2. answer each query with a windowed sum over its ``(2δx+1)×(2δy+1)``
   pixel neighborhood using a precomputed spatial phase table, followed by
   a per-query temporal de-phasing (cost independent of slice size).

``oracle_encode`` performs the direct quadratic summation and exists solely
to validate the pooled path; ``kde_direct`` / ``reconstruct_density`` check
that the embedding really is a compressed Gaussian kernel density estimate
of the neighborhood.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionMismatchError, EmptyNeighborhoodError, EventParseError
from .events import Event, EventSlice, QuerySet, rebase_slice
from .rng import standard_normals

BASES_MAGIC = b"VKMB"

_REAL_DTYPES = {"f32": np.float32, "f64": np.float64}
_COMPLEX_DTYPES = {"f32": np.complex64, "f64": np.complex128}


@dataclass(frozen=True)
class EncoderConfig:
    """Parameters of the local event encoder.

    ``delta_t`` is the time radius in seconds (a slice spans ``2*delta_t``),
    ``delta_x`` / ``delta_y`` the integer pixel radii of the spatial window,
    ``embed_dim`` the embedding dimension, and ``sigma2`` the variance of
    the random frequency vectors. ``seeds`` feed the pinned generator for
    the time, x and y frequency vectors respectively.
    """

    delta_t: float
    delta_x: int = 10
    delta_y: int = 10
    embed_dim: int = 64
    sigma2: float = 25.0
    seeds: Tuple[int, int, int] = (0, 1, 2)
    precision: str = "f32"

    def __post_init__(self) -> None:
        if self.delta_t <= 0:
            raise ValueError("delta_t must be positive")
        if self.delta_x < 1 or self.delta_y < 1:
            raise ValueError("pixel radii must be >= 1")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.precision not in _REAL_DTYPES:
            raise ValueError(f"precision must be one of {sorted(_REAL_DTYPES)}")
        if len(self.seeds) != 3:
            raise ValueError("seeds must be a triple (time, x, y)")

    @property
    def window(self) -> float:
        return 2.0 * self.delta_t

    @property
    def real_dtype(self) -> np.dtype:
        return np.dtype(_REAL_DTYPES[self.precision])

    @property
    def complex_dtype(self) -> np.dtype:
        return np.dtype(_COMPLEX_DTYPES[self.precision])


@dataclass(frozen=True)
class Bases:
    """The three random frequency vectors; always stored in float64.

    Regenerating with the same (dim, sigma2, seeds) reproduces these
    bit-for-bit; checkpoints embed them verbatim instead of relying on
    that.
    """

    time_freqs: np.ndarray
    x_freqs: np.ndarray
    y_freqs: np.ndarray
    sigma2: float

    def __post_init__(self) -> None:
        for name in ("time_freqs", "x_freqs", "y_freqs"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 1 or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be a finite 1-d vector")
            object.__setattr__(self, name, arr)
        if not (len(self.time_freqs) == len(self.x_freqs) == len(self.y_freqs)):
            raise ValueError("frequency vectors must share one length")

    @property
    def dim(self) -> int:
        return len(self.time_freqs)


def generate_bases(cfg: EncoderConfig) -> Bases:
    """Draw the frequency vectors i.i.d. N(0, sigma2) from the pinned RNG."""
    scale = np.sqrt(cfg.sigma2)
    st, sx, sy = cfg.seeds
    return Bases(
        time_freqs=standard_normals(st, cfg.embed_dim) * scale,
        x_freqs=standard_normals(sx, cfg.embed_dim) * scale,
        y_freqs=standard_normals(sy, cfg.embed_dim) * scale,
        sigma2=cfg.sigma2,
    )


def bases_to_bytes(bases: Bases) -> bytes:
    parts = [BASES_MAGIC, struct.pack("<I", bases.dim), struct.pack("<d", bases.sigma2)]
    for arr in (bases.time_freqs, bases.x_freqs, bases.y_freqs):
        parts.append(arr.astype("<f8").tobytes())
    return b"".join(parts)


def bases_from_bytes(buf: bytes, offset: int = 0) -> Tuple[Bases, int]:
    """Parse a bases block; returns (bases, offset past the block)."""
    if buf[offset : offset + 4] != BASES_MAGIC:
        raise EventParseError(f"missing {BASES_MAGIC!r} magic at offset {offset}")
    dim = struct.unpack_from("<I", buf, offset + 4)[0]
    sigma2 = struct.unpack_from("<d", buf, offset + 8)[0]
    pos = offset + 16
    vecs = []
    for _ in range(3):
        vecs.append(np.frombuffer(buf, dtype="<f8", count=dim, offset=pos).copy())
        pos += 8 * dim
    return Bases(vecs[0], vecs[1], vecs[2], sigma2), pos


def export_bases(bases: Bases, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(bases_to_bytes(bases))


def load_bases(path: str) -> Bases:
    with open(path, "rb") as fh:
        buf = fh.read()
    bases, _ = bases_from_bytes(buf)
    return bases


@dataclass(frozen=True)
class SpatialPhaseTable:
    """Per-offset spatial phase factors ``exp(i dx/δx X) * exp(i dy/δy Y)``.

    ``table[dx + δx, dy + δy, :]`` holds the factor for window offset
    (dx, dy); every entry has unit modulus.
    """

    table: np.ndarray
    delta_x: int
    delta_y: int


def precompute_spatial_phases(bases: Bases, cfg: EncoderConfig) -> SpatialPhaseTable:
    offs_x = np.arange(-cfg.delta_x, cfg.delta_x + 1, dtype=np.float64) / cfg.delta_x
    offs_y = np.arange(-cfg.delta_y, cfg.delta_y + 1, dtype=np.float64) / cfg.delta_y
    phase_x = _unit_phases(np.outer(offs_x, bases.x_freqs), np.complex128)
    phase_y = _unit_phases(np.outer(offs_y, bases.y_freqs), np.complex128)
    table = (phase_x[:, None, :] * phase_y[None, :, :]).astype(cfg.complex_dtype)
    return SpatialPhaseTable(table=table, delta_x=cfg.delta_x, delta_y=cfg.delta_y)


class PixelGrid:
    """Per-pixel temporal phase sums and event counts for one slice.

    Internally padded with a (δx, δy) guard border of zeros so the pooling
    loop needs no bounds checks; offsets falling outside the image then
    contribute exactly zero, which is faithful (no events exist there).
    """

    def __init__(self, geometry, cfg: EncoderConfig, n_events: int,
                 embed_padded: np.ndarray, count_padded: np.ndarray):
        self.geometry = geometry
        self.delta_x = cfg.delta_x
        self.delta_y = cfg.delta_y
        self.n_events = n_events
        self._embed_padded = embed_padded
        self._count_padded = count_padded

    @property
    def embed(self) -> np.ndarray:
        """W x H x D view (without the guard border), indexed [x, y]."""
        dx, dy = self.delta_x, self.delta_y
        return self._embed_padded[dx : dx + self.geometry.width, dy : dy + self.geometry.height]

    @property
    def count(self) -> np.ndarray:
        dx, dy = self.delta_x, self.delta_y
        return self._count_padded[dx : dx + self.geometry.width, dy : dy + self.geometry.height]


def _unit_phases(args: np.ndarray, dtype: np.dtype) -> np.ndarray:
    """exp(i * args) assembled from cos/sin, which vectorize much better
    than complex ``np.exp``."""
    out = np.empty(args.shape, dtype=dtype)
    out.real = np.cos(args)
    out.imag = np.sin(args)
    return out


def _temporal_phases(t: np.ndarray, bases: Bases, cfg: EncoderConfig, sign: float = 1.0) -> np.ndarray:
    """exp(sign * i * t/δt ⊗ time_freqs) in the configured precision, (n, D)."""
    args = np.multiply.outer(
        (t / cfg.delta_t).astype(cfg.real_dtype),
        (sign * bases.time_freqs).astype(cfg.real_dtype),
    )
    return _unit_phases(args, cfg.complex_dtype)


def accumulate_grid(
    sl: EventSlice,
    bases: Bases,
    cfg: EncoderConfig,
    threads: int = 1,
) -> PixelGrid:
    """Stage 1: scatter each event's temporal phase into its pixel cell.

    The slice must already be rebased (``t_start == 0``). Events are
    bucketed by pixel with one stable sort and reduced per pixel, which
    makes the result independent of the thread count: each pixel's sum is
    always computed from the same contiguous run in the same order.
    """
    if sl.t_start != 0.0:
        raise ValueError("accumulate_grid requires a rebased slice (t_start == 0)")
    if bases.dim != cfg.embed_dim:
        raise DimensionMismatchError(f"bases dim {bases.dim} != config embed_dim {cfg.embed_dim}")
    W, H = sl.geometry.width, sl.geometry.height
    dx, dy = cfg.delta_x, cfg.delta_y
    pw, ph = W + 2 * dx, H + 2 * dy
    embed = np.zeros((pw, ph, cfg.embed_dim), dtype=cfg.complex_dtype)
    count = np.zeros((pw, ph), dtype=np.int64)
    n = len(sl)
    if n == 0:
        return PixelGrid(sl.geometry, cfg, 0, embed, count)

    flat = (sl.x.astype(np.int64) + dx) * ph + (sl.y.astype(np.int64) + dy)
    order = np.argsort(flat, kind="stable")
    flat_sorted = flat[order]
    t_sorted = sl.t[order]
    count.reshape(-1)[:] = np.bincount(flat, minlength=pw * ph)

    embed_flat = embed.reshape(pw * ph, cfg.embed_dim)

    def reduce_chunk(lo: int, hi: int) -> None:
        chunk = flat_sorted[lo:hi]
        starts = np.flatnonzero(np.r_[True, chunk[1:] != chunk[:-1]])
        phases = _temporal_phases(t_sorted[lo:hi], bases, cfg)
        embed_flat[chunk[starts]] = np.add.reduceat(phases, starts, axis=0)

    if threads <= 1 or n < 4096:
        reduce_chunk(0, n)
    else:
        # Chunk boundaries aligned to pixel runs so each pixel is reduced
        # by exactly one worker (disjoint writes, deterministic result).
        raw = np.linspace(0, n, threads + 1).astype(int)[1:-1]
        cuts = [0]
        for r in raw:
            r = int(np.searchsorted(flat_sorted, flat_sorted[min(r, n - 1)], side="left"))
            if r > cuts[-1]:
                cuts.append(r)
        cuts.append(n)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda ab: reduce_chunk(*ab), zip(cuts[:-1], cuts[1:])))
    return PixelGrid(sl.geometry, cfg, n, embed, count)


@dataclass(frozen=True)
class Embedding:
    """One query's local-event encoding plus its neighborhood size."""

    values: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return len(self.values)


class EmbeddingBatch:
    """Embeddings for a query set, row-aligned with the query order."""

    def __init__(self, values: np.ndarray, counts: np.ndarray):
        self.values = values
        self.counts = counts

    def __len__(self) -> int:
        return len(self.counts)

    def __getitem__(self, i: int) -> Embedding:
        return Embedding(values=self.values[i], count=int(self.counts[i]))


def _pool_batch(
    grid: PixelGrid,
    table: SpatialPhaseTable,
    qt: np.ndarray,
    qx: np.ndarray,
    qy: np.ndarray,
    bases: Bases,
    cfg: EncoderConfig,
    allow_empty: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    nq = len(qt)
    dim = cfg.embed_dim
    acc = np.zeros((nq, dim), dtype=cfg.complex_dtype)
    cnt = np.zeros(nq, dtype=np.int64)
    tmp = np.empty((nq, dim), dtype=cfg.complex_dtype)
    embed_p = grid._embed_padded
    count_p = grid._count_padded
    # The guard border shifts window offset (dx, dy) to padded index
    # (qx + dx + δx, qy + dy + δy) = (qx + i, qy + j) for loop indices i, j.
    for i in range(2 * cfg.delta_x + 1):
        xi = qx + i
        for j in range(2 * cfg.delta_y + 1):
            np.multiply(embed_p[xi, qy + j], table.table[i, j], out=tmp)
            acc += tmp
            cnt += count_p[xi, qy + j]
    if not allow_empty:
        bad = np.flatnonzero(cnt == 0)
        if len(bad):
            raise EmptyNeighborhoodError(
                f"{len(bad)} queries have empty neighborhoods "
                f"(first at batch position {bad[0]})"
            )
    dephase = _temporal_phases(qt, bases, cfg, sign=-1.0)
    emb = dephase * acc / np.maximum(cnt, 1)[:, None].astype(cfg.real_dtype)
    return emb, cnt


def pool_embedding(
    grid: PixelGrid,
    table: SpatialPhaseTable,
    query: Event,
    bases: Bases,
    cfg: EncoderConfig,
) -> Embedding:
    """Stage 2 for a single query event (its t must be slice-local)."""
    if not (0 <= query.x < grid.geometry.width and 0 <= query.y < grid.geometry.height):
        raise ValueError(f"query pixel ({query.x}, {query.y}) outside geometry")
    emb, cnt = _pool_batch(
        grid,
        table,
        np.array([query.t]),
        np.array([query.x], dtype=np.int64),
        np.array([query.y], dtype=np.int64),
        bases,
        cfg,
    )
    return Embedding(values=emb[0], count=int(cnt[0]))


def encode(
    sl: EventSlice,
    queries: QuerySet,
    cfg: EncoderConfig,
    bases: Optional[Bases] = None,
    threads: int = 1,
) -> EmbeddingBatch:
    """Full pipeline: rebase, build the grid once, pool every query.

    Per-query results are independent of query order and of each other.
    The grid is built even for an empty query set (stage-1 cost only).
    """
    queries.check_within(len(sl))
    sl = rebase_slice(sl)
    if bases is None:
        bases = generate_bases(cfg)
    table = precompute_spatial_phases(bases, cfg)
    grid = accumulate_grid(sl, bases, cfg, threads=threads)
    idx = queries.indices
    if len(idx) == 0:
        return EmbeddingBatch(
            values=np.empty((0, cfg.embed_dim), dtype=cfg.complex_dtype),
            counts=np.empty(0, dtype=np.int64),
        )
    qt = sl.t[idx]
    qx = sl.x[idx].astype(np.int64)
    qy = sl.y[idx].astype(np.int64)
    if threads <= 1 or len(idx) < 1024:
        values, counts = _pool_batch(grid, table, qt, qx, qy, bases, cfg)
        return EmbeddingBatch(values, counts)
    values = np.empty((len(idx), cfg.embed_dim), dtype=cfg.complex_dtype)
    counts = np.empty(len(idx), dtype=np.int64)
    bounds = np.linspace(0, len(idx), threads + 1).astype(int)

    def run(lo: int, hi: int) -> None:
        v, c = _pool_batch(grid, table, qt[lo:hi], qx[lo:hi], qy[lo:hi], bases, cfg)
        values[lo:hi] = v
        counts[lo:hi] = c

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(lambda ab: run(*ab), zip(bounds[:-1], bounds[1:])))
    return EmbeddingBatch(values, counts)


def oracle_encode(
    sl: EventSlice,
    query: Event,
    cfg: EncoderConfig,
    bases: Optional[Bases] = None,
) -> Embedding:
    """Direct, unoptimized summation over the query's neighborhood.

    Mathematically identical to the pooled path (floating-point ordering
    may differ); quadratic cost accepted. Always evaluated in float64 —
    this is the reference the fast path is validated against.
    """
    if bases is None:
        bases = generate_bases(cfg)
    if bases.dim != cfg.embed_dim:
        raise DimensionMismatchError(f"bases dim {bases.dim} != config embed_dim {cfg.embed_dim}")
    mask = (np.abs(sl.x - query.x) <= cfg.delta_x) & (np.abs(sl.y - query.y) <= cfg.delta_y)
    n = int(mask.sum())
    if n == 0:
        raise EmptyNeighborhoodError(f"query at ({query.x}, {query.y}) has no neighbors in slice")
    args = (
        np.outer((sl.t[mask] - query.t) / cfg.delta_t, bases.time_freqs)
        + np.outer((sl.x[mask] - query.x) / cfg.delta_x, bases.x_freqs)
        + np.outer((sl.y[mask] - query.y) / cfg.delta_y, bases.y_freqs)
    )
    return Embedding(values=np.exp(1j * args).mean(axis=0), count=n)


def kde_direct(
    sl: EventSlice,
    query: Event,
    point: Tuple[float, float, float],
    cfg: EncoderConfig,
) -> float:
    """Gaussian kernel density of the centered neighborhood at ``point``.

    ``point`` is a (t, x, y) offset from the query event; each axis is
    normalized by its radius and the kernel exponent is
    ``-(1/(2*sigma2)) * d^2``. Returns a value in (0, 1].
    """
    mask = (np.abs(sl.x - query.x) <= cfg.delta_x) & (np.abs(sl.y - query.y) <= cfg.delta_y)
    if not mask.any():
        raise EmptyNeighborhoodError("query has no neighbors in slice")
    dt = (point[0] - (sl.t[mask] - query.t)) / cfg.delta_t
    dx = (point[1] - (sl.x[mask] - query.x)) / cfg.delta_x
    dy = (point[2] - (sl.y[mask] - query.y)) / cfg.delta_y
    d2 = dt * dt + dx * dx + dy * dy
    return float(np.exp(-d2 / (2.0 * cfg.sigma2)).mean())


def reconstruct_density(
    emb: Embedding,
    point: Tuple[float, float, float],
    bases: Bases,
    cfg: EncoderConfig,
) -> float:
    """Recover the neighborhood density at ``point`` purely from ``emb``.

    Computes ``Re<emb, probe> / D`` with the probe's phases conjugated, so
    a single-event embedding probed at zero offset yields exactly 1. As the
    embedding dimension grows this converges to the Gaussian KDE whose
    bandwidth is the reciprocal of the frequency variance; the two match
    ``kde_direct`` when ``sigma2 == 1``.
    """
    if emb.dim != bases.dim:
        raise DimensionMismatchError(f"embedding dim {emb.dim} != bases dim {bases.dim}")
    arg = (
        (point[0] / cfg.delta_t) * bases.time_freqs
        + (point[1] / cfg.delta_x) * bases.x_freqs
        + (point[2] / cfg.delta_y) * bases.y_freqs
    )
    probe = np.exp(1j * arg)
    return float(np.real(np.vdot(probe, emb.values)) / emb.dim)

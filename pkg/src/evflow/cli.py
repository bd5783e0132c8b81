"""Command-line surface: encode, predict, eval, bench, render.

Exit codes: 0 success, 1 I/O or parse failure, 2 configuration or
dimension mismatch, 3 empty-result conditions.
"""

from __future__ import annotations

import argparse
import struct
import sys
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import __version__
from .bench import SceneParams, bench_stage, fit_runtime_model, synth_workload
from .encoder import EncoderConfig, encode, generate_bases
from .errors import (
    BenchResolutionError,
    DimensionMismatchError,
    EmptyNeighborhoodError,
    EventParseError,
    EvflowError,
    GeometryError,
)
from .events import CameraGeometry, QuerySet, filter_polarity, load_events, slice_stream
from .flow import load_weights, predict_flows
from .metrics import evaluate, read_flow_map, write_report_csv
from .presets import PRESETS, load_config_preset
from .render import flow_field_image, write_ppm

EMBED_MAGIC = b"VKME"

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_EMPTY = 3

_ENCODER_KEYS = ("delta_t", "delta_x", "delta_y", "dim", "sigma2", "seeds", "width", "height")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    preset: Optional[str] = None
    delta_t: Optional[float] = None
    delta_x: Optional[int] = None
    delta_y: Optional[int] = None
    dim: Optional[int] = None
    sigma2: Optional[float] = None
    seeds: Optional[str] = None
    width: Optional[int] = None
    height: Optional[int] = None
    precision: str = "f32"
    threads: int = 1
    stride: Optional[float] = None
    queries: str = "all"
    query_seed: int = 0
    t0: float = 0.0
    polarity: str = "keep"
    format: str = "csv"
    events: Optional[str] = None
    weights: Optional[str] = None
    gt: Optional[str] = None
    pred: Optional[str] = None
    out: Optional[str] = None
    scene: str = "uniform_noise"
    sizes: str = "50000,160000,500000"
    n_queries: int = 4096
    min_wall: float = 1e-3

    def resolve(self) -> tuple[EncoderConfig, CameraGeometry]:
        explicit = [k for k in _ENCODER_KEYS if getattr(self, k) is not None]
        if self.preset and explicit:
            raise CliError(
                EXIT_CONFIG,
                f"--preset conflicts with explicit encoder settings {explicit}; use one",
            )
        if self.preset:
            preset = load_config_preset(self.preset)
            cfg = preset.encoder
            if self.precision != cfg.precision:
                cfg = EncoderConfig(
                    delta_t=cfg.delta_t, delta_x=cfg.delta_x, delta_y=cfg.delta_y,
                    embed_dim=cfg.embed_dim, sigma2=cfg.sigma2, seeds=cfg.seeds,
                    precision=self.precision,
                )
            return cfg, preset.geometry
        seeds = (0, 1, 2)
        if self.seeds:
            parts = [int(s) for s in str(self.seeds).split(",")]
            if len(parts) != 3:
                raise CliError(EXIT_CONFIG, "--seeds needs three comma-separated integers")
            seeds = tuple(parts)
        try:
            cfg = EncoderConfig(
                delta_t=self.delta_t if self.delta_t is not None else 0.016,
                delta_x=self.delta_x if self.delta_x is not None else 10,
                delta_y=self.delta_y if self.delta_y is not None else 10,
                embed_dim=self.dim if self.dim is not None else 64,
                sigma2=self.sigma2 if self.sigma2 is not None else 25.0,
                seeds=seeds,
                precision=self.precision,
            )
            geometry = CameraGeometry(self.width or 640, self.height or 480)
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from exc
        return cfg, geometry

    def echo(self, cfg: EncoderConfig, geometry: CameraGeometry) -> list[str]:
        lines = [f"evflow={__version__}"]
        lines.append(f"preset={self.preset or ''}")
        lines.append(
            f"delta_t={cfg.delta_t} delta_x={cfg.delta_x} delta_y={cfg.delta_y} "
            f"dim={cfg.embed_dim} sigma2={cfg.sigma2} seeds={','.join(map(str, cfg.seeds))}"
        )
        lines.append(f"geometry={geometry.width}x{geometry.height} precision={cfg.precision}")
        lines.append(
            f"threads={self.threads} stride={self.effective_stride(cfg)} "
            f"queries={self.queries} t0={self.t0} polarity={self.polarity}"
        )
        return lines

    def effective_stride(self, cfg: EncoderConfig) -> float:
        return self.stride if self.stride is not None else cfg.window


def _load_config_file(path: str) -> dict:
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise CliError(EXIT_CONFIG, f"{path}:{lineno}: expected key=value")
                key, value = line.split("=", 1)
                values[key.strip().replace("-", "_")] = value.strip()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config {path}: {exc}") from exc
    return values


def _build_run_config(args: argparse.Namespace) -> RunConfig:
    run = RunConfig()
    file_values = _load_config_file(args.config) if getattr(args, "config", None) else {}
    casts = {f.name: f for f in fields(RunConfig)}
    for key, raw in file_values.items():
        if key not in casts:
            raise CliError(EXIT_CONFIG, f"unknown config key {key!r}")
        current = getattr(run, key)
        if key in ("delta_t", "sigma2", "stride", "t0", "min_wall"):
            setattr(run, key, float(raw))
        elif key in ("delta_x", "delta_y", "dim", "width", "height", "threads",
                     "query_seed", "n_queries"):
            setattr(run, key, int(raw))
        else:
            setattr(run, key, raw)
    # CLI flags override file values.
    for key in casts:
        if hasattr(args, key) and getattr(args, key) is not None:
            setattr(run, key, getattr(args, key))
    return run


def _parse_queries(policy: str, n: int, seed: int) -> QuerySet:
    if policy == "all":
        return QuerySet.all(n)
    if policy.startswith("every:"):
        return QuerySet.every_kth(n, int(policy.split(":", 1)[1]))
    if policy.startswith("random:"):
        return QuerySet.random_m(n, int(policy.split(":", 1)[1]), seed=seed)
    raise CliError(EXIT_CONFIG, f"bad query policy {policy!r} (all | every:k | random:m)")


def _require(value, flag: str):
    if value is None:
        raise CliError(EXIT_CONFIG, f"missing required flag {flag}")
    return value


def _load_stream(run: RunConfig, geometry: CameraGeometry):
    path = _require(run.events, "--events")
    stream = load_events(path, fmt=run.format, geometry=geometry if run.format == "csv" else None)
    if run.format == "binary" and stream.geometry != geometry:
        raise CliError(
            EXIT_CONFIG,
            f"event file geometry {stream.geometry.width}x{stream.geometry.height} "
            f"does not match configured {geometry.width}x{geometry.height}",
        )
    if run.polarity in ("pos", "neg"):
        stream = filter_polarity(stream, run.polarity)
    return stream


def cmd_encode(run: RunConfig) -> int:
    cfg, geometry = run.resolve()
    out = _require(run.out, "--out")
    stream = _load_stream(run, geometry)
    slices = slice_stream(stream, cfg.delta_t, run.effective_stride(cfg), t0=run.t0)
    bases = generate_bases(cfg)
    for line in run.echo(cfg, geometry):
        print(line)
    with open(out, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<I", cfg.embed_dim))
        written = 0
        for slice_index, sl in enumerate(slices):
            queries = _parse_queries(run.queries, len(sl), run.query_seed)
            if len(queries) == 0:
                continue
            batch = encode(sl, queries, cfg, bases=bases, threads=run.threads)
            values = batch.values.astype(np.complex64)
            interleaved = np.empty((len(queries), 2 * cfg.embed_dim), dtype="<f4")
            interleaved[:, 0::2] = values.real
            interleaved[:, 1::2] = values.imag
            for row, event_index in enumerate(queries.indices):
                fh.write(struct.pack("<QQ", slice_index, int(event_index)))
                fh.write(interleaved[row].tobytes())
            written += len(queries)
    print(f"wrote {written} embeddings across {len(slices)} slices to {out}")
    return EXIT_OK


def read_embeddings(path: str) -> tuple[int, np.ndarray, np.ndarray, np.ndarray]:
    """Read a VKME file -> (dim, slice_idx, event_idx, complex values)."""
    with open(path, "rb") as fh:
        header = fh.read(8)
        if header[:4] != EMBED_MAGIC:
            raise EventParseError(f"{path}: missing {EMBED_MAGIC!r} header")
        dim = struct.unpack("<I", header[4:8])[0]
        payload = fh.read()
    record = np.dtype([("slice", "<u8"), ("event", "<u8"), ("vals", "<f4", (2 * dim,))])
    if len(payload) % record.itemsize:
        raise EventParseError(f"{path}: truncated record")
    data = np.frombuffer(payload, dtype=record)
    values = data["vals"][:, 0::2] + 1j * data["vals"][:, 1::2]
    return dim, data["slice"].astype(np.int64), data["event"].astype(np.int64), values


def cmd_predict(run: RunConfig) -> int:
    cfg, geometry = run.resolve()
    out = _require(run.out, "--out")
    weights = load_weights(_require(run.weights, "--weights"))
    if weights.embed_dim != cfg.embed_dim:
        raise CliError(
            EXIT_CONFIG,
            f"weight file D={weights.embed_dim} but encoder D={cfg.embed_dim}",
        )
    stream = _load_stream(run, geometry)
    slices = slice_stream(stream, cfg.delta_t, run.effective_stride(cfg), t0=run.t0)
    n_written = 0
    n_failed = 0
    n_queries = 0
    with open(out, "w", encoding="utf-8") as fh:
        for line in run.echo(cfg, geometry):
            fh.write(f"# {line}\n")
        fh.write("slice_index,event_index,t,x,y,nx,ny\n")
        for slice_index, sl in enumerate(slices):
            queries = _parse_queries(run.queries, len(sl), run.query_seed)
            n_queries += len(queries)
            predictions, failures = predict_flows(sl, queries, cfg, weights, threads=run.threads)
            for pred in predictions:
                i = pred.event_index
                fh.write(
                    f"{slice_index},{i},{float(sl.t[i])!r},{sl.x[i]},{sl.y[i]},"
                    f"{pred.nx:.9g},{pred.ny:.9g}\n"
                )
            n_written += len(predictions)
            for event_index, reason in failures:
                n_failed += 1
                print(f"slice {slice_index} event {event_index}: {reason}", file=sys.stderr)
    print(f"wrote {n_written} predictions to {out} ({n_failed} failed queries)")
    if n_queries > 0 and n_written == 0:
        return EXIT_EMPTY
    return EXIT_OK


def read_predictions(path: str):
    """Read a prediction CSV -> arrays (slice, event, t, x, y, nx, ny)."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("slice_index"):
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise EventParseError(f"{path}: bad prediction row {line!r}")
            rows.append(parts)
    if not rows:
        return tuple(np.empty(0, dtype=dt) for dt in (np.int64, np.int64, np.float64,
                                                      np.int64, np.int64, np.float64, np.float64))
    arr = np.array(rows)
    return (
        arr[:, 0].astype(np.int64),
        arr[:, 1].astype(np.int64),
        arr[:, 2].astype(np.float64),
        arr[:, 3].astype(np.int64),
        arr[:, 4].astype(np.int64),
        arr[:, 5].astype(np.float64),
        arr[:, 6].astype(np.float64),
    )


def cmd_eval(run: RunConfig) -> int:
    cfg, geometry = run.resolve()
    out = _require(run.out, "--out")
    gt = read_flow_map(_require(run.gt, "--gt"))
    if gt.geometry != geometry:
        raise CliError(
            EXIT_CONFIG,
            f"GT geometry {gt.geometry.width}x{gt.geometry.height} does not match "
            f"configured {geometry.width}x{geometry.height}",
        )
    slice_idx, _, _, px, py, nx, ny = read_predictions(_require(run.pred, "--pred"))
    flows = np.stack([nx, ny], axis=1) if len(nx) else np.empty((0, 2))
    report = evaluate(px, py, flows, gt, sequences=[f"slice_{s}" for s in slice_idx])
    write_report_csv(report, out, header_extra="\n".join(run.echo(cfg, geometry)))
    agg = report.aggregate
    if agg.n_valid == 0:
        print(f"no valid pairs ({agg.n_excluded} predictions excluded)", file=sys.stderr)
        return EXIT_EMPTY
    print(f"PEE={agg.pee:.6g} pct_pos={agg.pct_pos:.4g} "
          f"n_valid={agg.n_valid} n_excluded={agg.n_excluded}")
    return EXIT_OK


def cmd_bench(run: RunConfig) -> int:
    cfg, geometry = run.resolve()
    out = _require(run.out, "--out")
    sizes = [int(s) for s in run.sizes.split(",") if s]
    if not sizes:
        raise CliError(EXIT_CONFIG, "--sizes must list at least one event count")
    params = SceneParams(seed=run.query_seed, window=cfg.window)
    timings = []
    samples = {stage: ([], []) for stage in ("accumulate", "pool", "mlp")}
    for size in sizes:
        workload, _ = synth_workload(size, geometry, run.scene, params)
        for stage in ("accumulate", "pool", "mlp"):
            timing = bench_stage(
                workload, cfg, stage, n_queries=min(run.n_queries, size),
                threads=run.threads, min_wall=run.min_wall,
            )
            timings.append(timing)
            samples[stage][0].append(timing.count)
            samples[stage][1].append(timing.wall_time)

    with open(out, "w", encoding="utf-8") as fh:
        for line in run.echo(cfg, geometry):
            fh.write(f"# {line}\n")
        fh.write("stage,count,wall_seconds,rate\n")
        for timing in timings:
            fh.write(f"{timing.stage},{timing.count},{timing.wall_time:.9g},{timing.rate:.9g}\n")

    print(f"{'stage':<12}{'count':>12}{'wall_s':>14}{'rate/s':>16}")
    for timing in timings:
        print(f"{timing.stage:<12}{timing.count:>12}{timing.wall_time:>14.6f}"
              f"{timing.rate:>16.4g}")
    if len(sizes) >= 2:
        model, diag = fit_runtime_model(samples)
        print(
            f"fit: event_cost={model.event_cost:.3e}s pool_cost={model.pool_cost:.3e}s "
            f"mlp_cost={model.mlp_cost:.3e}s r2={ {k: round(v, 4) for k, v in diag['r2'].items()} }"
        )
        if diag["nonlinear_warning"]:
            print("warning: stage timing deviates >20% from linear", file=sys.stderr)

    # Window-area scaling probe: identical workload pooled at radius 8 and 10.
    probe_n = max(sizes)
    workload, _ = synth_workload(probe_n, geometry, run.scene, params)
    per_flow = {}
    for radius in (8, 10):
        probe_cfg = EncoderConfig(
            delta_t=cfg.delta_t, delta_x=radius, delta_y=radius,
            embed_dim=cfg.embed_dim, sigma2=cfg.sigma2, seeds=cfg.seeds,
            precision=cfg.precision,
        )
        timing = bench_stage(workload, probe_cfg, "pool",
                             n_queries=min(run.n_queries, probe_n),
                             threads=run.threads, min_wall=run.min_wall)
        per_flow[radius] = timing.wall_time / timing.count
    print(f"pool per-flow ratio radius10/radius8 = {per_flow[10] / per_flow[8]:.3f} "
          f"(window-area prediction 1.526)")
    return EXIT_OK


def cmd_render(run: RunConfig) -> int:
    cfg, geometry = run.resolve()
    out = _require(run.out, "--out")
    _, _, _, px, py, nx, ny = read_predictions(_require(run.pred, "--pred"))
    flows = np.stack([nx, ny], axis=1) if len(nx) else np.empty((0, 2))
    if len(flows) == 0:
        print("warning: no predictions; rendering a black image", file=sys.stderr)
    img, max_mag = flow_field_image(px, py, flows, geometry)
    write_ppm(img, out)
    with open(out + ".txt", "w", encoding="utf-8") as fh:
        for line in run.echo(cfg, geometry):
            fh.write(f"{line}\n")
        fh.write(f"max_magnitude={max_mag!r}\n")
    print(f"wrote {out} (max magnitude {max_mag:.6g} px/s)")
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--preset", choices=sorted(PRESETS))
    parser.add_argument("--events")
    parser.add_argument("--format", choices=("csv", "binary"))
    parser.add_argument("--weights")
    parser.add_argument("--gt")
    parser.add_argument("--pred")
    parser.add_argument("--out")
    parser.add_argument("--threads", type=int)
    parser.add_argument("--precision", choices=("f32", "f64"))
    parser.add_argument("--stride", type=float)
    parser.add_argument("--queries", help="all | every:k | random:m")
    parser.add_argument("--query-seed", dest="query_seed", type=int)
    parser.add_argument("--t0", type=float)
    parser.add_argument("--polarity", choices=("keep", "pos", "neg"))
    parser.add_argument("--delta-t", dest="delta_t", type=float)
    parser.add_argument("--delta-x", dest="delta_x", type=int)
    parser.add_argument("--delta-y", dest="delta_y", type=int)
    parser.add_argument("--dim", type=int)
    parser.add_argument("--sigma2", type=float)
    parser.add_argument("--seeds", help="three comma-separated integers")
    parser.add_argument("--width", type=int)
    parser.add_argument("--height", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evflow",
                                     description="Per-event normal flow estimation")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("encode", "write per-query embeddings"),
        ("predict", "write per-query flow predictions"),
        ("eval", "score predictions against a GT flow map"),
        ("bench", "staged throughput measurement"),
        ("render", "render predictions to a PPM image"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        if name == "bench":
            p.add_argument("--scene", choices=("uniform_noise", "translating_edge", "rotating_bar"))
            p.add_argument("--sizes", help="comma-separated event counts")
            p.add_argument("--n-queries", dest="n_queries", type=int)
            p.add_argument("--min-wall", dest="min_wall", type=float)
    return parser


_COMMANDS = {
    "encode": cmd_encode,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "render": cmd_render,
}


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = _build_run_config(args)
        return _COMMANDS[args.command](run)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (EventParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DimensionMismatchError, GeometryError, BenchResolutionError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EmptyNeighborhoodError, EvflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY


if __name__ == "__main__":
    sys.exit(main())

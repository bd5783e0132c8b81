"""Real-time per-event normal flow estimation for event cameras.

The pipeline: slice an event stream into fixed time windows, encode each
queried event's spatiotemporal neighborhood into a complex random-Fourier
feature vector via a pixel-grid pooling reformulation, and map the
features to generalized normal flow with a small two-layer head.
"""

__version__ = "0.1.0"

from .encoder import (
    Bases,
    Embedding,
    EmbeddingBatch,
    EncoderConfig,
    PixelGrid,
    SpatialPhaseTable,
    accumulate_grid,
    encode,
    export_bases,
    generate_bases,
    kde_direct,
    load_bases,
    oracle_encode,
    pool_embedding,
    precompute_spatial_phases,
    reconstruct_density,
)
from .errors import (
    BenchResolutionError,
    DimensionMismatchError,
    EmptyNeighborhoodError,
    EventParseError,
    EvflowError,
    GeometryError,
    TrainingDivergedError,
)
from .estimators import LocalEventEncoder, NormalFlowRegressor
from .events import (
    CameraGeometry,
    Event,
    EventSlice,
    EventStream,
    QuerySet,
    load_events,
    rebase_slice,
    slice_stream,
    write_events_binary,
    write_events_csv,
)
from .flow import (
    FlowPrediction,
    MlpWeights,
    TrainConfig,
    embed_to_features,
    load_weights,
    mlp_forward,
    predict_flows,
    save_weights,
    train_head,
)
from .metrics import (
    EvalReport,
    FlowMap,
    FlowPair,
    constraint_residual,
    evaluate,
    pct_pos,
    pee,
    read_flow_map,
    write_flow_map,
)
from .bench import (
    RuntimeModel,
    SceneParams,
    StageTiming,
    bench_stage,
    calibrate,
    estimate_runtime,
    fit_runtime_model,
    synth_workload,
)
from .presets import PRESETS, Preset, load_config_preset

__all__ = [name for name in dir() if not name.startswith("_")]

"""Scikit-learn style estimators wrapping the functional core.

These adapters let the encoder and flow head compose with sklearn
pipelines and model-selection tooling: events travel as plain (n, 3)
arrays of [t, x, y], one slice per call.
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .encoder import EncoderConfig, encode, generate_bases
from .events import CameraGeometry, QuerySet
from .flow import (
    MlpWeights,
    TrainConfig,
    embed_to_features,
    load_weights,
    mlp_forward,
    predict_flows,
    train_head,
)
from .validation import check_event_array, check_flow_array, slice_from_array


class LocalEventEncoder(TransformerMixin, BaseEstimator):
    """Transform one event slice into per-event neighborhood features.

    Parameters mirror :class:`EncoderConfig` plus the sensor geometry.
    ``transform`` returns an (n, 2*embed_dim) real array, the ``[Re; Im]``
    feature layout the flow head consumes.

    Example
    -------
    >>> enc = LocalEventEncoder(delta_t=0.016, width=64, height=64)
    >>> feats = enc.fit_transform(events)   # events: (n, 3) [t, x, y]
    """

    def __init__(
        self,
        delta_t: float = 0.016,
        delta_x: int = 10,
        delta_y: int = 10,
        embed_dim: int = 64,
        sigma2: float = 25.0,
        seeds: tuple = (0, 1, 2),
        precision: str = "f32",
        width: int = 640,
        height: int = 480,
        threads: int = 1,
    ):
        self.delta_t = delta_t
        self.delta_x = delta_x
        self.delta_y = delta_y
        self.embed_dim = embed_dim
        self.sigma2 = sigma2
        self.seeds = seeds
        self.precision = precision
        self.width = width
        self.height = height
        self.threads = threads

    def _config(self) -> EncoderConfig:
        return EncoderConfig(
            delta_t=self.delta_t,
            delta_x=self.delta_x,
            delta_y=self.delta_y,
            embed_dim=self.embed_dim,
            sigma2=self.sigma2,
            seeds=tuple(self.seeds),
            precision=self.precision,
        )

    def _geometry(self) -> CameraGeometry:
        return CameraGeometry(self.width, self.height)

    def fit(self, X=None, y=None):
        """Generate the frequency vectors; X is only validated."""
        cfg = self._config()
        if X is not None:
            check_event_array(X, self._geometry())
        self.bases_ = generate_bases(cfg)
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "bases_"):
            raise NotFittedError("call fit before transform")
        cfg = self._config()
        sl = slice_from_array(X, self._geometry(), cfg.window)
        batch = encode(sl, QuerySet.all(len(sl)), cfg, bases=self.bases_, threads=self.threads)
        return embed_to_features(batch)


class NormalFlowRegressor(BaseEstimator):
    """Per-event normal flow prediction with a trainable two-layer head.

    ``fit`` accepts a single slice array or a list of them (one GT flow row
    per event); ``predict`` returns (n, 2) flows in pixels per second.
    Pass ``weights`` (an :class:`MlpWeights` or a weight-file path) to use
    a pretrained head without fitting.
    """

    def __init__(
        self,
        delta_t: float = 0.016,
        delta_x: int = 10,
        delta_y: int = 10,
        embed_dim: int = 64,
        sigma2: float = 25.0,
        seeds: tuple = (0, 1, 2),
        precision: str = "f32",
        width: int = 640,
        height: int = 480,
        threads: int = 1,
        hidden: int = 128,
        epochs: int = 300,
        batch_size: int = 512,
        learning_rate: float = 1e-3,
        margin_weight: float = 0.1,
        random_state: int = 0,
        weights: Union[MlpWeights, str, None] = None,
    ):
        self.delta_t = delta_t
        self.delta_x = delta_x
        self.delta_y = delta_y
        self.embed_dim = embed_dim
        self.sigma2 = sigma2
        self.seeds = seeds
        self.precision = precision
        self.width = width
        self.height = height
        self.threads = threads
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.margin_weight = margin_weight
        self.random_state = random_state
        self.weights = weights

    def _config(self) -> EncoderConfig:
        return EncoderConfig(
            delta_t=self.delta_t,
            delta_x=self.delta_x,
            delta_y=self.delta_y,
            embed_dim=self.embed_dim,
            sigma2=self.sigma2,
            seeds=tuple(self.seeds),
            precision=self.precision,
        )

    def _geometry(self) -> CameraGeometry:
        return CameraGeometry(self.width, self.height)

    def _resolve_pretrained(self) -> Optional[MlpWeights]:
        if self.weights is None:
            return None
        if isinstance(self.weights, MlpWeights):
            return self.weights
        return load_weights(self.weights)

    def fit(self, X, y):
        pretrained = self._resolve_pretrained()
        if pretrained is not None:
            self.weights_ = pretrained
            return self
        cfg = self._config()
        geometry = self._geometry()
        slices = X if isinstance(X, (list, tuple)) else [X]
        targets = y if isinstance(y, (list, tuple)) else [y]
        if len(slices) != len(targets):
            raise ValueError("X and y must pair one flow array per slice")
        dataset = []
        for arr, flows in zip(slices, targets):
            sl = slice_from_array(arr, geometry, cfg.window)
            dataset.append((sl, QuerySet.all(len(sl)), check_flow_array(flows, len(sl))))
        train_cfg = TrainConfig(
            hidden=self.hidden,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            margin_weight=self.margin_weight,
            seed=self.random_state,
        )
        self.weights_ = train_head(dataset, cfg, train_cfg, threads=self.threads)
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "weights_"):
            pretrained = self._resolve_pretrained()
            if pretrained is None:
                raise NotFittedError("call fit or supply pretrained weights")
            self.weights_ = pretrained
        cfg = self._config()
        sl = slice_from_array(X, self._geometry(), cfg.window)
        predictions, failures = predict_flows(
            sl, QuerySet.all(len(sl)), cfg, self.weights_, threads=self.threads
        )
        out = np.full((len(sl), 2), np.nan)
        for pred in predictions:
            out[pred.event_index] = (pred.nx, pred.ny)
        return out

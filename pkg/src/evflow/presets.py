"""Named encoder parameterizations for the released 640x480 recipes.

Preset names encode the full slice window (twice the time radius), the
embedding dimension and the pixel radius, e.g. ``640x480_32ms_C64_k8`` is a
32 ms window (delta_t = 16 ms) with D = 64 and delta_x = delta_y = 8.
"""

from __future__ import annotations

from dataclasses import dataclass

from .encoder import EncoderConfig
from .events import CameraGeometry


@dataclass(frozen=True)
class Preset:
    name: str
    geometry: CameraGeometry
    encoder: EncoderConfig


def _preset(name: str, delta_t: float, radius: int) -> Preset:
    return Preset(
        name=name,
        geometry=CameraGeometry(640, 480),
        encoder=EncoderConfig(
            delta_t=delta_t,
            delta_x=radius,
            delta_y=radius,
            embed_dim=64,
            sigma2=25.0,
            seeds=(0, 1, 2),
        ),
    )


PRESETS = {
    "640x480_32ms_C64_k8": _preset("640x480_32ms_C64_k8", 0.016, 8),
    "640x480_32ms_C64_k10": _preset("640x480_32ms_C64_k10", 0.016, 10),
    "640x480_24ms_C64_k8": _preset("640x480_24ms_C64_k8", 0.012, 8),
    "640x480_24ms_C64_k10": _preset("640x480_24ms_C64_k10", 0.012, 10),
}


def load_config_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None

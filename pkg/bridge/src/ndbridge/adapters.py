"""Model adapters: the place where real diffusion weights would live.

An adapter receives the decoded predict header plus the request tensor
(V, H, W, C) float32 and returns the predicted noise in the same shape.
Normalization descriptors translate between the engine's map
conventions and whatever the wrapped model expects; the echo adapter's
descriptors are identities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np


@dataclass(frozen=True)
class Normalization:
    """Affine map engine_value * scale + offset applied per channel group."""

    scale: float = 1.0
    offset: float = 0.0


@dataclass
class EchoAdapter:
    """Returns the request tensor unchanged and records what it saw, which
    lets integration tests assert the bridge's contract (for one: that
    unconditional requests never leak a prompt to the model)."""

    identity: str = "echo-1"
    kinds: Tuple[str, ...] = ("nd", "rgbd", "normal2d")
    normalization: Dict[str, Normalization] = field(
        default_factory=lambda: {"in": Normalization(), "out": Normalization()}
    )
    calls: List[dict] = field(default_factory=list)

    def predict(self, header: dict, tensor: np.ndarray) -> np.ndarray:
        self.calls.append(
            {
                "prior": header.get("prior"),
                "prompt": header.get("prompt"),
                "unconditional": header.get("unconditional"),
                "timestep": header.get("timestep"),
                "views": header.get("views"),
            }
        )
        return tensor


def make_adapter(name: str):
    if name == "echo":
        return EchoAdapter()
    raise ValueError(
        f"unknown adapter {name!r}; real-model adapters ship separately, "
        f"only 'echo' is built in"
    )

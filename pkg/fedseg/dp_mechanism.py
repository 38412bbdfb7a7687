"""
Client-level differential privacy: whole-update clipping, Gaussian noise and a Renyi accountant.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

# orders 1.25, 1.5, ..., 512
RDP_ORDERS = np.arange(5, 2049, dtype=np.float64) / 4.0
NORM_SLACK = 1e-6


@dataclass(frozen=True)
class DpConfig:
    clip_norm: float = 1.0
    noise_sigma: float = 1.2
    delta: float = 1e-5

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ConfigurationError(f"must be > 0, got {self.clip_norm}", field="clip_norm")
        if not self.noise_sigma >= 0 or math.isinf(self.noise_sigma):
            raise ConfigurationError(f"must be finite and >= 0, got {self.noise_sigma}", field="noise_sigma")
        if math.isinf(self.clip_norm) and self.noise_sigma > 0:
            raise ConfigurationError("an unbounded clip norm only works with noise_sigma=0", field="clip_norm")
        if not 0.0 < self.delta < 1.0:
            raise ConfigurationError(f"must be in (0, 1), got {self.delta}", field="delta")


def clip_update(delta: np.ndarray, clip_norm: float) -> np.ndarray:
    """``delta * min(1, C / ||delta||)``; a vector already inside the ball is returned unchanged."""
    if not clip_norm > 0:
        raise ConfigurationError(f"must be > 0, got {clip_norm}", field="clip_norm")
    norm = float(np.linalg.norm(delta.astype(np.float64)))
    if norm <= clip_norm or math.isinf(clip_norm):
        return delta
    return (delta.astype(np.float64) * (clip_norm / norm)).astype(delta.dtype)


def add_noise(delta: np.ndarray, noise_sigma: float, clip_norm: float, stream: np.random.Generator) -> np.ndarray:
    """Adds i.i.d. N(0, (sigma*C)^2) per coordinate. ``sigma == 0`` is the identity and draws nothing."""
    if noise_sigma == 0:
        return delta
    noise = stream.normal(0.0, noise_sigma * clip_norm, size=delta.shape)
    return (delta.astype(np.float64) + noise).astype(delta.dtype)


def privatize(delta: np.ndarray, config: DpConfig, stream: np.random.Generator) -> np.ndarray:
    """Clip then noise, asserting the post-clip norm bound."""
    clipped = clip_update(delta, config.clip_norm)
    norm = float(np.linalg.norm(clipped.astype(np.float64)))
    if norm > config.clip_norm * (1 + NORM_SLACK):
        raise AssertionError(f"clipped norm {norm} exceeds {config.clip_norm}")
    logger.debug(f"DP clip: norm {np.linalg.norm(delta.astype(np.float64)):.4f} -> {norm:.4f}")
    return add_noise(clipped, config.noise_sigma, config.clip_norm, stream)


def rdp_curve(noise_sigma: float, rounds: int) -> np.ndarray:
    """Renyi divergence of ``rounds`` composed Gaussian mechanisms at every order in ``RDP_ORDERS``."""
    return rounds * RDP_ORDERS / (2.0 * noise_sigma**2)


def account_privacy(noise_sigma: float, rounds: int, delta: float) -> float:
    """Smallest epsilon over the order grid; ``inf`` without noise."""
    if rounds < 0:
        raise ConfigurationError(f"must be >= 0, got {rounds}", field="rounds")
    if noise_sigma <= 0:
        return math.inf
    eps = rdp_curve(noise_sigma, rounds) + math.log(1.0 / delta) / (RDP_ORDERS - 1.0)
    return float(eps.min())

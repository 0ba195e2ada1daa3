"""Vector math shared by the renderer, the oracle, the networks and the metrics.

Directions live in a right-handed frame with x pointing right, y pointing up
and z pointing towards the camera, so the viewing direction is [0, 0, 1].
A light at elevation theta and azimuth phi (degrees) maps to
(cos(theta) cos(phi), sin(theta), cos(theta) sin(phi)).
"""

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch

from .errors import DegenerateInputError, DomainError

VIEW_DIR = np.array([0.0, 0.0, 1.0])

ArrayLike = Union[np.ndarray, Sequence[float]]


@dataclass(frozen=True)
class SphericalLight:
	elevation: float  # theta, degrees in [-90, 90]
	azimuth: float  # phi, degrees in [0, 180]

	def __post_init__(self) -> None:
		if not (-90.0 <= self.elevation <= 90.0) or math.isnan(self.elevation):
			raise DomainError(f"elevation {self.elevation} outside [-90, 90]")
		if not (0.0 <= self.azimuth <= 180.0) or math.isnan(self.azimuth):
			raise DomainError(f"azimuth {self.azimuth} outside [0, 180]")


def normalize(v: ArrayLike, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
	arr = np.asarray(v, dtype=np.float64)
	norm = np.linalg.norm(arr, axis=axis, keepdims=True)
	return arr / np.maximum(norm, eps)


def spherical_to_dir(s: SphericalLight) -> np.ndarray:
	theta = math.radians(s.elevation)
	phi = math.radians(s.azimuth)
	return np.array([
		math.cos(theta) * math.cos(phi),
		math.sin(theta),
		math.cos(theta) * math.sin(phi),
	])


def dir_to_spherical(v: ArrayLike) -> SphericalLight:
	x, y, z = (float(c) for c in normalize(v))
	if z < -1e-9:
		raise DomainError(f"direction {x, y, z} is below the horizon (z < 0)")
	theta = math.degrees(math.atan2(y, math.hypot(x, z)))
	phi = math.degrees(math.atan2(max(z, 0.0), x)) if math.hypot(x, z) > 0 else 90.0
	return SphericalLight(min(max(theta, -90.0), 90.0), min(max(phi, 0.0), 180.0))


def half_vector(l: ArrayLike, v: ArrayLike = VIEW_DIR) -> np.ndarray:
	s = np.asarray(l, dtype=np.float64) + np.asarray(v, dtype=np.float64)
	norm = np.linalg.norm(s, axis=-1, keepdims=True)
	if np.any(norm < 1e-12):
		raise DegenerateInputError("half vector undefined for antiparallel light and view directions")
	return s / norm


def positional_encode(p: ArrayLike, m: int) -> np.ndarray:
	"""concat(p, gamma(p)); gamma expands each scalar to sin/cos pairs at 2^k pi, k < m."""
	if m < 1:
		raise DomainError("positional encoding needs at least one frequency")
	p = np.asarray(p, dtype=np.float64).reshape(-1)
	freqs = (2.0 ** np.arange(m)) * math.pi
	angles = p[:, None] * freqs[None, :]
	gamma = np.stack([np.sin(angles), np.cos(angles)], axis=-1).reshape(-1)
	return np.concatenate([p, gamma])


def angular_error_deg(n1: ArrayLike, n2: ArrayLike) -> np.ndarray:
	dot = np.sum(np.asarray(n1, dtype=np.float64) * np.asarray(n2, dtype=np.float64), axis=-1)
	return np.degrees(np.arccos(np.clip(dot, -1.0, 1.0)))


# torch counterparts used inside the networks

def spherical_to_dir_torch(elevation_deg: torch.Tensor, azimuth_deg: torch.Tensor) -> torch.Tensor:
	theta = torch.deg2rad(elevation_deg)
	phi = torch.deg2rad(azimuth_deg)
	return torch.stack([
		torch.cos(theta) * torch.cos(phi),
		torch.sin(theta),
		torch.cos(theta) * torch.sin(phi),
	], dim=-1)


def positional_encode_torch(p: torch.Tensor, m: int, dim: int = 1) -> torch.Tensor:
	"""Channel-wise version of positional_encode with the same output ordering."""
	if m < 1:
		raise DomainError("positional encoding needs at least one frequency")
	out = [p]
	for c in range(p.shape[dim]):
		scalar = p.narrow(dim, c, 1)
		for k in range(m):
			freq = (2.0 ** k) * math.pi
			out.append(torch.sin(freq * scalar))
			out.append(torch.cos(freq * scalar))
	return torch.cat(out, dim=dim)

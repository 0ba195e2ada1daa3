"""Discretized upper-hemisphere light space.

The hemisphere is split into bins_per_axis bins along azimuth [0, 180] and
elevation [-90, 90]; with the default of 5 per axis there are K = 25 bins,
each 36 degrees wide, centered at azimuth [18, 54, 90, 126, 162] and
elevation [-72, -36, 0, 36, 72]. Flat index = n * el_idx + az_idx.
"""

import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import torch

from .errors import DomainError
from .geometry import SphericalLight, dir_to_spherical, spherical_to_dir


@dataclass(frozen=True, order=True)
class LightBin:
	el_idx: int
	az_idx: int

	def flat(self, bins_per_axis: int = 5) -> int:
		return bins_per_axis * self.el_idx + self.az_idx

	@classmethod
	def from_flat(cls, index: int, bins_per_axis: int = 5) -> "LightBin":
		if not 0 <= index < bins_per_axis * bins_per_axis:
			raise DomainError(f"flat bin index {index} out of range")
		return cls(index // bins_per_axis, index % bins_per_axis)


@dataclass(frozen=True)
class LightSpace:
	bins_per_axis: int = 5

	@property
	def width(self) -> float:
		return 180.0 / self.bins_per_axis

	@property
	def num_bins(self) -> int:
		return self.bins_per_axis * self.bins_per_axis

	@property
	def azimuth_centers(self) -> np.ndarray:
		return (np.arange(self.bins_per_axis) + 0.5) * self.width

	@property
	def elevation_centers(self) -> np.ndarray:
		return (np.arange(self.bins_per_axis) + 0.5) * self.width - 90.0

	def _check(self, b: LightBin) -> None:
		n = self.bins_per_axis
		if not (0 <= b.az_idx < n and 0 <= b.el_idx < n):
			raise DomainError(f"bin {b} outside the {n}x{n} light space")

	def bin_of(self, s: SphericalLight) -> LightBin:
		last = self.bins_per_axis - 1
		az = min(max(int(math.floor(s.azimuth / self.width)), 0), last)
		el = min(max(int(math.floor((s.elevation + 90.0) / self.width)), 0), last)
		return LightBin(el_idx=el, az_idx=az)

	def bin_of_direction(self, v) -> LightBin:
		return self.bin_of(dir_to_spherical(v))

	def center_of(self, b: LightBin) -> SphericalLight:
		self._check(b)
		return SphericalLight(
			elevation=float(self.elevation_centers[b.el_idx]),
			azimuth=float(self.azimuth_centers[b.az_idx]),
		)

	def center_direction(self, b: LightBin) -> np.ndarray:
		return spherical_to_dir(self.center_of(b))

	def one_hot_targets(self, b: LightBin) -> Tuple[np.ndarray, np.ndarray]:
		"""(elevation head target, azimuth head target)."""
		self._check(b)
		el = np.zeros(self.bins_per_axis)
		az = np.zeros(self.bins_per_axis)
		el[b.el_idx] = 1.0
		az[b.az_idx] = 1.0
		return el, az

	def all_bins(self) -> List[LightBin]:
		n = self.bins_per_axis
		return [LightBin(el, az) for el in range(n) for az in range(n)]

	@property
	def frontal_bin(self) -> LightBin:
		return self.bin_of(SphericalLight(0.0, 90.0))

	def center_tables(self, device=None, dtype=torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
		"""(elevation centers, azimuth centers) as tensors for the network heads."""
		return (
			torch.as_tensor(self.elevation_centers, device=device, dtype=dtype),
			torch.as_tensor(self.azimuth_centers, device=device, dtype=dtype),
		)


DEFAULT_LIGHTSPACE = LightSpace(5)
FRONTAL_BIN = DEFAULT_LIGHTSPACE.frontal_bin


def bin_of(s: SphericalLight) -> LightBin:
	return DEFAULT_LIGHTSPACE.bin_of(s)


def center_of(b: LightBin) -> SphericalLight:
	return DEFAULT_LIGHTSPACE.center_of(b)


def one_hot_targets(b: LightBin) -> Tuple[np.ndarray, np.ndarray]:
	return DEFAULT_LIGHTSPACE.one_hot_targets(b)

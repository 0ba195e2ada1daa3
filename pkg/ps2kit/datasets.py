"""Capture loading (DiLiGenT layout and synthetic scene directories), resizing
and image-pair sampling.

Loaders never write to the source directories. Ground truth lives in a
separate ``GroundTruth`` object that ``ImagePair`` never carries, so the
self-supervised path cannot see it.
"""

import os
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from .errors import FormatError, InsufficientDiversityError, SchemaError
from .geometry import normalize
from .lightspace import DEFAULT_LIGHTSPACE, LightBin, LightSpace
from .logger import logger
from .photometry import read_scene_meta

GT_NORMAL_CANDIDATES = ("normal_gt.f32", "Normal_gt.f32", "normal_gt.png", "Normal_gt.png")


@dataclass
class GroundTruth:
	"""Evaluation-only data; never handed to the self-supervised trainer."""
	normals: np.ndarray
	albedo: Optional[np.ndarray] = None


@dataclass
class ObjectCapture:
	name: str
	images: np.ndarray  # k x H x W x 3, intensity-normalized, in [0, 1]
	lights: np.ndarray  # k x 3 unit vectors
	mask: np.ndarray  # H x W bool
	intensities: Optional[np.ndarray] = None  # k x 3
	paths: List[str] = field(default_factory=list)
	ground_truth: Optional[GroundTruth] = None

	def __post_init__(self) -> None:
		if self.images.ndim != 4 or self.images.shape[-1] != 3:
			raise FormatError(f"capture {self.name}: images must be k x H x W x 3, got {self.images.shape}")
		if len(self.images) < 2:
			raise FormatError(f"capture {self.name}: at least two images are required")
		if self.images.shape[1:3] != self.mask.shape:
			raise FormatError(f"capture {self.name}: mask {self.mask.shape} does not match images {self.images.shape[1:3]}")
		if len(self.lights) != len(self.images):
			raise FormatError(f"capture {self.name}: {len(self.images)} images but {len(self.lights)} lights")
		self.mask = self.mask.astype(bool)

	@property
	def resolution(self) -> Tuple[int, int]:
		return self.mask.shape

	def bins(self, lightspace: LightSpace = DEFAULT_LIGHTSPACE) -> List[LightBin]:
		return [lightspace.bin_of_direction(l) for l in self.lights]


@dataclass
class ImagePair:
	image1: np.ndarray
	image2: np.ndarray
	mask: np.ndarray
	bin1: LightBin
	bin2: LightBin
	index1: int
	index2: int
	light1: Optional[np.ndarray] = None
	light2: Optional[np.ndarray] = None


# image I/O

def read_image(path: str) -> np.ndarray:
	"""8- or 16-bit PNG as float RGB in [0, 1]."""
	data = cv2.imread(path, cv2.IMREAD_UNCHANGED)
	if data is None:
		raise FormatError("cannot read image", path)
	scale = 65535.0 if data.dtype == np.uint16 else 255.0
	if data.ndim == 2:
		data = np.repeat(data[..., None], 3, axis=-1)
	elif data.shape[-1] == 4:
		data = cv2.cvtColor(data, cv2.COLOR_BGRA2RGB)
	else:
		data = cv2.cvtColor(data, cv2.COLOR_BGR2RGB)
	return data.astype(np.float64) / scale


def write_image(path: str, rgb: np.ndarray, bits: int = 8) -> str:
	scale, dtype = (255.0, np.uint8) if bits == 8 else (65535.0, np.uint16)
	data = np.round(np.clip(rgb, 0.0, 1.0) * scale).astype(dtype)
	if data.ndim == 3:
		data = cv2.cvtColor(data, cv2.COLOR_RGB2BGR)
	if not cv2.imwrite(path, data):
		raise FormatError("cannot write image", path)
	return path


def read_mask(path: str) -> np.ndarray:
	if not os.path.exists(path):
		raise FormatError("missing mask file", path)
	data = cv2.imread(path, cv2.IMREAD_GRAYSCALE)
	if data is None:
		raise FormatError("cannot read mask", path)
	return data > 127


def write_mask(path: str, mask: np.ndarray) -> str:
	cv2.imwrite(path, mask.astype(np.uint8) * 255)
	return path


def _read_triples(path: str, what: str) -> np.ndarray:
	if not os.path.exists(path):
		raise FormatError(f"missing {what} file", path)
	rows = []
	with open(path, "r", encoding="utf-8") as f:
		for lineno, line in enumerate(f, start=1):
			line = line.strip()
			if not line:
				continue
			parts = line.split()
			if len(parts) != 3:
				raise FormatError(f"expected 3 values in {what}, got {len(parts)}", path, lineno)
			try:
				rows.append([float(v) for v in parts])
			except ValueError as e:
				raise FormatError(f"non-numeric {what} entry", path, lineno) from e
	return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def _read_list(path: str) -> List[str]:
	if not os.path.exists(path):
		raise FormatError("missing image list", path)
	with open(path, "r", encoding="utf-8") as f:
		return [line.strip() for line in f if line.strip()]


def read_normals_f32(path: str, shape: Tuple[int, int]) -> np.ndarray:
	h, w = shape
	data = np.fromfile(path, dtype="<f4")
	if data.size != h * w * 3:
		raise FormatError(f"normals file holds {data.size} floats, expected {h * w * 3} for {h}x{w}x3", path)
	return data.reshape(h, w, 3).astype(np.float64)


def decode_normal_png16(data: np.ndarray) -> np.ndarray:
	return data.astype(np.float64) / 65535.0 * 2.0 - 1.0


def encode_normal_png16(normals: np.ndarray) -> np.ndarray:
	return np.round((np.clip(normals, -1.0, 1.0) + 1.0) * 0.5 * 65535.0).astype(np.uint16)


def _read_gt_normals(directory: str, shape: Tuple[int, int]) -> Optional[np.ndarray]:
	for name in GT_NORMAL_CANDIDATES:
		path = os.path.join(directory, name)
		if not os.path.exists(path):
			continue
		if name.endswith(".f32"):
			return read_normals_f32(path, shape)
		raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
		if raw is None or raw.dtype != np.uint16 or raw.ndim != 3:
			raise FormatError("ground-truth normal PNG must be 16-bit RGB", path)
		return decode_normal_png16(cv2.cvtColor(raw, cv2.COLOR_BGR2RGB))
	return None


# loaders

def load_diligent(directory: str, name: Optional[str] = None) -> ObjectCapture:
	names = _read_list(os.path.join(directory, "filenames.txt"))
	lights_path = os.path.join(directory, "light_directions.txt")
	ints_path = os.path.join(directory, "light_intensities.txt")
	lights = _read_triples(lights_path, "light direction")
	intensities = _read_triples(ints_path, "light intensity")
	if len(lights) != len(names):
		raise FormatError(f"{len(names)} filenames but {len(lights)} light directions", lights_path, len(lights))
	if len(intensities) != len(names):
		raise FormatError(f"{len(names)} filenames but {len(intensities)} light intensities", ints_path, len(intensities))
	norms = np.linalg.norm(lights, axis=1)
	bad = np.flatnonzero(norms < 1e-8)
	if bad.size:
		raise FormatError("zero-length light direction", lights_path, int(bad[0]) + 1)
	if np.any(intensities <= 0):
		raise FormatError("light intensities must be positive", ints_path, int(np.argwhere(intensities <= 0)[0, 0]) + 1)
	mask = read_mask(os.path.join(directory, "mask.png"))

	paths = [os.path.join(directory, n) for n in names]
	images = np.stack([read_image(p) / intensities[i][None, None, :] for i, p in enumerate(paths)])
	if images.shape[1:3] != mask.shape:
		raise FormatError(f"images are {images.shape[1:3]} but the mask is {mask.shape}", os.path.join(directory, "mask.png"))
	images = images * mask[None, ..., None]
	peak = images.max()
	if peak > 1.0:
		images = images / peak

	gt = _read_gt_normals(directory, mask.shape)
	logger.info(f"Loaded DiLiGenT capture {directory}: {len(images)} images")
	return ObjectCapture(
		name=name or os.path.basename(os.path.normpath(directory)),
		images=images,
		lights=lights / norms[:, None],
		mask=mask,
		intensities=intensities,
		paths=paths,
		ground_truth=GroundTruth(gt) if gt is not None else None,
	)


def save_diligent(capture: ObjectCapture, directory: str) -> str:
	"""Write a capture in the DiLiGenT layout (16-bit PNGs, unit intensities)."""
	os.makedirs(directory, exist_ok=True)
	names = []
	for i, image in enumerate(capture.images):
		name = f"{i + 1:03d}.png"
		write_image(os.path.join(directory, name), image, bits=16)
		names.append(name)
	with open(os.path.join(directory, "filenames.txt"), "w", encoding="utf-8") as f:
		f.write("\n".join(names) + "\n")
	with open(os.path.join(directory, "light_directions.txt"), "w", encoding="utf-8") as f:
		f.write("\n".join(" ".join(repr(float(v)) for v in l) for l in capture.lights) + "\n")
	with open(os.path.join(directory, "light_intensities.txt"), "w", encoding="utf-8") as f:
		f.write("\n".join("1 1 1" for _ in names) + "\n")
	write_mask(os.path.join(directory, "mask.png"), capture.mask)
	if capture.ground_truth is not None:
		capture.ground_truth.normals.astype("<f4").tofile(os.path.join(directory, "normal_gt.f32"))
	return directory


def load_synthetic(directory: str, name: Optional[str] = None) -> ObjectCapture:
	meta = read_scene_meta(directory)
	shape = (int(meta["height"]), int(meta["width"]))
	lights = _read_triples(os.path.join(directory, "lights.txt"), "light direction")
	paths = [os.path.join(directory, f"img_{i:03d}.png") for i in range(len(lights))]
	if meta.get("num_images", len(lights)) != len(lights):
		raise SchemaError(f"{directory}: scene.json lists {meta['num_images']} images but lights.txt has {len(lights)}")
	images = np.stack([read_image(p) for p in paths])
	mask = read_mask(os.path.join(directory, "mask.png"))
	normals = read_normals_f32(os.path.join(directory, "normals.f32"), shape)
	albedo_path = os.path.join(directory, "albedo.f32")
	if os.path.exists(albedo_path):
		albedo = np.fromfile(albedo_path, dtype="<f4")
		if albedo.size != shape[0] * shape[1] * 3:
			raise FormatError("albedo file has the wrong length", albedo_path)
		albedo = albedo.reshape(*shape, 3).astype(np.float64)
	else:
		albedo = read_image(os.path.join(directory, "albedo.png"))
	return ObjectCapture(
		name=name or os.path.basename(os.path.normpath(directory)),
		images=images,
		lights=normalize(lights),
		mask=mask,
		intensities=np.ones_like(lights),
		paths=paths,
		ground_truth=GroundTruth(normals=normals, albedo=albedo),
	)


def load_capture(directory: str) -> ObjectCapture:
	if os.path.exists(os.path.join(directory, "scene.json")):
		return load_synthetic(directory)
	if os.path.exists(os.path.join(directory, "filenames.txt")):
		return load_diligent(directory)
	raise FormatError("not a synthetic scene (scene.json) or DiLiGenT capture (filenames.txt)", directory)


# resizing

def _square_bbox(mask: np.ndarray, margin: int = 2) -> Tuple[int, int, int, int]:
	rows = np.flatnonzero(mask.any(axis=1))
	cols = np.flatnonzero(mask.any(axis=0))
	h, w = mask.shape
	if rows.size == 0:
		return 0, h, 0, w
	r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
	side = max(r1 - r0, c1 - c0) + 2 * margin
	side = min(side, h, w)
	cr, cc = (r0 + r1) // 2, (c0 + c1) // 2
	top = int(min(max(cr - side // 2, 0), h - side))
	left = int(min(max(cc - side // 2, 0), w - side))
	return top, top + side, left, left + side


def prepare_capture(capture: ObjectCapture, res: int, crop_to_object: bool = True) -> ObjectCapture:
	"""Crop to the object's bounding square and resize to res x res; returns a new capture."""
	r0, r1, c0, c1 = _square_bbox(capture.mask) if crop_to_object else (0, capture.mask.shape[0], 0, capture.mask.shape[1])
	if (r1 - r0, c1 - c0) == (res, res):
		resize = lambda a, interp: a[r0:r1, c0:c1]
	else:
		resize = lambda a, interp: cv2.resize(a[r0:r1, c0:c1], (res, res), interpolation=interp)
	mask = resize(capture.mask.astype(np.uint8), cv2.INTER_NEAREST).astype(bool)
	images = np.stack([resize(im, cv2.INTER_AREA) for im in capture.images]) * mask[None, ..., None]
	gt = None
	if capture.ground_truth is not None:
		normals = normalize(resize(capture.ground_truth.normals, cv2.INTER_LINEAR)) * mask[..., None]
		albedo = capture.ground_truth.albedo
		if albedo is not None:
			albedo = resize(albedo, cv2.INTER_AREA) * mask[..., None]
		gt = GroundTruth(normals=normals, albedo=albedo)
	return replace(capture, images=np.clip(images, 0.0, 1.0), mask=mask, ground_truth=gt)


# pair sampling

def _group_by_bin(capture: ObjectCapture, lightspace: LightSpace) -> Dict[LightBin, List[int]]:
	groups: Dict[LightBin, List[int]] = defaultdict(list)
	for i, b in enumerate(capture.bins(lightspace)):
		groups[b].append(i)
	return dict(groups)


def make_pair(capture: ObjectCapture, i1: int, i2: int, lightspace: LightSpace = DEFAULT_LIGHTSPACE) -> ImagePair:
	return ImagePair(
		image1=capture.images[i1], image2=capture.images[i2], mask=capture.mask,
		bin1=lightspace.bin_of_direction(capture.lights[i1]),
		bin2=lightspace.bin_of_direction(capture.lights[i2]),
		index1=i1, index2=i2,
		light1=capture.lights[i1], light2=capture.lights[i2],
	)


def sample_pairs(capture: ObjectCapture, n: int, seed, lightspace: LightSpace = DEFAULT_LIGHTSPACE,
		frontal: bool = False, candidates: Optional[Sequence[int]] = None) -> List[ImagePair]:
	"""n pairs with distinct bins, uniform over unordered bin pairs.

	With frontal=True the first image always comes from the frontal bin.
	candidates restricts sampling to a subset of image indices.
	"""
	rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
	groups = _group_by_bin(capture, lightspace)
	if candidates is not None:
		allowed = set(int(c) for c in candidates)
		groups = {b: [i for i in idx if i in allowed] for b, idx in groups.items()}
		groups = {b: idx for b, idx in groups.items() if idx}
	bins = sorted(groups)
	if len(bins) < 2:
		raise InsufficientDiversityError(f"capture {capture.name} covers {len(bins)} light bin(s); pairs need 2")
	frontal_bin = lightspace.frontal_bin
	if frontal and frontal_bin not in groups:
		raise InsufficientDiversityError(f"capture {capture.name} has no image in the frontal bin {frontal_bin}")
	pairs = []
	for _ in range(n):
		if frontal:
			others = [b for b in bins if b != frontal_bin]
			b1, b2 = frontal_bin, others[rng.integers(len(others))]
		else:
			j1, j2 = rng.choice(len(bins), size=2, replace=False)
			b1, b2 = bins[j1], bins[j2]
		i1 = groups[b1][rng.integers(len(groups[b1]))]
		i2 = groups[b2][rng.integers(len(groups[b2]))]
		pairs.append(make_pair(capture, int(i1), int(i2), lightspace))
	return pairs


def sample_warmup_indices(capture: ObjectCapture, count: int, rng: np.random.Generator,
		lightspace: LightSpace = DEFAULT_LIGHTSPACE) -> List[int]:
	"""Up to count image indices, one per distinct bin first, topped up at random."""
	groups = _group_by_bin(capture, lightspace)
	bins = sorted(groups)
	order = rng.permutation(len(bins))
	chosen = [int(groups[bins[j]][rng.integers(len(groups[bins[j]]))]) for j in order[:count]]
	if len(chosen) < count:
		rest = [i for i in range(len(capture.images)) if i not in chosen]
		extra = rng.permutation(rest)[: count - len(chosen)]
		chosen.extend(int(i) for i in extra)
	return sorted(chosen)

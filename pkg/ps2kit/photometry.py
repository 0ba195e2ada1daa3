"""Image formation, synthetic scenes and the least-squares oracle.

Arrays are numpy, images H x W x 3 in [0, 1], normal maps H x W x 3, masks
H x W boolean. Only attached shadows are modeled.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from .errors import ArityError, FormatError, SchemaError, SingularConfigurationError
from .geometry import VIEW_DIR, half_vector, normalize
from .lightspace import DEFAULT_LIGHTSPACE, LightBin, LightSpace
from .logger import logger

SCENE_SCHEMA = "ps2kit-scene-v1"
GEOMETRY_KINDS = ("sphere", "heightfield")


@dataclass
class SyntheticScene:
	kind: str
	height: np.ndarray  # H x W heightfield (sphere: z of the hemisphere)
	normals: np.ndarray  # H x W x 3
	albedo: np.ndarray  # H x W x 3
	mask: np.ndarray  # H x W bool
	ks: float = 0.0
	alpha: float = 20.0
	sigma: float = 0.0
	seed: int = 0

	@property
	def shape(self) -> Tuple[int, int]:
		return self.mask.shape


@dataclass
class RenderedImage:
	image: np.ndarray
	light: np.ndarray
	mask: np.ndarray


@dataclass
class WeakLabels:
	"""Oracle labels for warm-up: one entry per sampled image."""
	normals: np.ndarray
	albedos: List[np.ndarray]
	shadings: List[np.ndarray]
	specular_masks: List[np.ndarray]
	supervision_masks: List[np.ndarray]
	bins: List[LightBin]
	indices: List[int] = field(default_factory=list)


def _disk_mask(res: int, radius: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
	coords = (np.arange(res) + 0.5 - res / 2.0) / radius
	x = coords[None, :].repeat(res, axis=0)
	y = -coords[:, None].repeat(res, axis=1)
	return x, y, (x * x + y * y) < 1.0


def textured_albedo(res: int, rng: np.random.Generator, low: float = 0.2, high: float = 0.9) -> np.ndarray:
	"""Smooth spatially varying RGB albedo built from a few random sinusoids."""
	yy, xx = np.mgrid[0:res, 0:res] / float(res)
	out = np.zeros((res, res, 3))
	for c in range(3):
		acc = np.zeros((res, res))
		for _ in range(3):
			fx, fy = rng.uniform(0.5, 3.0, size=2)
			ph = rng.uniform(0, 2 * np.pi)
			acc += np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
		acc = (acc - acc.min()) / max(acc.max() - acc.min(), 1e-12)
		out[..., c] = low + (high - low) * acc
	return out


def _scene_albedo(res: int, albedo: str, rng: np.random.Generator, mask: np.ndarray) -> np.ndarray:
	if albedo == "uniform":
		a = np.full((res, res, 3), 0.8)
	elif albedo == "textured":
		a = textured_albedo(res, rng)
	else:
		raise ValueError(f"unknown albedo pattern {albedo!r}")
	return a * mask[..., None]


def make_sphere_scene(res: int = 128, ks: float = 0.0, alpha: float = 20.0, sigma: float = 0.0,
		albedo: str = "uniform", seed: int = 0, radius_frac: float = 0.45) -> SyntheticScene:
	rng = np.random.default_rng(seed)
	x, y, mask = _disk_mask(res, radius_frac * res)
	z = np.sqrt(np.clip(1.0 - x * x - y * y, 0.0, None))
	normals = np.stack([x, y, z], axis=-1) * mask[..., None]
	return SyntheticScene("sphere", z * mask, normals, _scene_albedo(res, albedo, rng, mask), mask,
		ks=ks, alpha=alpha, sigma=sigma, seed=seed)


def normals_from_height(height: np.ndarray, spacing: float = 1.0) -> np.ndarray:
	# rows grow downwards while y points up
	dz_drow, dz_dx = np.gradient(height, spacing)
	dz_dy = -dz_drow
	n = np.stack([-dz_dx, -dz_dy, np.ones_like(height)], axis=-1)
	return normalize(n)


def make_heightfield_scene(res: int = 128, ks: float = 0.0, alpha: float = 20.0, sigma: float = 0.0,
		albedo: str = "textured", seed: int = 0, bumps: int = 12, amplitude: float = 0.08,
		radius_frac: float = 0.45) -> SyntheticScene:
	"""Bumpy surface: a sum of Gaussian bumps and dents over a disk-shaped object."""
	rng = np.random.default_rng(seed)
	_, _, mask = _disk_mask(res, radius_frac * res)
	yy, xx = np.mgrid[0:res, 0:res] / float(res)
	height = np.zeros((res, res))
	for _ in range(bumps):
		cx, cy = rng.uniform(0.15, 0.85, size=2)
		width = rng.uniform(0.04, 0.12)
		amp = amplitude * rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0)
		height += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * width ** 2))
	normals = normals_from_height(height, spacing=1.0 / res) * mask[..., None]
	return SyntheticScene("heightfield", height * mask, normals, _scene_albedo(res, albedo, rng, mask), mask,
		ks=ks, alpha=alpha, sigma=sigma, seed=seed)


def make_scene(kind: str, **kwargs) -> SyntheticScene:
	if kind == "sphere":
		return make_sphere_scene(**kwargs)
	if kind == "heightfield":
		return make_heightfield_scene(**kwargs)
	raise ValueError(f"unknown geometry kind {kind!r}, expected one of {', '.join(GEOMETRY_KINDS)}")


def shade_lambert(n: np.ndarray, l: Sequence[float], mask: Optional[np.ndarray] = None) -> np.ndarray:
	"""Per-pixel max(n . l, 0), i.e. Lambertian shading with attached shadows."""
	shading = np.maximum(np.tensordot(n, np.asarray(l, dtype=np.float64), axes=([-1], [0])), 0.0)
	if mask is not None:
		shading = shading * mask
	return shading


def specular_term(n: np.ndarray, l: Sequence[float], ks: float, alpha: float) -> np.ndarray:
	"""Isotropic half-vector lobe ks * max(n . h, 0)^alpha, zero where n . l <= 0."""
	h = half_vector(l, VIEW_DIR)
	ndoth = np.maximum(np.tensordot(n, h, axes=([-1], [0])), 0.0)
	lit = np.tensordot(n, np.asarray(l, dtype=np.float64), axes=([-1], [0])) > 0
	return ks * ndoth ** alpha * lit


def render(scene: SyntheticScene, l: Sequence[float], rng: Optional[np.random.Generator] = None) -> RenderedImage:
	l = np.asarray(l, dtype=np.float64)
	shading = shade_lambert(scene.normals, l, scene.mask)
	image = scene.albedo * shading[..., None]
	if scene.ks > 0:
		image = image + (specular_term(scene.normals, l, scene.ks, scene.alpha) * scene.mask)[..., None]
	if scene.sigma > 0:
		rng = rng if rng is not None else np.random.default_rng(scene.seed)
		image = image + rng.normal(0.0, scene.sigma, size=image.shape)
	image = np.clip(image, 0.0, 1.0) * scene.mask[..., None]
	return RenderedImage(image=image, light=l, mask=scene.mask)


def render_all_bins(scene: SyntheticScene, lightspace: LightSpace = DEFAULT_LIGHTSPACE,
		seed: Optional[int] = None) -> List[RenderedImage]:
	"""One render per bin center, in flat-index order."""
	rng = np.random.default_rng(scene.seed if seed is None else seed)
	return [render(scene, lightspace.center_direction(b), rng) for b in lightspace.all_bins()]


def to_gray(image: np.ndarray) -> np.ndarray:
	return image.mean(axis=-1)


def lstsq_normals(images: Sequence, lights: Sequence[Sequence[float]], mask: Optional[np.ndarray] = None,
		eps_rho: float = 1e-4, shadow_threshold: float = 0.0,
		exclude_shadows: bool = True) -> Tuple[np.ndarray, np.ndarray]:
	"""Classical photometric stereo: solve L (rho n) = I per pixel.

	Returns (normals H x W x 3, albedo H x W x 3). Observations at or below
	shadow_threshold are dropped per pixel when at least three non-coplanar
	lit observations remain; otherwise the pixel uses every observation.
	"""
	arrays = [im.image if isinstance(im, RenderedImage) else np.asarray(im, dtype=np.float64) for im in images]
	if len(arrays) < 3:
		raise ArityError(f"least-squares normals need at least 3 images, got {len(arrays)}")
	L = np.asarray(lights, dtype=np.float64).reshape(-1, 3)
	if L.shape[0] != len(arrays):
		raise ArityError(f"{len(arrays)} images but {L.shape[0]} lights")
	if np.linalg.matrix_rank(L, tol=1e-8) < 3:
		raise SingularConfigurationError("light directions are coplanar; the system is rank deficient")
	if mask is None:
		first = images[0]
		mask = first.mask if isinstance(first, RenderedImage) else np.ones(arrays[0].shape[:2], dtype=bool)
	mask = np.asarray(mask, dtype=bool)
	h, w = mask.shape
	stack = np.stack(arrays, axis=0)  # k x H x W x C
	if stack.ndim == 3:
		stack = stack[..., None]
	k, c = stack.shape[0], stack.shape[-1]
	pix = np.flatnonzero(mask.reshape(-1))
	obs = stack.reshape(k, h * w, c)[:, pix, :]  # k x P x C
	gray = obs.mean(axis=-1)  # k x P

	full_pinv = np.linalg.pinv(L)
	b_gray = np.zeros((3, pix.size))
	b_rgb = np.zeros((c, 3, pix.size))
	lit = gray > shadow_threshold if exclude_shadows else np.ones_like(gray, dtype=bool)
	# group pixels sharing the same pattern of lit observations
	weights = (1 << np.arange(k, dtype=np.int64))[:, None]
	if k > 62:
		patterns, inverse = np.unique(lit.T, axis=0, return_inverse=True)
	else:
		codes = (lit.astype(np.int64) * weights).sum(axis=0)
		uniq, inverse = np.unique(codes, return_inverse=True)
		patterns = ((uniq[:, None] >> np.arange(k)) & 1).astype(bool)
	inverse = np.asarray(inverse).reshape(-1)
	for g, active in enumerate(patterns):
		sel = np.flatnonzero(inverse == g)
		pinv = full_pinv
		rows = np.arange(k)
		if active.sum() >= 3 and active.sum() < k and np.linalg.matrix_rank(L[active], tol=1e-8) == 3:
			rows = np.flatnonzero(active)
			pinv = np.linalg.pinv(L[rows])
		b_gray[:, sel] = pinv @ gray[rows][:, sel]
		for ch in range(c):
			b_rgb[ch][:, sel] = pinv @ obs[rows][:, sel, ch]

	rho_gray = np.linalg.norm(b_gray, axis=0)
	valid = rho_gray >= eps_rho
	n_flat = np.zeros((3, pix.size))
	n_flat[:, valid] = b_gray[:, valid] / rho_gray[valid]
	rho_rgb = np.linalg.norm(b_rgb, axis=1)  # C x P
	rho_rgb[:, ~valid] = 0.0

	normals = np.zeros((h * w, 3))
	normals[pix] = n_flat.T
	albedo = np.zeros((h * w, c))
	albedo[pix] = np.clip(rho_rgb.T, 0.0, 1.0)
	if not valid.all():
		logger.debug(f"lstsq_normals: {int((~valid).sum())} pixels below eps_rho marked invalid")
	return normals.reshape(h, w, 3), albedo.reshape(h, w, c)


def decompose_weak_labels(images: Sequence, lights: Sequence[Sequence[float]], normals: np.ndarray,
		mask: np.ndarray, tau_s: float = 0.99, eps_div: float = 1e-6, shading_floor: float = 0.1,
		lightspace: LightSpace = DEFAULT_LIGHTSPACE) -> WeakLabels:
	"""Split each image into shading, specular highlights and albedo for warm-up supervision."""
	albedos, shadings, speculars, sup_masks, bins = [], [], [], [], []
	mask = mask.astype(bool)
	for im, l in zip(images, lights):
		image = im.image if isinstance(im, RenderedImage) else np.asarray(im, dtype=np.float64)
		l = np.asarray(l, dtype=np.float64)
		shading = shade_lambert(normals, l, mask)
		h = half_vector(l, VIEW_DIR)
		specular = (np.tensordot(normals, h, axes=([-1], [0])) > tau_s) & mask
		usable = mask & (shading > shading_floor)
		albedo = np.clip(image / (shading[..., None] + eps_div), 0.0, 1.0) * usable[..., None]
		albedos.append(albedo)
		shadings.append(shading)
		speculars.append(specular)
		sup_masks.append(usable & ~specular)
		bins.append(lightspace.bin_of_direction(l))
	return WeakLabels(normals=normals, albedos=albedos, shadings=shadings, specular_masks=speculars,
		supervision_masks=sup_masks, bins=bins)


# scene directory serialization

def _write_rgb(path: str, rgb: np.ndarray, bits: int) -> None:
	scale = 255.0 if bits == 8 else 65535.0
	dtype = np.uint8 if bits == 8 else np.uint16
	data = np.round(np.clip(rgb, 0.0, 1.0) * scale).astype(dtype)
	if not cv2.imwrite(path, cv2.cvtColor(data, cv2.COLOR_RGB2BGR)):
		raise FormatError("cannot write image", path)


def save_scene(scene: SyntheticScene, renders: Sequence[RenderedImage], out_dir: str) -> str:
	os.makedirs(out_dir, exist_ok=True)
	h, w = scene.shape
	meta = {
		"schema": SCENE_SCHEMA,
		"kind": scene.kind,
		"ks": scene.ks,
		"alpha": scene.alpha,
		"sigma": scene.sigma,
		"seed": scene.seed,
		"height": h,
		"width": w,
		"num_images": len(renders),
	}
	with open(os.path.join(out_dir, "scene.json"), "w", encoding="utf-8") as f:
		json.dump(meta, f, indent=2)
	_write_rgb(os.path.join(out_dir, "albedo.png"), scene.albedo, 8)
	scene.albedo.astype("<f4").tofile(os.path.join(out_dir, "albedo.f32"))
	scene.normals.astype("<f4").tofile(os.path.join(out_dir, "normals.f32"))
	cv2.imwrite(os.path.join(out_dir, "mask.png"), scene.mask.astype(np.uint8) * 255)
	lines = []
	for i, r in enumerate(renders):
		_write_rgb(os.path.join(out_dir, f"img_{i:03d}.png"), r.image, 16)
		lines.append(" ".join(f"{v:.9f}" for v in r.light))
	with open(os.path.join(out_dir, "lights.txt"), "w", encoding="utf-8") as f:
		f.write("\n".join(lines) + "\n")
	logger.info(f"Saved {scene.kind} scene with {len(renders)} renders to {out_dir}")
	return out_dir


def read_scene_meta(scene_dir: str) -> Dict:
	path = os.path.join(scene_dir, "scene.json")
	try:
		with open(path, "r", encoding="utf-8") as f:
			meta = json.load(f)
	except FileNotFoundError as e:
		raise FormatError("missing scene description", path) from e
	if meta.get("schema") != SCENE_SCHEMA:
		raise SchemaError(f"{path}: schema {meta.get('schema')!r} does not match {SCENE_SCHEMA!r}")
	return meta

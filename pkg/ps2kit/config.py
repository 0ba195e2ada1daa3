import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, List, Optional

try:
	import yaml  # type: ignore
except Exception:
	yaml = None

from .errors import ConfigError

MODES = ("selfsup", "frontal", "supervised", "calibrated")
CALIBRATED_LIGHTS = ("measured", "bin_center")


@dataclass(frozen=True)
class AblationConfig:
	le: bool = True
	ar: bool = True
	pe: bool = True
	ir: bool = True
	warmup: bool = True
	mode: str = "selfsup"

	@property
	def calibrated(self) -> bool:
		return self.mode == "calibrated"

	def validate(self) -> "AblationConfig":
		# calibrated runs take their lights from the capture instead of LE
		lit = self.le or self.calibrated
		if self.ar and not lit:
			raise ConfigError("albedo refinement (AR) requires lighting estimation (LE) or calibrated mode")
		if self.pe and not self.ar:
			raise ConfigError("positional encoding (PE) requires albedo refinement (AR)")
		if self.ir and not lit:
			raise ConfigError("image relighting (IR) requires lighting estimation (LE) or calibrated mode")
		if self.mode not in MODES:
			raise ConfigError(f"unknown training mode {self.mode!r}, expected one of {', '.join(MODES)}")
		if self.mode == "frontal" and not self.le:
			raise ConfigError("frontally-lit mode supervises the illumination module and needs LE")
		return self


@dataclass
class PS2Config:
	seed: int = 0
	# light space
	bins_per_axis: int = 5
	# photometry
	tau_s: float = 0.99
	eps_div: float = 1e-6
	eps_rho: float = 1e-4
	shading_floor: float = 0.1
	shadow_threshold: float = 0.0
	# data
	res: int = 128
	crop_to_object: bool = True
	pairs_per_object: int = 10
	# network
	width_scale: float = 1.0
	pe_freqs: int = 3
	use_mask_channel: bool = True
	freeze_illumination: bool = False
	# losses
	lambda_l1: float = 0.5
	lambda_l2: float = 0.5
	lambda_perp: float = 1.0
	perceptual_layer: str = "relu3_1"
	perceptual_pretrained: bool = True
	# trainer
	lr0: float = 1e-4
	epochs: int = 25
	batch_size: int = 32
	lr_halving_epochs: int = 5
	iters_per_epoch: int = 100
	warmup_iters: int = 2000
	warmup_samples: int = 10
	warmup_with_recon: bool = False
	device: str = "cpu"
	# ablation switches
	le: bool = True
	ar: bool = True
	pe: bool = True
	ir: bool = True
	warmup: bool = True
	mode: str = "selfsup"
	# light source in calibrated mode: measured direction or its bin center
	calibrated_light: str = "measured"

	@property
	def ablation(self) -> AblationConfig:
		return AblationConfig(self.le, self.ar, self.pe, self.ir, self.warmup, self.mode)

	@property
	def total_iters(self) -> int:
		return self.epochs * self.iters_per_epoch

	def to_dict(self) -> Dict[str, Any]:
		return asdict(self)


CONFIG_PATH_CANDIDATES = [
	os.path.expanduser("~/.config/ps2kit/config.yaml"),
	os.path.join(os.getcwd(), "ps2kit.yaml"),
]


def _load_yaml(path: str) -> dict:
	if yaml is None:
		return {}
	try:
		with open(path, "r", encoding="utf-8") as f:
			data = yaml.safe_load(f) or {}
	except FileNotFoundError:
		return {}
	except yaml.YAMLError as e:
		raise ConfigError(f"cannot parse config file {path}: {e}") from e
	if not isinstance(data, dict):
		raise ConfigError(f"config file {path} must be a flat key/value mapping")
	return data


def _coerce(name: str, kind: Any, value: Any) -> Any:
	try:
		if kind in (bool, "bool"):
			if isinstance(value, str):
				lowered = value.strip().lower()
				if lowered in ("1", "true", "yes", "on"):
					return True
				if lowered in ("0", "false", "no", "off"):
					return False
				raise ValueError(value)
			return bool(value)
		if kind in (int, "int"):
			return int(value)
		if kind in (float, "float"):
			return float(value)
		return str(value)
	except (TypeError, ValueError) as e:
		raise ConfigError(f"invalid value {value!r} for config key {name!r}") from e


def apply_overrides(cfg: PS2Config, over: Dict[str, Any], source: str = "overrides") -> List[str]:
	"""Apply a flat mapping onto cfg in place; returns the keys that were unknown."""
	known = {f.name: f.type for f in fields(cfg)}
	unknown = []
	for key, value in over.items():
		if value is None:
			continue
		key = str(key).replace("-", "_")
		if key not in known:
			unknown.append(key)
			continue
		setattr(cfg, key, _coerce(key, known[key], value))
	if unknown:
		# imported lazily, the logger depends on this module for its paths
		from .logger import logger
		logger.warning(f"Ignoring unknown config keys from {source}: {', '.join(sorted(unknown))}")
	return unknown


def validate_config(cfg: PS2Config) -> PS2Config:
	cfg.ablation.validate()
	if cfg.res <= 0 or cfg.res % 32 != 0:
		raise ConfigError(f"res must be a positive multiple of 32, got {cfg.res}")
	if cfg.bins_per_axis < 1:
		raise ConfigError("bins_per_axis must be >= 1")
	for name in ("lr0", "epochs", "batch_size", "lr_halving_epochs", "iters_per_epoch", "pe_freqs", "width_scale"):
		if getattr(cfg, name) <= 0:
			raise ConfigError(f"{name} must be positive")
	for name in ("lambda_l1", "lambda_l2", "lambda_perp", "warmup_iters"):
		if getattr(cfg, name) < 0:
			raise ConfigError(f"{name} must be nonnegative")
	if cfg.warmup and cfg.warmup_iters > cfg.total_iters:
		raise ConfigError(
			f"warmup_iters ({cfg.warmup_iters}) exceeds total iterations ({cfg.total_iters})"
		)
	if cfg.warmup_samples < 3:
		raise ConfigError("warmup_samples must be >= 3 for the least-squares oracle")
	if cfg.calibrated_light not in CALIBRATED_LIGHTS:
		raise ConfigError(f"calibrated_light must be one of {', '.join(CALIBRATED_LIGHTS)}, got {cfg.calibrated_light!r}")
	return cfg


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> PS2Config:
	cfg = PS2Config()
	candidates = list(CONFIG_PATH_CANDIDATES)
	if path:
		if not os.path.exists(path):
			raise ConfigError(f"config file not found: {path}")
		candidates.append(path)
	for candidate in candidates:
		over = _load_yaml(candidate)
		if not over:
			continue
		apply_overrides(cfg, over, source=candidate)
	if overrides:
		apply_overrides(cfg, overrides, source="command line")
	return validate_config(cfg)


DATA_DIR_DEFAULT = os.environ.get("PS2KIT_DATA_DIR") or os.path.expanduser("~/.local/share/ps2kit")
DB_PATH_DEFAULT = os.path.join(DATA_DIR_DEFAULT, "ps2kit.db")


def ensure_data_dir(path: Optional[str] = None) -> str:
	target = path or DATA_DIR_DEFAULT
	os.makedirs(target, exist_ok=True)
	return target


def deterministic_requested() -> bool:
	return os.environ.get("PS2KIT_DETERMINISTIC", "") == "1"

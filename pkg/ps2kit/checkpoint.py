"""Self-describing checkpoint archives (schema ps2kit-ckpt-v1)."""

import os
from typing import Any, Dict, Optional, Tuple

import torch

from .config import PS2Config, apply_overrides, validate_config
from .errors import SchemaError
from .logger import logger

CHECKPOINT_SCHEMA = "ps2kit-ckpt-v1"


def describe_tensors(state_dict: Dict[str, torch.Tensor]) -> Dict[str, Dict[str, Any]]:
	return {
		name: {"shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", "")}
		for name, t in state_dict.items()
	}


def save_checkpoint(path: str, model: torch.nn.Module, cfg: PS2Config, iteration: int, epoch: int,
		optimizer: Optional[torch.optim.Optimizer] = None) -> str:
	os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
	params = {k: v.detach().cpu() for k, v in model.state_dict().items()}
	archive = {
		"schema": CHECKPOINT_SCHEMA,
		"tensors": describe_tensors(params),
		"params": params,
		"optimizer": optimizer.state_dict() if optimizer is not None else None,
		"config": cfg.to_dict(),
		"ablation": {
			"le": cfg.le, "ar": cfg.ar, "pe": cfg.pe, "ir": cfg.ir,
			"warmup": cfg.warmup, "mode": cfg.mode,
		},
		"iteration": int(iteration),
		"epoch": int(epoch),
	}
	tmp = path + ".tmp"
	torch.save(archive, tmp)
	os.replace(tmp, path)
	logger.checkpoint_event(path, epoch, iteration)
	return path


def read_checkpoint(path: str) -> Dict[str, Any]:
	archive = torch.load(path, map_location="cpu", weights_only=False)
	if not isinstance(archive, dict) or archive.get("schema") != CHECKPOINT_SCHEMA:
		found = archive.get("schema") if isinstance(archive, dict) else type(archive).__name__
		raise SchemaError(f"{path}: checkpoint schema {found!r} does not match {CHECKPOINT_SCHEMA!r}")
	declared = archive.get("tensors", {})
	for name, t in archive["params"].items():
		entry = declared.get(name)
		if entry is None or list(t.shape) != entry["shape"]:
			raise SchemaError(f"{path}: tensor {name} does not match its declared shape")
	return archive


def config_from_checkpoint(archive: Dict[str, Any]) -> PS2Config:
	cfg = PS2Config()
	apply_overrides(cfg, archive.get("config", {}), source="checkpoint")
	return validate_config(cfg)


def resolve_config(archive: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> PS2Config:
	"""Checkpoint config with run-time overrides (seed, res, device) applied and validated."""
	cfg = config_from_checkpoint(archive)
	if overrides:
		apply_overrides(cfg, overrides, source="command line")
	return validate_config(cfg)


def checkpoint_config(path: str, overrides: Optional[Dict[str, Any]] = None) -> PS2Config:
	return resolve_config(read_checkpoint(path), overrides)


def load_model(path: str, device: str = "cpu", overrides: Optional[Dict[str, Any]] = None) -> Tuple[torch.nn.Module, PS2Config, Dict[str, Any]]:
	"""Rebuild the network stored at path; returns (model in eval mode, config, archive)."""
	from .networks import PS2Net

	archive = read_checkpoint(path)
	cfg = resolve_config(archive, overrides)
	model = PS2Net.from_config(cfg)
	model.load_state_dict(archive["params"])
	model.to(device).eval()
	return model, cfg, archive

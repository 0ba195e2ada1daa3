"""Warm-up weak supervision and self-supervised training.

Every iteration draws its pairs and dropout noise from generators seeded with
(seed, iteration), so a run resumed from a checkpoint replays exactly the
steps the uninterrupted run would have taken.
"""

import json
import math
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import read_checkpoint, save_checkpoint
from .config import PS2Config, deterministic_requested
from .datasets import GroundTruth, ImagePair, ObjectCapture, prepare_capture, sample_pairs, sample_warmup_indices
from .errors import EmptyDatasetError, InsufficientDiversityError, MissingLabelsError
from .lightspace import LightSpace
from .logger import logger
from .losses import Objective, loss_lighting_ce, loss_normal
from .networks import PS2Net, SceneEstimate
from .photometry import WeakLabels, decompose_weak_labels, lstsq_normals


def configure_determinism(force: bool = False) -> bool:
	"""Switch torch to deterministic kernels when PS2KIT_DETERMINISTIC=1 (or force)."""
	if not (force or deterministic_requested()):
		return False
	torch.use_deterministic_algorithms(True, warn_only=True)
	torch.backends.cudnn.deterministic = True
	torch.backends.cudnn.benchmark = False
	return True


def lr_at(epoch: int, cfg: PS2Config) -> float:
	return cfg.lr0 * 0.5 ** (epoch // cfg.lr_halving_epochs)


def step_rng(cfg: PS2Config, iteration: int) -> np.random.Generator:
	return np.random.default_rng([cfg.seed, iteration])


@dataclass
class TrainState:
	model: PS2Net
	optimizer: torch.optim.Optimizer
	cfg: PS2Config
	iteration: int = 0

	@property
	def epoch(self) -> int:
		return self.iteration // self.cfg.iters_per_epoch

	@property
	def device(self) -> torch.device:
		return next(self.model.parameters()).device

	def in_warmup(self) -> bool:
		return self.cfg.warmup and self.iteration < self.cfg.warmup_iters


def build_state(cfg: PS2Config) -> TrainState:
	torch.manual_seed(cfg.seed)
	model = PS2Net.from_config(cfg).to(cfg.device)
	optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr0, betas=(0.9, 0.999), eps=1e-8)
	return TrainState(model=model, optimizer=optimizer, cfg=cfg)


def resume_state(cfg: PS2Config, path: str) -> TrainState:
	archive = read_checkpoint(path)
	state = build_state(cfg)
	state.model.load_state_dict(archive["params"])
	if archive.get("optimizer") is not None:
		state.optimizer.load_state_dict(archive["optimizer"])
	state.iteration = int(archive["iteration"])
	logger.info(f"Resumed from {path} at iteration {state.iteration}")
	return state


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
	for group in optimizer.param_groups:
		group["lr"] = lr


# batches

@dataclass
class PairBatch:
	image1: torch.Tensor
	image2: torch.Tensor
	mask: torch.Tensor
	bins1: torch.Tensor  # B x 2 (el_idx, az_idx)
	bins2: torch.Tensor
	# capture light directions, B x 3; consumed in calibrated mode
	lights1: Optional[torch.Tensor] = None
	lights2: Optional[torch.Tensor] = None
	# warm-up oracle labels
	normal_label: Optional[torch.Tensor] = None
	albedo_labels: Optional[Tuple[torch.Tensor, torch.Tensor]] = None
	albedo_masks: Optional[Tuple[torch.Tensor, torch.Tensor]] = None
	# fully supervised mode only
	gt_normal: Optional[torch.Tensor] = None
	gt_albedo: Optional[Tuple[torch.Tensor, torch.Tensor]] = None
	# metric logging only, never used by a loss
	eval_normal: Optional[torch.Tensor] = None

	@property
	def size(self) -> int:
		return self.image1.shape[0]


def _chw(arrays: Sequence[np.ndarray], device) -> torch.Tensor:
	stacked = np.stack([a if a.ndim == 3 else a[..., None] for a in arrays]).astype(np.float32)
	return torch.from_numpy(stacked).permute(0, 3, 1, 2).contiguous().to(device)


def _bins(bins, device) -> torch.Tensor:
	return torch.tensor([[b.el_idx, b.az_idx] for b in bins], dtype=torch.long, device=device)


def _vectors(vectors: Sequence[np.ndarray], device) -> torch.Tensor:
	return torch.from_numpy(np.stack(vectors).astype(np.float32)).to(device)


def collate_pairs(pairs: Sequence[ImagePair], device="cpu", oracles: Optional[Sequence["WeakOracle"]] = None,
		supervision: Optional[Sequence[GroundTruth]] = None, eval_normals: Optional[Sequence[np.ndarray]] = None) -> PairBatch:
	batch = PairBatch(
		image1=_chw([p.image1 for p in pairs], device),
		image2=_chw([p.image2 for p in pairs], device),
		mask=_chw([p.mask.astype(np.float32) for p in pairs], device),
		bins1=_bins([p.bin1 for p in pairs], device),
		bins2=_bins([p.bin2 for p in pairs], device),
	)
	if all(p.light1 is not None and p.light2 is not None for p in pairs):
		batch.lights1 = _vectors([p.light1 for p in pairs], device)
		batch.lights2 = _vectors([p.light2 for p in pairs], device)
	if oracles is not None:
		batch.normal_label = _chw([o.labels.normals for o in oracles], device)
		batch.albedo_labels = (
			_chw([o.albedo(p.index1) for o, p in zip(oracles, pairs)], device),
			_chw([o.albedo(p.index2) for o, p in zip(oracles, pairs)], device),
		)
		batch.albedo_masks = (
			_chw([o.supervision_mask(p.index1).astype(np.float32) for o, p in zip(oracles, pairs)], device),
			_chw([o.supervision_mask(p.index2).astype(np.float32) for o, p in zip(oracles, pairs)], device),
		)
	if supervision is not None:
		if any(gt is None or gt.albedo is None for gt in supervision):
			raise MissingLabelsError("fully supervised training needs ground-truth normals and albedo")
		batch.gt_normal = _chw([gt.normals for gt in supervision], device)
		albedo = _chw([gt.albedo for gt in supervision], device)
		batch.gt_albedo = (albedo, albedo)
	if eval_normals is not None:
		batch.eval_normal = _chw(eval_normals, device)
	return batch


@dataclass
class WeakOracle:
	"""Least-squares labels for the warm-up images of one capture."""
	indices: List[int]
	labels: WeakLabels
	_slot: Dict[int, int] = field(default_factory=dict)

	def __post_init__(self) -> None:
		self._slot = {idx: k for k, idx in enumerate(self.indices)}

	def albedo(self, index: int) -> np.ndarray:
		return self.labels.albedos[self._slot[index]]

	def supervision_mask(self, index: int) -> np.ndarray:
		return self.labels.supervision_masks[self._slot[index]]


def build_weak_oracle(capture: ObjectCapture, cfg: PS2Config, rng: np.random.Generator) -> WeakOracle:
	"""Sample warm-up images, solve least squares against their bin-center lights and decompose."""
	lightspace = LightSpace(cfg.bins_per_axis)
	indices = sample_warmup_indices(capture, cfg.warmup_samples, rng, lightspace)
	lights = [lightspace.center_direction(lightspace.bin_of_direction(capture.lights[i])) for i in indices]
	images = [capture.images[i] for i in indices]
	normals, _ = lstsq_normals(images, lights, capture.mask, eps_rho=cfg.eps_rho, shadow_threshold=cfg.shadow_threshold)
	labels = decompose_weak_labels(images, lights, normals, capture.mask, tau_s=cfg.tau_s, eps_div=cfg.eps_div,
		shading_floor=cfg.shading_floor, lightspace=lightspace)
	labels.indices = list(indices)
	return WeakOracle(indices=list(indices), labels=labels)


# steps

def _optimize(state: TrainState, loss: torch.Tensor) -> None:
	state.optimizer.zero_grad(set_to_none=True)
	loss.backward()
	state.optimizer.step()
	state.iteration += 1


def pair_lights(model: PS2Net, batch: PairBatch, cfg: PS2Config) -> Optional[Tuple[torch.Tensor, torch.Tensor]]:
	"""Lights handed to the network in calibrated mode; None otherwise."""
	if not cfg.ablation.calibrated:
		return None
	if cfg.calibrated_light == "bin_center":
		return model.bin_center_lights(batch.bins1), model.bin_center_lights(batch.bins2)
	if batch.lights1 is None or batch.lights2 is None:
		raise MissingLabelsError("calibrated mode needs measured light directions for every pair")
	return batch.lights1, batch.lights2


def _reconstruction_losses(est: SceneEstimate, batch: PairBatch, objective: Objective, ir: bool) -> Tuple[torch.Tensor, torch.Tensor]:
	recon = objective.image(batch.image1, est.reconstruction[0], batch.mask) \
		+ objective.image(batch.image2, est.reconstruction[1], batch.mask)
	relight = objective.image(batch.image1, est.relit, batch.mask) if ir and est.relit is not None else recon.new_zeros(())
	return recon, relight


def warmup_step(state: TrainState, batch: PairBatch, objective: Objective) -> Tuple[TrainState, Dict[str, float], SceneEstimate]:
	"""One optimizer step on the oracle losses: albedo L_T, lighting cross-entropy and normal MSE."""
	if batch.normal_label is None or batch.albedo_labels is None or batch.albedo_masks is None:
		raise MissingLabelsError("warm-up batch carries no oracle labels")
	model, ab = state.model, state.cfg.ablation
	model.train()
	est = model(batch.image1, batch.image2, batch.mask, pair_lights(model, batch, state.cfg))
	valid = batch.mask * (batch.normal_label.abs().sum(dim=1, keepdim=True) > 0).to(batch.mask.dtype)
	loss_n = loss_normal(est.normal, batch.normal_label, valid)
	loss_a = objective.image(batch.albedo_labels[0], est.albedo[0], batch.albedo_masks[0]) \
		+ objective.image(batch.albedo_labels[1], est.albedo[1], batch.albedo_masks[1])
	loss_l = loss_n.new_zeros(())
	if ab.le:
		loss_l = loss_lighting_ce(est.logits[0].theta, est.logits[0].phi, batch.bins1) \
			+ loss_lighting_ce(est.logits[1].theta, est.logits[1].phi, batch.bins2)
	warm = loss_n + loss_a + loss_l
	total = warm
	metrics = {"loss_warmup": warm.item(), "loss_recon": None, "loss_relight": None}
	if state.cfg.warmup_with_recon:
		recon, relight = _reconstruction_losses(est, batch, objective, ab.ir)
		total = total + recon + relight
		metrics.update(loss_recon=recon.item(), loss_relight=relight.item())
	_optimize(state, total)
	metrics["loss_total"] = total.item()
	return state, metrics, est


def train_step(state: TrainState, batch: PairBatch, objective: Objective) -> Tuple[TrainState, Dict[str, float], SceneEstimate]:
	"""One self-supervised step: reconstruction of both images plus relighting of image 1."""
	model, ab = state.model, state.cfg.ablation.validate()
	model.train()
	est = model(batch.image1, batch.image2, batch.mask, pair_lights(model, batch, state.cfg))
	recon, relight = _reconstruction_losses(est, batch, objective, ab.ir)
	total = recon + relight
	metrics = {"loss_recon": recon.item(), "loss_relight": relight.item() if ab.ir else None}
	if ab.mode == "frontal":
		# image 1 sits in the frontal bin, whose light is known
		aux = loss_lighting_ce(est.logits[0].theta, est.logits[0].phi, batch.bins1)
		total = total + aux
		metrics["loss_aux_lighting"] = aux.item()
	elif ab.mode == "supervised":
		if batch.gt_normal is None or batch.gt_albedo is None:
			raise MissingLabelsError("fully supervised step without ground-truth labels")
		sup = loss_normal(est.normal, batch.gt_normal, batch.mask) \
			+ objective.image(batch.gt_albedo[0], est.albedo_refined[0], batch.mask) \
			+ objective.image(batch.gt_albedo[1], est.albedo_refined[1], batch.mask)
		if ab.le:
			sup = sup + loss_lighting_ce(est.logits[0].theta, est.logits[0].phi, batch.bins1) \
				+ loss_lighting_ce(est.logits[1].theta, est.logits[1].phi, batch.bins2)
		total = total + sup
		metrics["loss_supervised"] = sup.item()
	_optimize(state, total)
	metrics["loss_total"] = total.item()
	return state, metrics, est


def grad_norms(model: PS2Net) -> Dict[str, float]:
	"""L2 norm of the current gradients per module group (0 when no gradient)."""
	out = {}
	for name, module in model.module_groups().items():
		sq = 0.0
		for p in module.parameters():
			if p.grad is not None:
				sq += float(p.grad.detach().pow(2).sum())
		out[name] = math.sqrt(sq)
	return out


def batch_mae(normal: torch.Tensor, reference: torch.Tensor, mask: torch.Tensor) -> float:
	with torch.no_grad():
		dot = (normal * reference).sum(dim=1, keepdim=True).clamp(-1.0, 1.0)
		err = torch.rad2deg(torch.acos(dot))
		m = mask * (reference.abs().sum(dim=1, keepdim=True) > 0).to(mask.dtype)
		return float((err * m).sum() / m.sum().clamp_min(1.0))


# orchestration

def _check_dataset(captures: Sequence[ObjectCapture], cfg: PS2Config, lightspace: LightSpace) -> None:
	if not captures:
		raise EmptyDatasetError("training needs at least one capture")
	for c in captures:
		if cfg.mode == "supervised" and (c.ground_truth is None or c.ground_truth.albedo is None):
			raise MissingLabelsError(f"capture {c.name} lacks the ground truth required by supervised mode")
		if cfg.mode == "frontal" and lightspace.frontal_bin not in set(c.bins(lightspace)):
			raise InsufficientDiversityError(f"capture {c.name} has no frontally lit image")


def make_batch(captures: Sequence[ObjectCapture], cfg: PS2Config, rng: np.random.Generator, device,
		oracles: Optional[Sequence[WeakOracle]] = None) -> PairBatch:
	lightspace = LightSpace(cfg.bins_per_axis)
	frontal = cfg.mode == "frontal"
	pairs, chosen = [], []
	for _ in range(cfg.batch_size):
		k = int(rng.integers(len(captures)))
		candidates = oracles[k].indices if oracles is not None else None
		use_frontal = frontal and oracles is None
		pairs.extend(sample_pairs(captures[k], 1, rng, lightspace, frontal=use_frontal, candidates=candidates))
		chosen.append(k)
	supervision = [captures[k].ground_truth for k in chosen] if cfg.mode == "supervised" and oracles is None else None
	gts = [captures[k].ground_truth for k in chosen]
	eval_normals = [gt.normals for gt in gts] if all(gt is not None for gt in gts) else None
	return collate_pairs(
		pairs, device,
		oracles=[oracles[k] for k in chosen] if oracles is not None else None,
		supervision=supervision,
		eval_normals=eval_normals,
	)


def run(cfg: PS2Config, captures: Sequence[ObjectCapture], out_dir: str, resume_from: Optional[str] = None,
		stop_after_warmup: bool = False) -> Tuple[TrainState, List[Dict]]:
	"""Train on captures; writes a checkpoint per epoch and metrics.jsonl into out_dir."""
	cfg.ablation.validate()
	lightspace = LightSpace(cfg.bins_per_axis)
	_check_dataset(captures, cfg, lightspace)
	configure_determinism()
	os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)

	prepared = [prepare_capture(c, cfg.res, cfg.crop_to_object) for c in captures]
	oracles = None
	if cfg.warmup and cfg.warmup_iters > 0:
		oracle_rng = np.random.default_rng([cfg.seed, 0xA11])
		oracles = [build_weak_oracle(c, cfg, oracle_rng) for c in prepared]
		logger.info(f"Built warm-up oracles for {len(oracles)} capture(s)")

	state = resume_state(cfg, resume_from) if resume_from else build_state(cfg)
	objective = Objective.from_config(cfg).to(state.device)
	end = cfg.warmup_iters if stop_after_warmup else cfg.total_iters
	metrics_path = os.path.join(out_dir, "metrics.jsonl")
	history: List[Dict] = []
	logger.train_event(state.iteration, f"start: {len(prepared)} capture(s), {end} iterations, mode={cfg.mode}")

	t_epoch = time.perf_counter()
	with open(metrics_path, "a", encoding="utf-8") as log:
		while state.iteration < end:
			it, epoch = state.iteration, state.epoch
			rng = step_rng(cfg, it)
			torch.manual_seed(cfg.seed * 1_000_003 + it)
			lr = lr_at(epoch, cfg)
			set_lr(state.optimizer, lr)
			warming = state.in_warmup() and oracles is not None
			batch = make_batch(prepared, cfg, rng, state.device, oracles if warming else None)
			if warming:
				state, metrics, est = warmup_step(state, batch, objective)
			else:
				if it == cfg.warmup_iters and cfg.warmup:
					logger.train_event(it, "warm-up finished, switching to self-supervised losses")
				state, metrics, est = train_step(state, batch, objective)
			record = {"iter": it, "epoch": epoch, "lr": lr, **metrics}
			if batch.eval_normal is not None:
				record["mae"] = batch_mae(est.normal.detach(), batch.eval_normal, batch.mask)
			log.write(json.dumps(record) + "\n")
			log.flush()
			history.append(record)

			if state.iteration % cfg.iters_per_epoch == 0 or state.iteration == end:
				done_epoch = (state.iteration - 1) // cfg.iters_per_epoch + 1
				name = "warmup.pt" if stop_after_warmup and state.iteration == end else f"epoch_{done_epoch:03d}.pt"
				save_checkpoint(os.path.join(out_dir, "checkpoints", name), state.model, cfg,
					state.iteration, done_epoch, state.optimizer)
				logger.performance(f"epoch {done_epoch}", (time.perf_counter() - t_epoch) * 1000.0)
				logger.train_event(state.iteration, f"epoch {done_epoch} loss_total={record['loss_total']:.5f} lr={lr:.2e}")
				t_epoch = time.perf_counter()
	return state, history


def run_warmup(cfg: PS2Config, captures: Sequence[ObjectCapture], out_dir: str) -> Tuple[TrainState, List[Dict]]:
	if not cfg.warmup or cfg.warmup_iters == 0:
		raise MissingLabelsError("warm-up is disabled in this configuration")
	return run(cfg, captures, out_dir, stop_after_warmup=True)

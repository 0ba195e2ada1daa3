import argparse
import hashlib
import json
import os
import sys
import time
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch

from . import __version__
from .config import CALIBRATED_LIGHTS, MODES, PS2Config, load_config
from .db import finish_run, init_db, insert_evaluation, insert_run, query_evaluations, query_runs
from .errors import ConfigError, PS2Error
from .lightspace import LightBin, LightSpace
from .logger import logger


def _print_rows(rows) -> None:
	if not rows:
		print("<empty>")
		return
	cols = rows[0].keys()
	print("\t".join(cols))
	for r in rows:
		print("\t".join(str(r[c]) if r[c] is not None else "" for c in cols))


# run manifest

def _sha256(path: str) -> str:
	h = hashlib.sha256()
	with open(path, "rb") as f:
		for block in iter(lambda: f.read(1 << 20), b""):
			h.update(block)
	return h.hexdigest()


def hash_inputs(paths: Sequence[str]) -> Dict[str, str]:
	"""SHA-256 of every input file; directories are walked in sorted order."""
	out = {}
	for path in paths:
		if os.path.isdir(path):
			for root, dirs, files in os.walk(path):
				dirs.sort()
				for name in sorted(files):
					full = os.path.join(root, name)
					out[full] = _sha256(full)
		elif os.path.exists(path):
			out[path] = _sha256(path)
	return out


def write_manifest(out_dir: str, command: str, cfg: Optional[PS2Config], seed: Optional[int],
		inputs: Sequence[str] = (), extra: Optional[Dict[str, Any]] = None) -> str:
	os.makedirs(out_dir, exist_ok=True)
	manifest = {
		"tool": "ps2kit",
		"version": __version__,
		"command": command,
		"seed": seed,
		"deterministic": os.environ.get("PS2KIT_DETERMINISTIC", "") == "1",
		"config": cfg.to_dict() if cfg is not None else None,
		"inputs": hash_inputs(inputs),
		"created": int(time.time()),
	}
	if extra:
		manifest.update(extra)
	path = os.path.join(out_dir, "manifest.json")
	with open(path, "w", encoding="utf-8") as f:
		json.dump(manifest, f, indent=2)
	return path


# argument parsing

def _common(p: argparse.ArgumentParser, config_file: bool = True) -> None:
	p.add_argument("--seed", type=int, default=None, help="Random seed")
	p.add_argument("--res", type=int, default=None, help="Working resolution (multiple of 32)")
	p.add_argument("--out", required=True, help="Output directory")
	if config_file:
		p.add_argument("--config", default=None, help="YAML config file")
	p.add_argument("--device", default=None, help="torch device, e.g. cpu or cuda")


def _training_flags(p: argparse.ArgumentParser) -> None:
	p.add_argument("data", nargs="+", help="Capture directories (synthetic scene or DiLiGenT layout)")
	p.add_argument("--no-le", action="store_true", help="Disable lighting estimation")
	p.add_argument("--no-ar", action="store_true", help="Disable albedo refinement")
	p.add_argument("--no-pe", action="store_true", help="Disable positional encoding")
	p.add_argument("--no-ir", action="store_true", help="Disable image relighting")
	p.add_argument("--no-warmup", action="store_true", help="Skip the weakly supervised warm-up")
	p.add_argument("--mode", choices=MODES, default=None)
	p.add_argument("--calibrated-light", choices=CALIBRATED_LIGHTS, default=None,
		help="Light fed to the network in calibrated mode")
	p.add_argument("--epochs", type=int, default=None)
	p.add_argument("--iters-per-epoch", type=int, default=None)
	p.add_argument("--batch-size", type=int, default=None)
	p.add_argument("--warmup-iters", type=int, default=None)
	p.add_argument("--width-scale", type=float, default=None)
	p.add_argument("--lr", type=float, default=None, help="Initial learning rate")
	p.add_argument("--warmup-with-recon", action="store_true", help="Add reconstruction losses during warm-up")
	p.add_argument("--no-pretrained", action="store_true", help="Use a randomly initialized perceptual extractor")
	p.add_argument("--resume", default=None, help="Checkpoint to resume from")


def build_parser() -> argparse.ArgumentParser:
	parser = argparse.ArgumentParser(prog="ps2kit", description="Two-image photometric stereo toolkit")
	parser.add_argument("--version", action="version", version=f"ps2kit {__version__}")
	sub = parser.add_subparsers(dest="cmd", required=True)

	p_render = sub.add_parser("render-synth", help="Render a synthetic scene under every bin-center light")
	_common(p_render)
	p_render.add_argument("--shape", choices=("sphere", "heightfield"), default="sphere")
	p_render.add_argument("--albedo", choices=("uniform", "textured"), default=None)
	p_render.add_argument("--ks", type=float, default=0.0, help="Specular strength")
	p_render.add_argument("--alpha", type=float, default=20.0, help="Specular shininess")
	p_render.add_argument("--noise", type=float, default=0.0, help="Gaussian noise sigma")

	p_warm = sub.add_parser("warmup", help="Run only the weakly supervised warm-up")
	_common(p_warm)
	_training_flags(p_warm)

	p_train = sub.add_parser("train", help="Train on one or more captures")
	_common(p_train)
	_training_flags(p_train)

	p_eval = sub.add_parser("eval", help="Evaluate a checkpoint and write report.json and panels")
	_common(p_eval, config_file=False)
	p_eval.add_argument("data", nargs="+")
	p_eval.add_argument("--checkpoint", required=True)
	p_eval.add_argument("--pairs", type=int, default=None, help="Pairs per object")

	p_infer = sub.add_parser("infer", help="Estimate normals, albedo and lighting for one image pair")
	_common(p_infer, config_file=False)
	p_infer.add_argument("data")
	p_infer.add_argument("--checkpoint", required=True)
	p_infer.add_argument("--pair", type=int, nargs=2, metavar=("I", "J"), default=(0, 1))

	p_relight = sub.add_parser("relight", help="Relight one image towards a target light bin")
	_common(p_relight, config_file=False)
	p_relight.add_argument("data")
	p_relight.add_argument("--checkpoint", required=True)
	p_relight.add_argument("--index", type=int, default=0)
	p_relight.add_argument("--target-bin", type=int, nargs=2, metavar=("R", "C"), required=True,
		help="Elevation and azimuth bin indices")

	p_runs = sub.add_parser("runs", help="List recorded runs")
	p_runs.add_argument("--limit", type=int, default=50)
	p_runs.add_argument("--evaluations", action="store_true", help="List evaluation rows instead")
	return parser


def overrides_from_args(args) -> Dict[str, Any]:
	over = {
		"seed": args.seed,
		"res": args.res,
		"device": args.device,
	}
	if hasattr(args, "no_le"):
		over.update({
			"le": False if args.no_le else None,
			"ar": False if args.no_ar else None,
			"pe": False if args.no_pe else None,
			"ir": False if args.no_ir else None,
			"warmup": False if args.no_warmup else None,
			"mode": args.mode,
			"calibrated_light": args.calibrated_light,
			"epochs": args.epochs,
			"iters_per_epoch": args.iters_per_epoch,
			"batch_size": args.batch_size,
			"warmup_iters": args.warmup_iters,
			"width_scale": args.width_scale,
			"lr0": args.lr,
			"warmup_with_recon": True if args.warmup_with_recon else None,
			"perceptual_pretrained": False if args.no_pretrained else None,
		})
	return {k: v for k, v in over.items() if v is not None}


# subcommands

def cmd_render_synth(args, cfg: PS2Config) -> int:
	from .photometry import make_scene, render_all_bins, save_scene

	if args.ks < 0 or args.alpha < 1 or args.noise < 0:
		raise ConfigError("--ks and --noise must be >= 0 and --alpha >= 1")
	write_manifest(args.out, "render-synth", cfg, cfg.seed, extra={"scene": {
		"shape": args.shape, "albedo": args.albedo, "ks": args.ks, "alpha": args.alpha, "noise": args.noise,
	}})
	kwargs = {"res": cfg.res, "ks": args.ks, "alpha": args.alpha, "sigma": args.noise, "seed": cfg.seed}
	if args.albedo:
		kwargs["albedo"] = args.albedo
	scene = make_scene(args.shape, **kwargs)
	renders = render_all_bins(scene, LightSpace(cfg.bins_per_axis), seed=cfg.seed)
	save_scene(scene, renders, args.out)
	print(f"Rendered {len(renders)} images of a {args.shape} to {args.out}")
	return 0


def _load_captures(paths: Sequence[str]) -> List:
	from .datasets import load_capture

	return [load_capture(p) for p in paths]


def cmd_train(args, cfg: PS2Config, warmup_only: bool = False) -> int:
	from .trainer import run, run_warmup

	write_manifest(args.out, "warmup" if warmup_only else "train", cfg, cfg.seed, inputs=list(args.data))
	captures = _load_captures(args.data)
	t0 = time.perf_counter()
	if warmup_only:
		state, history = run_warmup(cfg, captures, args.out)
	else:
		state, history = run(cfg, captures, args.out, resume_from=args.resume)
	logger.performance("train" if not warmup_only else "warmup", (time.perf_counter() - t0) * 1000.0)
	last = history[-1]["loss_total"] if history else None
	print(f"Finished at iteration {state.iteration}; last loss {last}; checkpoints in {os.path.join(args.out, 'checkpoints')}")
	return 0


def cmd_eval(args, run_id: int) -> int:
	from .checkpoint import checkpoint_config
	from .evaluation import emit_report

	over = overrides_from_args(args)
	cfg = checkpoint_config(args.checkpoint, over)
	write_manifest(args.out, "eval", cfg, cfg.seed, inputs=[args.checkpoint, *args.data],
		extra={"checkpoint": args.checkpoint, "pairs": args.pairs})
	captures = _load_captures(args.data)
	reports = emit_report(args.checkpoint, captures, args.out, n_pairs=args.pairs, seed=cfg.seed,
		device=args.device or "cpu", overrides=over)
	for r in reports:
		insert_evaluation(run_id, r.object, r.mae_mean, r.mae_std, r.ssim_recon, r.ssim_relight, r.bin_acc, r.n_pairs)
		mae = f"{r.mae_mean:.2f} +- {r.mae_std:.2f}" if r.mae_mean is not None else "n/a"
		print(f"{r.object}\tmae={mae}\tssim_recon={r.ssim_recon:.4f}\tssim_relight={r.ssim_relight}\tbin_acc={r.bin_acc}")
	return 0


def _pair_tensors(model, cfg: PS2Config, data: str, i: int, j: int, device: str):
	from .datasets import make_pair, prepare_capture
	from .trainer import collate_pairs

	capture = _load_captures([data])[0]
	n = len(capture.images)
	for k in (i, j):
		if not 0 <= k < n:
			raise ConfigError(f"image index {k} out of range for {n} images")
	prepared = prepare_capture(capture, cfg.res, cfg.crop_to_object)
	pair = make_pair(prepared, i, j, LightSpace(cfg.bins_per_axis))
	return pair, collate_pairs([pair], device)


def cmd_infer(args) -> int:
	from .checkpoint import load_model
	from .datasets import write_image
	from .evaluation import estimate, to_numpy_image, write_normal_png, write_normals_f32
	from .trainer import pair_lights

	device = args.device or "cpu"
	model, cfg, _ = load_model(args.checkpoint, device, overrides_from_args(args))
	write_manifest(args.out, "infer", cfg, cfg.seed, inputs=[args.checkpoint, args.data],
		extra={"pair": list(args.pair)})
	pair, batch = _pair_tensors(model, cfg, args.data, args.pair[0], args.pair[1], device)
	est = estimate(model, batch.image1, batch.image2, batch.mask, lights=pair_lights(model, batch, cfg))[0]
	normal = to_numpy_image(est.normal[0])
	write_normal_png(os.path.join(args.out, "normal.png"), normal)
	write_normals_f32(os.path.join(args.out, "normal.f32"), normal)
	for i in range(2):
		write_image(os.path.join(args.out, f"albedo{i + 1}.png"), to_numpy_image(est.albedo_refined[i][0]), bits=8)
		write_image(os.path.join(args.out, f"reconstruction{i + 1}.png"), to_numpy_image(est.reconstruction[i][0]), bits=8)
	lighting = {"true_bins": [[pair.bin1.el_idx, pair.bin1.az_idx], [pair.bin2.el_idx, pair.bin2.az_idx]]}
	if est.logits is not None:
		lighting["predicted_bins"] = [est.logits[i].argmax_bins()[0].tolist() for i in range(2)]
	if est.lights is not None:
		key = "calibrated_lights" if cfg.ablation.calibrated else "predicted_lights"
		lighting[key] = [est.lights[i][0].tolist() for i in range(2)]
	with open(os.path.join(args.out, "lighting.json"), "w", encoding="utf-8") as f:
		json.dump(lighting, f, indent=2)
	print(f"Wrote normals, albedos and lighting for pair {tuple(args.pair)} to {args.out}")
	return 0


def cmd_relight(args) -> int:
	from .checkpoint import load_model
	from .datasets import write_image
	from .evaluation import relight_to_bin, to_numpy_image

	device = args.device or "cpu"
	model, cfg, _ = load_model(args.checkpoint, device, overrides_from_args(args))
	n = cfg.bins_per_axis
	el, az = args.target_bin
	if not (0 <= el < n and 0 <= az < n):
		raise ConfigError(f"--target-bin {el} {az} outside [0, {n - 1}]")
	if not cfg.ir:
		raise ConfigError("checkpoint was trained without the relighting branch")
	write_manifest(args.out, "relight", cfg, cfg.seed, inputs=[args.checkpoint, args.data],
		extra={"index": args.index, "target_bin": [el, az]})
	pair, batch = _pair_tensors(model, cfg, args.data, args.index, args.index, device)
	relit = relight_to_bin(model, batch.image1, batch.mask, LightBin(el, az))
	write_image(os.path.join(args.out, "source.png"), pair.image1, bits=8)
	write_image(os.path.join(args.out, "relit.png"), to_numpy_image(relit[0]), bits=8)
	print(f"Relit image {args.index} from bin ({pair.bin1.el_idx}, {pair.bin1.az_idx}) to ({el}, {az})")
	return 0


def main(argv=None) -> int:
	argv = argv if argv is not None else sys.argv[1:]
	parser = build_parser()
	args = parser.parse_args(argv)
	init_db()

	if args.cmd == "runs":
		_print_rows(query_evaluations(limit=args.limit) if args.evaluations else query_runs(limit=args.limit))
		return 0

	run_id = insert_run(args.cmd, args.seed, getattr(args, "out", None))
	try:
		if args.cmd in ("render-synth", "warmup", "train"):
			cfg = load_config(args.config, overrides_from_args(args))
			torch.manual_seed(cfg.seed)
			np.random.seed(cfg.seed)
			if args.cmd == "render-synth":
				code = cmd_render_synth(args, cfg)
			else:
				code = cmd_train(args, cfg, warmup_only=args.cmd == "warmup")
		elif args.cmd == "eval":
			code = cmd_eval(args, run_id)
		elif args.cmd == "infer":
			code = cmd_infer(args)
		elif args.cmd == "relight":
			code = cmd_relight(args)
		else:
			code = 1
	except ConfigError as e:
		logger.error(f"{args.cmd}: {e}")
		finish_run(run_id, "usage-error", str(e))
		print(f"ps2kit {args.cmd}: {e}", file=sys.stderr)
		return 2
	except (PS2Error, OSError) as e:
		logger.error(f"{args.cmd} failed: {e}")
		finish_run(run_id, "failed", str(e))
		print(f"ps2kit {args.cmd} failed: {e}", file=sys.stderr)
		return 1
	except (Exception, KeyboardInterrupt) as e:
		logger.error(f"{args.cmd} aborted: {type(e).__name__}: {e}")
		finish_run(run_id, "failed", f"{type(e).__name__}: {e}")
		raise
	finish_run(run_id, "ok" if code == 0 else "failed")
	return code


if __name__ == "__main__":
	sys.exit(main())

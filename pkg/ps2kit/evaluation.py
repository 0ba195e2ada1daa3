"""Metrics (MAE, SSIM, bin accuracy), report emission and visual panels."""

import json
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .config import PS2Config
from .datasets import ObjectCapture, decode_normal_png16, encode_normal_png16, prepare_capture, sample_pairs, write_image
from .errors import EmptyMaskError, FormatError, ShapeError
from .geometry import angular_error_deg
from .lightspace import LightBin, LightSpace
from .logger import logger
from .networks import PS2Net, SceneEstimate

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MAE_THRESHOLDS = (11.25, 22.5, 30.0)


# metrics

def mae(normals: np.ndarray, reference: np.ndarray, mask: np.ndarray) -> float:
    """Mean angular error in degrees over masked pixels."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("cannot compute MAE over an empty mask")
    return float(angular_error_deg(normals[mask], reference[mask]).mean())


def angular_errors(normals: np.ndarray, reference: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return angular_error_deg(normals[mask], reference[mask])


def ssim_window() -> int:
    return 2 * int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5) + 1


def ssim_map(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Per-pixel single-scale SSIM of two single-channel images (Gaussian window)."""
    x = x.astype(np.float64)
    y = y.astype(np.float64)
    blur = lambda a: gaussian_filter(a, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")
    ux, uy = blur(x), blur(y)
    vx = blur(x * x) - ux * ux
    vy = blur(y * y) - uy * uy
    vxy = blur(x * y) - ux * uy
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    return ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))


def ssim(x: np.ndarray, x_hat: np.ndarray, mask: Optional[np.ndarray] = None, data_range: float = 1.0) -> float:
    """Single-scale SSIM averaged over masked window centers and channels.

    Window centers closer to the border than half a window are skipped.
    """
    if x.shape != x_hat.shape:
        raise ShapeError(f"ssim inputs differ in shape: {x.shape} vs {x_hat.shape}")
    win = ssim_window()
    if min(x.shape[:2]) < win:
        raise ShapeError(f"images of {x.shape[0]}x{x.shape[1]} are smaller than the {win}x{win} SSIM window")
    pad = (win - 1) // 2
    valid = np.zeros(x.shape[:2], dtype=bool)
    valid[pad:x.shape[0] - pad, pad:x.shape[1] - pad] = True
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise EmptyMaskError("no SSIM window center lies inside the mask")
    n_channels = 1 if x.ndim == 2 else x.shape[-1]
    scores = []
    for c in range(n_channels):
        xc = x if x.ndim == 2 else x[..., c]
        yc = x_hat if x_hat.ndim == 2 else x_hat[..., c]
        scores.append(float(ssim_map(xc, yc, data_range)[valid].mean()))
    return float(np.mean(scores))


def bin_accuracy(predictions: Sequence[LightBin], truths: Sequence[LightBin]) -> Dict[str, float]:
    """Exact-bin accuracy plus per-axis accuracies."""
    if len(predictions) != len(truths):
        raise ShapeError(f"{len(predictions)} predictions for {len(truths)} truths")
    if not truths:
        raise ShapeError("bin accuracy needs at least one prediction")
    n = float(len(truths))
    return {
        "exact": sum(p == t for p, t in zip(predictions, truths)) / n,
        "azimuth": sum(p.az_idx == t.az_idx for p, t in zip(predictions, truths)) / n,
        "elevation": sum(p.el_idx == t.el_idx for p, t in zip(predictions, truths)) / n,
    }


# normal map codec

def normal_to_rgb(normals: np.ndarray) -> np.ndarray:
    return np.clip((normals + 1.0) * 0.5, 0.0, 1.0)


def rgb_to_normal(rgb: np.ndarray) -> np.ndarray:
    return rgb * 2.0 - 1.0


def write_normal_png(path: str, normals: np.ndarray) -> str:
    data = cv2.cvtColor(encode_normal_png16(normals), cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(path, data):
        raise FormatError("cannot write normal map", path)
    return path


def read_normal_png(path: str) -> np.ndarray:
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None or raw.dtype != np.uint16:
        raise FormatError("normal map must be a 16-bit PNG", path)
    return decode_normal_png16(cv2.cvtColor(raw, cv2.COLOR_BGR2RGB))


def write_normals_f32(path: str, normals: np.ndarray) -> str:
    normals.astype("<f4").tofile(path)
    return path


# running the model

def to_numpy_image(t: torch.Tensor) -> np.ndarray:
    """C x H x W tensor -> H x W x C float64 array."""
    return t.detach().cpu().double().permute(1, 2, 0).numpy()


def estimate(model: PS2Net, image1: torch.Tensor, image2: torch.Tensor, mask: torch.Tensor,
             chunk: int = 8, lights: Optional[Tuple[torch.Tensor, torch.Tensor]] = None) -> List[SceneEstimate]:
    """Forward pass in evaluation mode, in chunks; one SceneEstimate per chunk.

    `lights` are the per-pair capture lights used by calibrated models.
    """
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, image1.shape[0], chunk):
            sl = slice(start, start + chunk)
            given = (lights[0][sl], lights[1][sl]) if lights is not None else None
            out.append(model(image1[sl], image2[sl], mask[sl], given))
    return out


def relight_to_bin(model: PS2Net, image: torch.Tensor, mask: torch.Tensor, target: LightBin) -> torch.Tensor:
    """Relight B x 3 x H x W images to the center direction of a target bin."""
    light = torch.as_tensor(model.lightspace.center_direction(target), dtype=image.dtype, device=image.device)
    model.eval()
    with torch.no_grad():
        return model.relight(image, light.expand(image.shape[0], 3), mask)


def shading_map(normal: np.ndarray, light: np.ndarray) -> np.ndarray:
    return np.clip(np.tensordot(normal, light, axes=([-1], [0])), 0.0, None)


@dataclass
class PairResult:
    index1: int
    index2: int
    mae: Optional[float]
    ssim_recon: float
    ssim_relight: Optional[float]
    predicted_bins: Optional[Tuple[LightBin, LightBin]]
    true_bins: Tuple[LightBin, LightBin]


@dataclass
class EvalReport:
    object: str
    n_pairs: int
    mae_mean: Optional[float]
    mae_std: Optional[float]
    ssim_recon: float
    ssim_relight: Optional[float]
    bin_acc: Optional[float]
    config: Dict
    mae_per_pair: List[float] = field(default_factory=list)
    mae_median: Optional[float] = None
    mae_under: Dict[str, float] = field(default_factory=dict)
    bin_acc_azimuth: Optional[float] = None
    bin_acc_elevation: Optional[float] = None
    ssim_variant: str = "single-scale"
    mae_std_over: str = "pairs"

    def to_dict(self) -> Dict:
        return asdict(self)


def evaluate_capture(model: PS2Net, cfg: PS2Config, capture: ObjectCapture, n_pairs: int, seed: int,
                     device="cpu") -> Tuple[EvalReport, Dict[str, np.ndarray]]:
    """Score n_pairs random pairs of one capture; returns the report and panel tiles for the first pair."""
    from .trainer import collate_pairs, pair_lights

    lightspace = LightSpace(cfg.bins_per_axis)
    prepared = prepare_capture(capture, cfg.res, cfg.crop_to_object)
    pairs = sample_pairs(prepared, n_pairs, seed, lightspace)
    batch = collate_pairs(pairs, device)
    chunks = estimate(model, batch.image1, batch.image2, batch.mask, lights=pair_lights(model, batch, cfg))
    gt = prepared.ground_truth
    mask = prepared.mask

    results: List[PairResult] = []
    errors_all = []
    k = 0
    first: Optional[Tuple[SceneEstimate, int]] = None
    for est in chunks:
        for j in range(est.normal.shape[0]):
            pair = pairs[k]
            normal = to_numpy_image(est.normal[j])
            pair_mae = None
            if gt is not None:
                err = angular_errors(normal, gt.normals, mask)
                errors_all.append(err)
                pair_mae = float(err.mean()) if err.size else None
            recon = [to_numpy_image(est.reconstruction[i][j]) for i in range(2)]
            s_recon = 0.5 * (ssim(pair.image1, recon[0], mask) + ssim(pair.image2, recon[1], mask))
            s_relight = ssim(pair.image1, to_numpy_image(est.relit[j]), mask) if est.relit is not None else None
            predicted = None
            if est.logits is not None:
                predicted = tuple(
                    LightBin(int(b[0]), int(b[1])) for b in (est.logits[i].argmax_bins()[j].tolist() for i in range(2))
                )
            results.append(PairResult(pair.index1, pair.index2, pair_mae, s_recon, s_relight, predicted, (pair.bin1, pair.bin2)))
            if first is None:
                first = (est, j)
            k += 1

    maes = [r.mae for r in results if r.mae is not None]
    report = EvalReport(
        object=capture.name,
        n_pairs=len(results),
        mae_mean=float(np.mean(maes)) if maes else None,
        mae_std=float(np.std(maes)) if maes else None,
        ssim_recon=float(np.mean([r.ssim_recon for r in results])),
        ssim_relight=float(np.mean([r.ssim_relight for r in results])) if cfg.ir else None,
        bin_acc=None,
        config=cfg.to_dict(),
        mae_per_pair=maes,
    )
    if errors_all:
        pooled = np.concatenate(errors_all)
        report.mae_median = float(np.median(pooled))
        report.mae_under = {f"{t:g}": float((pooled < t).mean()) for t in MAE_THRESHOLDS}
    if cfg.le:
        preds = [p for r in results for p in r.predicted_bins]
        truths = [t for r in results for t in r.true_bins]
        acc = bin_accuracy(preds, truths)
        report.bin_acc = acc["exact"]
        report.bin_acc_azimuth = acc["azimuth"]
        report.bin_acc_elevation = acc["elevation"]

    est, j = first
    tiles = panel_tiles(est, j, pairs[0], gt.normals if gt is not None else None)
    return report, tiles


def panel_tiles(est: SceneEstimate, j: int, pair, gt_normals: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    normal = to_numpy_image(est.normal[j])
    mask = pair.mask[..., None]
    tiles = {
        "image1": pair.image1,
        "image2": pair.image2,
        "normal": normal_to_rgb(normal) * mask,
        "albedo1": to_numpy_image(est.albedo_refined[0][j]),
        "albedo2": to_numpy_image(est.albedo_refined[1][j]),
    }
    if est.lights is not None:
        light = est.lights[0][j].detach().cpu().double().numpy()
        tiles["shading1"] = np.repeat(shading_map(normal, light)[..., None], 3, axis=-1) * mask
    tiles["recon1"] = to_numpy_image(est.reconstruction[0][j])
    if est.relit is not None:
        tiles["relit1"] = to_numpy_image(est.relit[j])
    if gt_normals is not None:
        tiles["normal_gt"] = normal_to_rgb(gt_normals) * mask
    return tiles


def compose_panel(tiles: Dict[str, np.ndarray], gap: int = 2) -> np.ndarray:
    """Lay tiles out left to right on a white background."""
    items = list(tiles.values())
    h = max(t.shape[0] for t in items)
    w = sum(t.shape[1] for t in items) + gap * (len(items) - 1)
    canvas = np.ones((h, w, 3))
    x = 0
    for t in items:
        canvas[:t.shape[0], x:x + t.shape[1]] = np.clip(t, 0.0, 1.0)
        x += t.shape[1] + gap
    return canvas


def emit_report(checkpoint: str, captures: Sequence[ObjectCapture], out_dir: str, n_pairs: Optional[int] = None,
                seed: Optional[int] = None, device: str = "cpu",
                overrides: Optional[Dict] = None) -> List[EvalReport]:
    """Evaluate a checkpoint on captures; writes report.json and panel_<object>.png into out_dir."""
    from .checkpoint import load_model

    model, cfg, _ = load_model(checkpoint, device, overrides)
    n_pairs = n_pairs or cfg.pairs_per_object
    seed = cfg.seed if seed is None else seed
    os.makedirs(out_dir, exist_ok=True)

    reports = []
    for capture in captures:
        t0 = time.perf_counter()
        report, tiles = evaluate_capture(model, cfg, capture, n_pairs, seed, device)
        write_image(os.path.join(out_dir, f"panel_{capture.name}.png"), compose_panel(tiles), bits=8)
        reports.append(report)
        logger.performance(f"evaluate {capture.name}", (time.perf_counter() - t0) * 1000.0)
        logger.info(f"Evaluated {capture.name}: mae={report.mae_mean} ssim_recon={report.ssim_recon:.4f} bin_acc={report.bin_acc}")

    payload = reports[0].to_dict() if len(reports) == 1 else [r.to_dict() for r in reports]
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
    return reports

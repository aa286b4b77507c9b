"""Sliding-window prediction, candidate extraction and per-detection atypia calls."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .datapipe import MITOSIS, tile_region
from .evaluation import HIT_RADIUS_UM, Detection
from .network import MitosisNet, to_tensor

ATYPIA_THRESHOLD = 0.590


@dataclass
class ProbMap:
    probs: np.ndarray  # (H, W, 4) float32
    coverage: np.ndarray  # (H, W) int32

    @property
    def mitosis(self) -> np.ndarray:
        return self.probs[..., MITOSIS]


def sliding_predict(model: MitosisNet, region: np.ndarray, window: int = 256, overlap: float = 0.5,
                    batch_size: int = 8) -> ProbMap:
    """Average softmax probabilities over overlapping windows (uniform weights)."""
    h, w = region.shape[:2]
    grid = tile_region(w, h, window, overlap)
    acc = np.zeros((h, w, 4), dtype=np.float64)
    cov = np.zeros((h, w), dtype=np.int32)
    model.eval()
    origins = list(grid.origins)
    with torch.no_grad():
        for k in range(0, len(origins), batch_size):
            chunk = origins[k:k + batch_size]
            tiles = np.stack([region[y:y + window, x:x + window] for x, y in chunk])
            probs = torch.softmax(model.segment(to_tensor(tiles)), dim=1).numpy()
            for (x, y), p in zip(chunk, probs):
                acc[y:y + window, x:x + window] += p.transpose(1, 2, 0)
                cov[y:y + window, x:x + window] += 1
    probs = (acc / cov[..., None]).astype(np.float32)
    return ProbMap(probs, cov)


def extract_candidates(prob: ProbMap, spacing_um: float, min_area: int = 30, score_floor: float = 0.3,
                       merge_radius_um: float = HIT_RADIUS_UM, case_id: str = "") -> list[Detection]:
    """Mitosis-class components -> weighted centroids -> merge close pairs -> score floor."""
    labels_map = np.argmax(prob.probs, axis=-1) == MITOSIS
    comps, n = ndimage.label(labels_map, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return []
    pm = prob.mitosis.astype(np.float64)
    idx = np.arange(1, n + 1)
    areas = ndimage.sum_labels(np.ones_like(pm), comps, idx)
    mass = ndimage.sum_labels(pm, comps, idx)
    yy, xx = np.mgrid[0:pm.shape[0], 0:pm.shape[1]]
    cx = ndimage.sum_labels(pm * (xx + 0.5), comps, idx) / mass
    cy = ndimage.sum_labels(pm * (yy + 0.5), comps, idx) / mass
    score = mass / areas

    cands = [(float(score[k]), float(cx[k]), float(cy[k])) for k in range(n) if areas[k] >= min_area]
    cands.sort(key=lambda c: (-c[0], c[2], c[1]))
    kept: list[tuple[float, float, float]] = []
    r_px = merge_radius_um / spacing_um
    for s, x, y in cands:
        if all(math.hypot(x - kx, y - ky) >= r_px for _, kx, ky in kept):
            kept.append((s, x, y))
    return [Detection(x, y, min(max(s, 0.0), 1.0), case_id) for s, x, y in kept if s >= score_floor]


def crop_patch(region: np.ndarray, x: float, y: float, size: int) -> np.ndarray:
    """``size`` square centred on ``(x, y)``; out-of-bounds pixels are reflected."""
    half = size // 2
    j0 = int(math.floor(x)) - half
    i0 = int(math.floor(y)) - half
    pad = size
    padded = np.pad(region, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    return padded[i0 + pad:i0 + pad + size, j0 + pad:j0 + pad + size]


def atypia_label(prob: float, threshold: float = ATYPIA_THRESHOLD) -> str:
    return "atypical" if prob >= threshold else "normal"


def atypia_probability(model: MitosisNet, patches: np.ndarray, input_size: int | None = None) -> np.ndarray:
    x = to_tensor(patches)
    if input_size is not None and x.shape[-1] != input_size:
        x = F.interpolate(x, size=(input_size, input_size), mode="bilinear", align_corners=False)
    model.eval()
    with torch.no_grad():
        return torch.sigmoid(model(x).cls_logit).numpy()


def classify_detection(model: MitosisNet, region: np.ndarray, det: Detection, patch: int = 128,
                       threshold: float = ATYPIA_THRESHOLD, input_size: int = 128) -> tuple[str, float]:
    crop = crop_patch(region, det.x, det.y, patch)
    p = float(atypia_probability(model, crop[None], input_size)[0])
    return atypia_label(p, threshold), p


def detections_to_json(dets: Sequence[Detection], subtypes: Sequence[tuple[str, float]] | None = None) -> list[dict]:
    out = []
    for k, d in enumerate(dets):
        rec = {"x": d.x, "y": d.y, "score": d.score, "subtype": None, "subtype_prob": None}
        if subtypes is not None:
            rec["subtype"], rec["subtype_prob"] = subtypes[k][0], subtypes[k][1]
        out.append(rec)
    return out


def write_detections(path: str | Path, dets: Sequence[Detection],
                     subtypes: Sequence[tuple[str, float]] | None = None) -> None:
    Path(path).write_text(json.dumps(detections_to_json(dets, subtypes), indent=1), encoding="utf-8")

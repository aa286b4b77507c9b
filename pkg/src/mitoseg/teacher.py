"""Frozen teacher: online nuclei pseudo-masks and replace-on-best weight sync."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .datapipe import HARD_NEGATIVE, IGNORE, MITOSIS, NUCLEUS
from .imaging import PseudoMaskParams, classical_pseudomask
from .network import MissingCheckpoint, MitosisNet, ShapeMismatch, load_checkpoint, param_checksum, to_tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TeacherState:
    model: MitosisNet | None
    source: str
    sync_count: int = 0
    last_sync_metric: float = -math.inf
    conf_threshold: float = 0.7
    pseudo_params: PseudoMaskParams = field(default_factory=PseudoMaskParams)

    @property
    def is_classical(self) -> bool:
        return self.model is None

    def checksum(self) -> str:
        return "classical" if self.model is None else param_checksum(self.model)


def _freeze(model: MitosisNet) -> MitosisNet:
    frozen = copy.deepcopy(model)
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen.eval()


def init_teacher(source: str, checkpoint: str | Path | MitosisNet | None = None, *,
                 conf_threshold: float = 0.7, pseudo_params: PseudoMaskParams | None = None) -> TeacherState:
    """``source`` is ``"warmup_checkpoint"`` (a path or a model) or ``"classical"``."""
    params = pseudo_params or PseudoMaskParams()
    if source == "classical":
        return TeacherState(None, "classical", conf_threshold=conf_threshold, pseudo_params=params)
    if source != "warmup_checkpoint":
        raise ValueError(f"unknown teacher source {source!r}")
    if checkpoint is None:
        raise MissingCheckpoint("warm-up teacher needs a checkpoint")
    if isinstance(checkpoint, MitosisNet):
        model = checkpoint
    else:
        model, _ = load_checkpoint(checkpoint)
    return TeacherState(_freeze(model), "warmup_checkpoint", conf_threshold=conf_threshold, pseudo_params=params)


def labels_from_probs(probs: np.ndarray, conf_threshold: float) -> np.ndarray:
    """``probs`` is ``(N, 4, H, W)``. Argmax over {background, nucleus}; unsure pixels -> 255."""
    bg, nuc = probs[:, 0], probs[:, 1]
    labels = (nuc > bg).astype(np.uint8)
    conf = np.maximum(bg, nuc)
    labels[conf < conf_threshold] = IGNORE
    return labels


def teacher_pseudomask(teacher: TeacherState, batch: np.ndarray) -> np.ndarray:
    """Pseudo-masks for a ``(N, H, W, 3)`` uint8 batch of weak views."""
    batch = np.asarray(batch)
    if batch.ndim == 3:
        batch = batch[None]
    if teacher.model is None:
        return np.stack(
            [classical_pseudomask(img, teacher.pseudo_params).mask.astype(np.uint8) for img in batch]
        )
    model = teacher.model.eval()
    with torch.no_grad():
        probs = torch.softmax(model.segment(to_tensor(batch)), dim=1).numpy()
    return labels_from_probs(probs, teacher.conf_threshold)


def assemble_targets(annotated: np.ndarray, pseudo: np.ndarray) -> np.ndarray:
    """Mitosis > hard negative > pseudo nucleus > pseudo ignore > background."""
    annotated = np.asarray(annotated)
    pseudo = np.asarray(pseudo)
    if annotated.shape != pseudo.shape:
        raise ShapeMismatch(f"annotated {annotated.shape} vs pseudo {pseudo.shape}")
    out = np.zeros(annotated.shape, dtype=np.uint8)
    out[pseudo == IGNORE] = IGNORE
    out[pseudo == NUCLEUS] = NUCLEUS
    out[annotated == IGNORE] = IGNORE
    out[annotated == HARD_NEGATIVE] = HARD_NEGATIVE
    out[annotated == MITOSIS] = MITOSIS
    return out


def maybe_sync(teacher: TeacherState, student: MitosisNet, val_metric: float) -> TeacherState:
    """Copy the student into the teacher on a strictly better validation metric."""
    if not math.isfinite(val_metric):
        raise ValueError("validation metric must be finite")
    if not val_metric > teacher.last_sync_metric:
        return teacher
    logger.info("teacher sync #%d at metric %.4f", teacher.sync_count + 1, val_metric)
    return replace(
        teacher,
        model=_freeze(student),
        source="student",
        sync_count=teacher.sync_count + 1,
        last_sync_metric=float(val_metric),
    )

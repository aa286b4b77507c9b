"""Warm-up, semi-supervised fitting, schedules and early stopping for both tracks."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import losses as L
from .datapipe import (
    MITOSIS,
    AugmentedPair,
    Region,
    make_pair,
    nuclei_targets,
    rasterize_targets,
    rotation_crop_size,
    tile_region,
)
from .evaluation import MatchResult, match_detections, micro_f1, threshold_sweep
from .inference import atypia_probability, crop_patch, extract_candidates, sliding_predict
from .network import MitosisNet, param_checksum, to_tensor
from .teacher import TeacherState, assemble_targets, maybe_sync, teacher_pseudomask

logger = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    def __init__(self, record: dict):
        super().__init__(f"non-finite loss at epoch {record.get('epoch')} step {record.get('step')}")
        self.record = record


@dataclass(frozen=True)
class TrainConfig:
    track: int = 1
    max_epochs: int = 100
    patience: int = 10
    warmup_epochs_nuclei: int = 10
    lr_init: float = 4e-4
    weight_decay: float = 1e-5
    lr_final: float = 1e-6
    lr_warmup_steps: int | None = None  # default: one epoch of steps
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 4
    samples_per_epoch: int = 16
    input_size: int = 256
    source_tile: int = 512
    raster_radius: float = 12.0
    use_dg: bool = True
    cls_patch: int = 128
    min_area: int = 30
    score_floor: float = 0.3
    grad_clip: float | None = 1.0  # global L2 norm; None disables
    seed: int = 0

    def __post_init__(self):
        if self.track not in (1, 2):
            raise ValueError("track must be 1 or 2")
        if not self.lr_final < self.lr_init:
            raise ValueError("lr_final must be below lr_init")
        if not self.patience < self.max_epochs:
            raise ValueError("patience must be below max_epochs")

    @property
    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(self.samples_per_epoch / self.batch_size))

    @property
    def warmup_steps(self) -> int:
        return self.steps_per_epoch if self.lr_warmup_steps is None else self.lr_warmup_steps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in names}
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    losses: dict[str, float]
    val_metric: float
    lr: float
    synced: bool
    sync_count: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"type": "epoch", **asdict(self)}


class MetricsLog:
    """JSON-lines writer; holds records in memory when no path is given."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> lr_init over the warm-up steps, then cosine down to lr_final."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = cfg.warmup_steps
    if warm > 0 and step < warm:
        return cfg.lr_init * step / warm
    span = total_steps - warm
    progress = 1.0 if span <= 0 else (step - warm) / span
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1 + math.cos(math.pi * progress))


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=cfg.lr_init, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay,
    )


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def sample_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


# --------------------------------------------------------------------------- sampling

@dataclass
class SegBatch:
    weak: np.ndarray
    strong: np.ndarray
    annotated: np.ndarray
    points: list[list[tuple[float, float, int]]]
    domains: np.ndarray
    labels: np.ndarray | None = None


def _region_pair(region: Region, seed: int, cfg: TrainConfig, nuclei_only: bool = False) -> AugmentedPair:
    h, w = region.image.shape[:2]
    tile = min(cfg.source_tile, h, w)
    grid = tile_region(w, h, tile, 0.5)
    rng = np.random.default_rng(seed)
    x0, y0 = grid.origins[int(rng.integers(len(grid.origins)))]
    patch = region.image[y0:y0 + tile, x0:x0 + tile]
    if nuclei_only:
        mask = nuclei_targets(region.mask[y0:y0 + tile, x0:x0 + tile])
        points = []
    else:
        mask = rasterize_targets(region.annotations, (x0, y0), tile, cfg.raster_radius)
        points = [(a.x - x0, a.y - y0, MITOSIS) for a in region.annotations if a.kind == "mitosis"]
    return make_pair(patch, mask, seed, points=points, out_size=cfg.input_size)


def _balanced_picks(by_domain: dict[int, list], n: int, rng: np.random.Generator) -> list:
    doms = sorted(by_domain)
    start = int(rng.integers(len(doms)))
    picks = []
    for k in range(n):
        items = by_domain[doms[(start + k) % len(doms)]]
        picks.append(items[int(rng.integers(len(items)))])
    return picks


def segmentation_batches(regions: Sequence[Region], cfg: TrainConfig, epoch: int, domain_index: dict[int, int],
                         nuclei_only: bool = False, phase: int = 0):
    """Yield augmented batches for one epoch; domains are visited round-robin."""
    by_domain: dict[int, list[Region]] = {}
    for r in regions:
        by_domain.setdefault(r.domain_id, []).append(r)
    rng = np.random.default_rng(sample_seed(cfg.seed, 11, phase, epoch))
    picks = _balanced_picks(by_domain, cfg.steps_per_epoch * cfg.batch_size, rng)
    for step in range(cfg.steps_per_epoch):
        chunk = picks[step * cfg.batch_size:(step + 1) * cfg.batch_size]
        pairs = [_region_pair(r, sample_seed(cfg.seed, phase, epoch, step, k), cfg, nuclei_only)
                 for k, r in enumerate(chunk)]
        yield SegBatch(
            weak=np.stack([p.weak for p in pairs]),
            strong=np.stack([p.strong for p in pairs]),
            annotated=np.stack([p.mask for p in pairs]),
            points=[list(p.points) for p in pairs],
            domains=np.array([domain_index.get(r.domain_id, 0) for r in chunk]),
        )


@dataclass
class PatchSample:
    patch: np.ndarray  # square RGB, large enough for rotation cropping
    mask: np.ndarray
    point: tuple[float, float]
    label: int
    case_id: str
    domain_id: int


def mitosis_patches(regions: Sequence[Region], cfg: TrainConfig) -> list[PatchSample]:
    """One patch per subtyped mitosis, centred on it, with reflected borders."""
    size = rotation_crop_size(cfg.cls_patch) + 10
    out = []
    for r in regions:
        for a in r.annotations:
            if a.kind != "mitosis" or a.subtype is None:
                continue
            x0, y0 = math.floor(a.x) - size // 2, math.floor(a.y) - size // 2
            patch = crop_patch(r.image, a.x, a.y, size)
            mask = rasterize_targets(r.annotations, (x0, y0), size, cfg.raster_radius)
            out.append(PatchSample(patch, mask, (a.x - x0, a.y - y0), int(a.subtype == "atypical"),
                                   r.case_id, r.domain_id))
    return out


def _label_balanced_picks(samples: Sequence[PatchSample], n: int, rng: np.random.Generator) -> list:
    """Round-robin over domains; consecutive domain sweeps alternate the label."""
    by_domain: dict[int, list[PatchSample]] = {}
    for s in samples:
        by_domain.setdefault(s.domain_id, []).append(s)
    doms = sorted(by_domain)
    start = int(rng.integers(len(doms)))
    first_label = int(rng.integers(2))
    picks = []
    for k in range(n):
        items = by_domain[doms[(start + k) % len(doms)]]
        want = (first_label + k // len(doms)) % 2
        pool = [s for s in items if s.label == want] or items
        picks.append(pool[int(rng.integers(len(pool)))])
    return picks


def patch_batches(samples: Sequence[PatchSample], cfg: TrainConfig, epoch: int, domain_index: dict[int, int]):
    rng = np.random.default_rng(sample_seed(cfg.seed, 13, epoch))
    picks = _label_balanced_picks(samples, cfg.steps_per_epoch * cfg.batch_size, rng)
    for step in range(cfg.steps_per_epoch):
        chunk = picks[step * cfg.batch_size:(step + 1) * cfg.batch_size]
        pairs = [make_pair(s.patch, s.mask, sample_seed(cfg.seed, epoch, step, k),
                           points=[(*s.point, MITOSIS)], out_size=cfg.cls_patch)
                 for k, s in enumerate(chunk)]
        yield SegBatch(
            weak=np.stack([p.weak for p in pairs]),
            strong=np.stack([p.strong for p in pairs]),
            annotated=np.stack([p.mask for p in pairs]),
            points=[list(p.points) for p in pairs],
            domains=np.array([domain_index.get(s.domain_id, 0) for s in chunk]),
            labels=np.array([s.label for s in chunk]),
        )


# --------------------------------------------------------------------------- steps

def compute_losses(model: MitosisNet, batch: SegBatch, targets: np.ndarray, weights: L.LossWeights,
                   track: int, use_dg: bool, use_points: bool = True) -> L.LossBreakdown:
    x = torch.cat([to_tensor(batch.weak), to_tensor(batch.strong)])
    out = model(x, with_cls=track == 2)
    tgt = torch.from_numpy(np.concatenate([targets, targets]).astype(np.int64))
    seg = out.seg_logits
    n = len(batch.weak)
    parts = {
        "ce": L.ce_loss(seg, tgt),
        "focal": L.focal_loss(seg, tgt, weights.focal_gamma),
        "adice": L.adaptive_dice_loss(torch.softmax(seg, dim=1), tgt, weights.dice_epsilon),
    }
    if use_points:
        pts = [[p for p in pp if p[2] == MITOSIS] for pp in batch.points]
        parts["point_ce"] = L.point_ce_loss(seg, pts + pts)
    if use_dg:
        parts["cont"] = L.contrastive_loss(out.embedding[:n], out.embedding[n:], weights.contrastive_tau)
        dom = torch.from_numpy(np.concatenate([batch.domains, batch.domains]))
        parts["domain"] = L.domain_loss(out.domain_logits, dom)
    if track == 2 and batch.labels is not None:
        lab = torch.from_numpy(np.concatenate([batch.labels, batch.labels]))
        parts["cls"] = L.cls_loss(out.cls_logit, lab, weights.focal_gamma, weights.cls_bce, weights.cls_focal)
    return L.combine(parts, weights, track)


def _step_record(epoch: int, step: int, lr: float, br: L.LossBreakdown) -> dict:
    return {"type": "step", "epoch": epoch, "step": step, "lr": lr, "losses": br.as_floats()}


def _mean_losses(rows: list[dict[str, float]]) -> dict[str, float]:
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]} if rows else {}


def _optimize(model, opt, br: L.LossBreakdown, record: dict, log: MetricsLog,
              grad_clip: float | None = None) -> None:
    total = br.total
    if not torch.isfinite(total):
        record = {**record, "type": "nonfinite", "losses": br.as_floats()}
        log.write(record)
        raise NonFiniteLoss(record)
    opt.zero_grad(set_to_none=True)
    total.backward()
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    opt.step()


# --------------------------------------------------------------------------- validation

def detection_results(model: MitosisNet, regions: Sequence[Region], cfg: TrainConfig) -> list[MatchResult]:
    results = []
    for r in regions:
        prob = sliding_predict(model, r.image, window=cfg.input_size, overlap=0.5)
        dets = extract_candidates(prob, r.spacing_um, cfg.min_area, cfg.score_floor, case_id=r.case_id)
        results.append(match_detections(dets, r.mitosis_points(), r.spacing_um, case_id=r.case_id))
    return results


def validate_detection(model: MitosisNet, regions: Sequence[Region], cfg: TrainConfig) -> float:
    return micro_f1(detection_results(model, regions, cfg)).f1


def patch_scores(model: MitosisNet, samples: Sequence[PatchSample], cfg: TrainConfig) -> np.ndarray:
    if not samples:
        return np.zeros(0)
    size = cfg.cls_patch
    crops = []
    for s in samples:
        x0 = int(math.floor(s.point[0])) - size // 2
        y0 = int(math.floor(s.point[1])) - size // 2
        crops.append(s.patch[y0:y0 + size, x0:x0 + size])
    return np.concatenate([atypia_probability(model, np.stack(crops[k:k + 16]))
                           for k in range(0, len(crops), 16)])


def validate_classification(model: MitosisNet, samples: Sequence[PatchSample], cfg: TrainConfig) -> float:
    labels = np.array([s.label for s in samples])
    _, ba, _ = threshold_sweep(patch_scores(model, samples, cfg), labels)
    return float(ba)


# --------------------------------------------------------------------------- loops

def run_warmup(model: MitosisNet, nuclei_data: Sequence[Region], cfg: TrainConfig,
               log: MetricsLog | None = None) -> MitosisNet:
    """Nuclei-only warm-up: segmentation losses, no DG, no teacher, no point CE."""
    log = log or MetricsLog()
    weights = L.LossWeights.for_track(cfg.track)
    opt = make_optimizer(model, cfg)
    total_steps = cfg.warmup_epochs_nuclei * cfg.steps_per_epoch
    step = 0
    model.train()
    for epoch in range(1, cfg.warmup_epochs_nuclei + 1):
        rows = []
        for k, batch in enumerate(segmentation_batches(nuclei_data, cfg, epoch, {}, nuclei_only=True, phase=1)):
            lr = lr_at(step, total_steps, cfg)
            _set_lr(opt, lr)
            br = compute_losses(model, batch, batch.annotated, weights, cfg.track, use_dg=False, use_points=False)
            _optimize(model, opt, br, {"phase": "warmup", "epoch": epoch, "step": k}, log, cfg.grad_clip)
            rows.append(br.as_floats())
            step += 1
        log.write({"type": "warmup_epoch", "epoch": epoch, "losses": _mean_losses(rows)})
    return model.eval()


@dataclass
class FitData:
    train: Sequence[Region] = ()
    val: Sequence[Region] = ()
    train_patches: Sequence[PatchSample] = ()
    val_patches: Sequence[PatchSample] = ()


def fit(model: MitosisNet, teacher: TeacherState, data: FitData, cfg: TrainConfig,
        weights: L.LossWeights | None = None, log: MetricsLog | None = None,
        validate: Callable[[MitosisNet, int], float] | None = None,
        on_best: Callable[[MitosisNet, EpochRecord], None] | None = None):
    """Train the student against the frozen teacher with early stopping.

    Returns ``(best_model, records, teacher)``. ``validate(model, epoch)``
    overrides the per-track validation metric.
    """
    log = log or MetricsLog()
    weights = weights or L.LossWeights.for_track(cfg.track)
    if cfg.track == 1:
        domains = sorted({r.domain_id for r in data.train})
    else:
        domains = sorted({s.domain_id for s in data.train_patches})
    domain_index = {d: k for k, d in enumerate(domains)}
    if validate is None:
        if cfg.track == 1:
            def validate(m, _e):
                return validate_detection(m, data.val, cfg)
        else:
            def validate(m, _e):
                return validate_classification(m, data.val_patches, cfg)

    opt = make_optimizer(model, cfg)
    total_steps = cfg.max_epochs * cfg.steps_per_epoch
    step = 0
    best_metric, best_state, stale = -math.inf, None, 0
    records: list[EpochRecord] = []

    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        rows = []
        if cfg.track == 1:
            batches = segmentation_batches(data.train, cfg, epoch, domain_index)
        else:
            batches = patch_batches(data.train_patches, cfg, epoch, domain_index)
        for k, batch in enumerate(batches):
            lr = lr_at(step, total_steps, cfg)
            _set_lr(opt, lr)
            pseudo = teacher_pseudomask(teacher, batch.weak)
            targets = assemble_targets(batch.annotated, pseudo)
            br = compute_losses(model, batch, targets, weights, cfg.track, cfg.use_dg)
            _optimize(model, opt, br, {"phase": "fit", "epoch": epoch, "step": k}, log, cfg.grad_clip)
            floats = br.as_floats()
            rows.append(floats)
            log.write(_step_record(epoch, k, lr, br))
            step += 1

        model.eval()
        metric = float(validate(model, epoch))
        before = teacher.sync_count
        teacher = maybe_sync(teacher, model, metric)
        synced = teacher.sync_count != before
        if synced:
            log.write({"type": "sync", "epoch": epoch, "metric": metric, "sync_count": teacher.sync_count})
        rec = EpochRecord(epoch, _mean_losses(rows), metric, lr, synced, teacher.sync_count)
        records.append(rec)
        log.write(rec.to_json())

        if metric > best_metric:
            best_metric, stale = metric, 0
            best_state = copy.deepcopy(model.state_dict())
            if on_best is not None:
                on_best(model, rec)
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info("early stop at epoch %d (best %.4f)", epoch, best_metric)
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    return model.eval(), records, teacher


def student_checksum(model: MitosisNet) -> str:
    return param_checksum(model)

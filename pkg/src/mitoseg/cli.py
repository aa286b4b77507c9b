"""Command-line entry point: ``mitoseg {synth,pseudomask,tile,train,eval,infer,report}``.

Every command reads and writes UTF-8 JSON. ``train`` echoes the fully
resolved configuration into the run directory so a run can be repeated from
``config.json`` alone. The ``MITO_SEED`` environment variable overrides the
configured seed.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from . import __version__
from .datapipe import (
    SynthConfig,
    TooFewCases,
    load_dataset,
    nuclei_targets,
    render_case,
    split_patients,
    tile_region,
    write_dataset,
)
from .evaluation import (
    SingleClass,
    balanced_accuracy,
    detection_report,
    match_detections,
    pr_curve,
    threshold_sweep,
)
from .imaging import PseudoMaskParams, classical_pseudomask
from .inference import (
    ATYPIA_THRESHOLD,
    classify_detection,
    extract_candidates,
    sliding_predict,
    write_detections,
)
from .losses import LossWeights
from .network import MissingCheckpoint, NetConfig, build, load_checkpoint, save_checkpoint
from .teacher import init_teacher
from .training import (
    FitData,
    MetricsLog,
    NonFiniteLoss,
    TrainConfig,
    fit,
    mitosis_patches,
    patch_scores,
    run_warmup,
)

logger = logging.getLogger("mitoseg")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
SPLITS = ("train", "val", "test", "held_out")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- config

def _read_json(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return data


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _section(cls, data: dict | None, name: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    if "betas" in data:
        data["betas"] = tuple(data["betas"])
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


def env_seed(default: int) -> int:
    raw = os.environ.get("MITO_SEED")
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"MITO_SEED must be an integer, got {raw!r}") from exc


@dataclass
class RunConfig:
    """Everything a training run needs; serialised in full to ``config.json``."""

    dataset: str
    track: int = 1
    seed: int = 0
    nuclei_dataset: str | None = None  # default: nuclei masks of the training cases
    held_out_domains: list[int] = field(default_factory=list)
    test_pct: int = 15
    val_pct: int = 20
    teacher_source: str | None = None  # default: warm-up checkpoint (Track 1), classical (Track 2)
    conf_threshold: float = 0.7
    train: TrainConfig = field(default_factory=TrainConfig)
    net: NetConfig = field(default_factory=NetConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    pseudomask: PseudoMaskParams = field(default_factory=PseudoMaskParams)

    @classmethod
    def from_dict(cls, data: dict, track: int | None = None, base_dir: Path | None = None) -> "RunConfig":
        data = dict(data)
        top = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - top)
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
        if "dataset" not in data:
            raise ConfigError("config needs a 'dataset' path")
        track = int(track if track is not None else data.get("track", 1))
        if track not in (1, 2):
            raise ConfigError(f"track must be 1 or 2, got {track}")
        seed = env_seed(int(data.get("seed", 0)))

        train = _section(TrainConfig, {**data.get("train", {}), "track": track, "seed": seed}, "train")
        net = _section(NetConfig, data.get("net"), "net")
        try:
            loss = LossWeights.for_track(track, **(data.get("loss") or {}))
        except TypeError as exc:
            raise ConfigError(f"invalid 'loss' section: {exc}") from exc
        pm = _section(PseudoMaskParams, data.get("pseudomask"), "pseudomask")

        source = data.get("teacher_source") or ("warmup_checkpoint" if track == 1 else "classical")
        if source not in ("warmup_checkpoint", "classical"):
            raise ConfigError(f"unknown teacher_source {source!r}")

        def resolve(p):
            if p is None:
                return None
            p = Path(p)
            return str(p if p.is_absolute() or base_dir is None else (base_dir / p).resolve())

        return cls(
            dataset=resolve(data["dataset"]), track=track, seed=seed,
            nuclei_dataset=resolve(data.get("nuclei_dataset")),
            held_out_domains=[int(d) for d in data.get("held_out_domains", [])],
            test_pct=int(data.get("test_pct", 15)), val_pct=int(data.get("val_pct", 20)),
            teacher_source=source, conf_threshold=float(data.get("conf_threshold", 0.7)),
            train=train, net=net, loss=loss, pseudomask=pm,
        )

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["train"] = self.train.to_dict()
        for name in ("net", "loss", "pseudomask"):
            out[name] = asdict(getattr(self, name))
        return out


# --------------------------------------------------------------------------- synth / pseudomask / tile

def _render(args):
    cfg, index = args
    return render_case(cfg, index)


def _pool_map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def cmd_synth(args) -> int:
    data = _read_json(args.config) if args.config else {}
    data["seed"] = env_seed(int(data.get("seed", 0)))
    try:
        cfg = SynthConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synth config: {exc}") from exc
    regions = _pool_map(_render, [(cfg, i) for i in range(cfg.n_cases)], args.jobs)
    out = write_dataset(regions, args.out, cfg)
    print(json.dumps({"dataset": str(out), "n_cases": len(regions)}))
    return EXIT_OK


def _image_files(root: Path) -> list[Path]:
    src = root / "images" if (root / "images").is_dir() else root
    return sorted(p for p in src.iterdir() if p.suffix.lower() in (".png", ".tif", ".tiff", ".jpg", ".jpeg"))


def _load_rgb(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, UnidentifiedImageError) as exc:
        raise ConfigError(f"cannot read image {path}: {exc}") from exc


def _pseudomask_one(args):
    path, params = args
    res = classical_pseudomask(_load_rgb(path), params)
    return path, res.mask, res.warning, res.threshold


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def cmd_pseudomask(args) -> int:
    root = Path(args.input)
    if not root.is_dir():
        raise ConfigError(f"input directory not found: {root}")
    files = _image_files(root)
    if not files:
        raise ConfigError(f"no images under {root}")
    params = _section(PseudoMaskParams, _read_json(args.config) if args.config else {}, "pseudomask")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"params": asdict(params), "images": {}}
    ious = []
    for path, mask, warning, threshold in _pool_map(_pseudomask_one, [(f, params) for f in files], args.jobs):
        Image.fromarray(mask.astype(np.uint8) * 255).save(out / f"{path.stem}.png")
        rec = {"foreground_fraction": float(mask.mean()), "warning": warning, "threshold": threshold}
        truth = root / "masks" / f"{path.stem}.png"
        if truth.exists():
            gt = nuclei_targets(np.asarray(Image.open(truth)))
            rec["iou"] = _iou(mask, gt == 1)
            ious.append(rec["iou"])
        summary["images"][path.stem] = rec
    if ious:
        summary["mean_iou"] = float(np.mean(ious))
    _write_json(out / "summary.json", summary)
    print(json.dumps({k: v for k, v in summary.items() if k != "images"}))
    return EXIT_OK


def cmd_tile(args) -> int:
    image = None
    if args.image:
        image = _load_rgb(Path(args.image))
        height, width = image.shape[:2]
    elif args.width and args.height:
        width, height = args.width, args.height
    else:
        raise ConfigError("tile needs --image or both --width and --height")
    try:
        grid = tile_region(width, height, args.tile_size, args.overlap)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cov = grid.coverage()
    rec = {"width": width, "height": height, "tile_size": grid.tile_size, "stride": grid.stride,
           "origins": [list(o) for o in grid.origins], "coverage_min": int(cov.min()),
           "coverage_max": int(cov.max())}
    if args.write:
        if image is None:
            raise ConfigError("--write needs --image")
        out = Path(args.write)
        out.mkdir(parents=True, exist_ok=True)
        for x, y in grid.origins:
            Image.fromarray(image[y:y + grid.tile_size, x:x + grid.tile_size]).save(out / f"tile_{x}_{y}.png")
    text = json.dumps(rec)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


# --------------------------------------------------------------------------- train

def make_splits(regions, cfg: RunConfig) -> dict:
    held = set(cfg.held_out_domains)
    pool = [r.case_id for r in regions if r.domain_id not in held]
    try:
        spec = split_patients(pool, cfg.seed, cfg.test_pct, cfg.val_pct)
    except TooFewCases as exc:
        raise ConfigError(str(exc)) from exc
    out = spec.to_dict()
    out["held_out"] = sorted(r.case_id for r in regions if r.domain_id in held)
    return out


def _select(regions, ids):
    ids = set(ids)
    return [r for r in regions if r.case_id in ids]


def _load_dataset(path: str | Path):
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise ConfigError(f"no dataset at {p} (manifest.json missing)")
    return load_dataset(p)


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    cfg = RunConfig.from_dict(_read_json(cfg_path), track=args.track, base_dir=cfg_path.parent)
    torch.set_num_threads(max(1, args.jobs))
    run = Path(args.out)
    (run / "checkpoints").mkdir(parents=True, exist_ok=True)
    regions = _load_dataset(cfg.dataset)

    splits = make_splits(regions, cfg)
    train, val = _select(regions, splits["train"]), _select(regions, splits["val"])
    domains = sorted({r.domain_id for r in train})
    net = replace(cfg.net, n_domains=max(1, len(domains)))
    cfg = replace(cfg, net=net)
    _write_json(run / "config.json", cfg.to_dict())
    _write_json(run / "train.json", cfg.train.to_dict())
    _write_json(run / "splits.json", splits)

    log = MetricsLog(run / "metrics.jsonl")
    model = build(cfg.net, cfg.seed)

    def save_best(m, rec):
        save_checkpoint(m, run / "checkpoints" / "best.npz",
                        {"epoch": rec.epoch, "val_metric": rec.val_metric, "track": cfg.track})

    try:
        if cfg.track == 1:
            nuclei = _load_dataset(cfg.nuclei_dataset) if cfg.nuclei_dataset else train
            if any(r.mask is None for r in nuclei):
                raise ConfigError("nuclei warm-up needs masks for every region")
            model = run_warmup(model, nuclei, cfg.train, log)
            save_checkpoint(model, run / "checkpoints" / "warmup.npz", {"phase": "warmup"})
            data = FitData(train=train, val=val)
        else:
            data = FitData(train_patches=mitosis_patches(train, cfg.train),
                           val_patches=mitosis_patches(val, cfg.train))
            labels = {s.label for s in data.val_patches}
            if not data.train_patches or labels != {0, 1}:
                raise ConfigError("Track 2 needs subtyped mitoses of both classes in train and val")
        if cfg.teacher_source == "classical":
            teacher = init_teacher("classical", conf_threshold=cfg.conf_threshold, pseudo_params=cfg.pseudomask)
        else:
            teacher = init_teacher("warmup_checkpoint", run / "checkpoints" / "warmup.npz",
                                   conf_threshold=cfg.conf_threshold, pseudo_params=cfg.pseudomask)
        best, records, teacher = fit(model, teacher, data, cfg.train, cfg.loss, log, on_best=save_best)
    except NonFiniteLoss as exc:
        print(f"error: {exc}; diagnostic record: {json.dumps(exc.record, sort_keys=True)}", file=sys.stderr)
        return EXIT_NUMERIC

    best_rec = max(records, key=lambda r: r.val_metric)
    summary = {"epochs_run": len(records), "best_epoch": best_rec.epoch, "best_val_metric": best_rec.val_metric,
               "sync_count": teacher.sync_count, "track": cfg.track}
    _write_json(run / "train_summary.json", summary)
    print(json.dumps(summary))
    return EXIT_OK


# --------------------------------------------------------------------------- eval / infer / report

def _load_run(run: Path):
    if not (run / "config.json").exists():
        raise ConfigError(f"{run} is not a run directory (config.json missing)")
    cfg = RunConfig.from_dict(json.loads((run / "config.json").read_text(encoding="utf-8")))
    ckpt = run / "checkpoints" / "best.npz"
    try:
        model, extra = load_checkpoint(ckpt)
    except MissingCheckpoint as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, model, extra


def summary_table(pooled: dict, per_domain: dict) -> dict:
    """Rows F1 / Precision / Recall, columns ``overall`` then each domain."""
    cols = {"overall": pooled, **{f"D{d}": rep for d, rep in per_domain.items()}}
    return {
        "columns": list(cols),
        "F1": [cols[c]["f1"] for c in cols],
        "Precision": [cols[c]["precision"] for c in cols],
        "Recall": [cols[c]["recall"] for c in cols],
    }


def evaluate_detection(model, regions, cfg: TrainConfig):
    results, dets_by_case = [], []
    for r in regions:
        prob = sliding_predict(model, r.image, window=cfg.input_size, overlap=0.5)
        dets = extract_candidates(prob, r.spacing_um, cfg.min_area, cfg.score_floor, case_id=r.case_id)
        dets_by_case.append(dets)
        results.append(match_detections(dets, r.mitosis_points(), r.spacing_um, case_id=r.case_id))
    report = detection_report(results, {r.case_id: r.domain_id for r in regions})
    report["table"] = summary_table(report["pooled"], report["per_domain"])
    return report, dets_by_case


def evaluate_classification(model, regions, cfg: TrainConfig) -> dict:
    samples = mitosis_patches(regions, cfg)
    labels = np.array([s.label for s in samples])
    scores = patch_scores(model, samples, cfg)
    try:
        t, ba, curve = threshold_sweep(scores, labels)
    except SingleClass as exc:
        raise ConfigError(f"classification eval needs both classes: {exc}") from exc
    best = balanced_accuracy(scores, labels, t)
    fixed = balanced_accuracy(scores, labels, ATYPIA_THRESHOLD)
    return {
        "n": int(len(labels)), "n_atypical": int(labels.sum()),
        "classification": {
            "threshold": best.threshold, "sensitivity": best.sensitivity, "specificity": best.specificity,
            "ba": best.balanced_accuracy, "curve": [list(c) for c in curve],
        },
        "fixed_threshold": {
            "threshold": ATYPIA_THRESHOLD, "sensitivity": fixed.sensitivity,
            "specificity": fixed.specificity, "ba": fixed.balanced_accuracy,
        },
    }


def _plot_curve(path: Path, xs, ys, xlabel: str, ylabel: str, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(xs, ys, marker=".")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_eval(args) -> int:
    run = Path(args.run)
    cfg, model, extra = _load_run(run)
    track = args.track or cfg.track
    torch.set_num_threads(max(1, args.jobs))
    if not (run / "splits.json").exists():
        raise ConfigError(f"{run} has no splits.json")
    splits = json.loads((run / "splits.json").read_text(encoding="utf-8"))
    regions = _select(_load_dataset(cfg.dataset), splits.get(args.split, []))
    if not regions:
        raise ConfigError(f"split {args.split!r} is empty")
    out = Path(args.out) if args.out else run / "eval" / args.split
    out.mkdir(parents=True, exist_ok=True)
    tcfg = replace(cfg.train, track=track)

    report = {"track": track, "split": args.split, "checkpoint_epoch": extra.get("epoch")}
    if track == 1:
        det, dets_by_case = evaluate_detection(model, regions, tcfg)
        report.update(det)
        if args.plots:
            curve = pr_curve(dets_by_case, [r.mitosis_points() for r in regions], regions[0].spacing_um)
            _plot_curve(out / "pr_curve.png", [c[2] for c in curve], [c[1] for c in curve],
                        "recall", "precision", f"PR ({args.split})")
    else:
        report.update(evaluate_classification(model, regions, tcfg))
        if args.plots:
            curve = report["classification"]["curve"]
            _plot_curve(out / "ba_curve.png", [c[0] for c in curve], [c[1] for c in curve],
                        "threshold", "balanced accuracy", f"BA sweep ({args.split})")
    _write_json(out / "report.json", report)
    head = report.get("pooled") or report.get("classification")
    print(json.dumps({k: v for k, v in head.items() if k != "curve"}))
    return EXIT_OK


def cmd_infer(args) -> int:
    run = Path(args.run)
    cfg, model, _ = _load_run(run)
    torch.set_num_threads(max(1, args.jobs))
    image = _load_rgb(Path(args.image))
    tcfg = cfg.train
    if min(image.shape[:2]) < tcfg.input_size:
        raise ConfigError(f"image smaller than the {tcfg.input_size}px model window")
    prob = sliding_predict(model, image, window=tcfg.input_size, overlap=0.5)
    dets = extract_candidates(prob, args.spacing, tcfg.min_area, tcfg.score_floor,
                              case_id=Path(args.image).stem)
    subtypes = None
    if cfg.track == 2:
        subtypes = [classify_detection(model, image, d, tcfg.cls_patch, args.threshold, tcfg.cls_patch)
                    for d in dets]
    out = Path(args.out) if args.out else Path(args.image).with_suffix(".detections.json")
    write_detections(out, dets, subtypes)
    print(json.dumps({"detections": len(dets), "out": str(out)}))
    return EXIT_OK


def read_metrics(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cmd_report(args) -> int:
    rows = []
    for run in map(Path, args.runs):
        if not (run / "metrics.jsonl").exists():
            raise ConfigError(f"{run} has no metrics.jsonl")
        recs = read_metrics(run / "metrics.jsonl")
        epochs = [r for r in recs if r["type"] == "epoch"]
        row = {"run": str(run), "epochs_run": len(epochs),
               "sync_count": epochs[-1]["sync_count"] if epochs else 0}
        if epochs:
            best = max(epochs, key=lambda r: r["val_metric"])
            row.update(best_epoch=best["epoch"], best_val_metric=best["val_metric"],
                       final_loss=epochs[-1]["losses"].get("total"))
        for rep in sorted((run / "eval").glob("*/report.json")):
            data = json.loads(rep.read_text(encoding="utf-8"))
            key = rep.parent.name
            if "pooled" in data:
                row[f"{key}_f1"] = data["pooled"]["f1"]
            if "classification" in data:
                row[f"{key}_ba"] = data["classification"]["ba"]
                row[f"{key}_ba_fixed"] = data["fixed_threshold"]["ba"]
        if args.plots and epochs:
            _plot_curve(run / "val_curve.png", [e["epoch"] / len(epochs) for e in epochs],
                        [e["val_metric"] for e in epochs], "epoch (fraction of run)", "validation metric",
                        run.name)
        rows.append(row)
    text = json.dumps({"runs": rows}, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mitoseg", description="Mitosis detection and atypia classification pipeline.")
    p.add_argument("--version", action="version", version=f"mitoseg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def jobs(sp):
        sp.add_argument("--jobs", type=int, default=1, help="worker processes / torch threads")

    s = sub.add_parser("synth", help="render a synthetic multi-domain dataset")
    s.add_argument("--config", help="SynthConfig JSON (defaults when omitted)")
    s.add_argument("--out", required=True)
    jobs(s)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("pseudomask", help="classical nuclei pseudo-masks for a directory of images")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="PseudoMaskParams JSON")
    jobs(s)
    s.set_defaults(fn=cmd_pseudomask)

    s = sub.add_parser("tile", help="tile grid for a region")
    s.add_argument("--image")
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--tile-size", type=int, default=512)
    s.add_argument("--overlap", type=float, default=0.5)
    s.add_argument("--write", help="directory for tile PNGs (needs --image)")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_tile)

    s = sub.add_parser("train", help="warm-up (Track 1) and semi-supervised fit")
    s.add_argument("--config", required=True)
    s.add_argument("--track", type=int, choices=(1, 2))
    s.add_argument("--out", required=True, help="run directory")
    jobs(s)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="score a run's best checkpoint on a split")
    s.add_argument("--run", required=True)
    s.add_argument("--split", choices=SPLITS, default="test")
    s.add_argument("--track", type=int, choices=(1, 2))
    s.add_argument("--out")
    s.add_argument("--plots", action="store_true", help="write PR / BA curve PNGs")
    jobs(s)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("infer", help="detections JSON for one image")
    s.add_argument("--run", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out")
    s.add_argument("--spacing", type=float, default=0.5, help="microns per pixel")
    s.add_argument("--threshold", type=float, default=ATYPIA_THRESHOLD)
    jobs(s)
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("report", help="summarise one or more run directories")
    s.add_argument("runs", nargs="+")
    s.add_argument("--out")
    s.add_argument("--plots", action="store_true")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

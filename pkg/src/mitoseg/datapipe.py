"""Tiling, target rasterization, augmentation pairs, splits and synthetic data.

Coordinates are continuous with pixel ``(row i, col j)`` centred at
``(x=j+0.5, y=i+0.5)``; annotation ``(x, y)`` values use the same frame.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .imaging import (
    REFERENCE_STAINS,
    InsufficientTissue,
    StainDegenerate,
    estimate_stain_matrix,
    gaussian_blur,
    rgb_to_od,
)

BACKGROUND, NUCLEUS, MITOSIS, HARD_NEGATIVE, IGNORE = 0, 1, 2, 3, 255
KINDS = ("mitosis", "hard_negative")
SUBTYPES = ("normal", "atypical")


class RegionTooSmall(ValueError):
    pass


class PatchTooSmall(ValueError):
    pass


class TooFewCases(ValueError):
    pass


@dataclass(frozen=True)
class Annotation:
    x: float
    y: float
    kind: str
    case_id: str = ""
    domain_id: int = 0
    subtype: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown annotation kind {self.kind!r}")
        if self.subtype is not None:
            if self.kind != "mitosis":
                raise ValueError("subtype is only allowed on mitosis annotations")
            if self.subtype not in SUBTYPES:
                raise ValueError(f"unknown subtype {self.subtype!r}")

    def to_dict(self) -> dict:
        return {
            "x": float(self.x),
            "y": float(self.y),
            "kind": self.kind,
            "subtype": self.subtype,
            "case_id": self.case_id,
            "domain_id": int(self.domain_id),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Annotation":
        return cls(
            x=float(d["x"]),
            y=float(d["y"]),
            kind=d["kind"],
            subtype=d.get("subtype"),
            case_id=str(d.get("case_id", "")),
            domain_id=int(d.get("domain_id", 0)),
        )


def save_annotations(anns: Iterable[Annotation], path: str | Path) -> None:
    Path(path).write_text(json.dumps([a.to_dict() for a in anns], indent=1), encoding="utf-8")


def load_annotations(path: str | Path) -> list[Annotation]:
    return [Annotation.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]


# --------------------------------------------------------------------------- tiling

@dataclass(frozen=True)
class TileGrid:
    width: int
    height: int
    tile_size: int
    stride: int
    origins: tuple[tuple[int, int], ...]

    def __len__(self):
        return len(self.origins)

    def coverage(self) -> np.ndarray:
        cov = np.zeros((self.height, self.width), dtype=np.int32)
        for x, y in self.origins:
            cov[y:y + self.tile_size, x:x + self.tile_size] += 1
        return cov


def _axis_origins(length: int, tile: int, stride: int) -> list[int]:
    last = length - tile
    out = {min(k * stride, last) for k in range(last // stride + 2)}
    return sorted(out)


def tile_region(width: int, height: int, tile_size: int = 512, overlap: float = 0.5) -> TileGrid:
    """Row-major tile origins at multiples of the stride, edge tiles clamped inward."""
    if width < tile_size or height < tile_size:
        raise RegionTooSmall(f"region {width}x{height} smaller than tile {tile_size}")
    if not 0 <= overlap < 1:
        raise ValueError("overlap must be in [0, 1)")
    stride = max(1, int(round(tile_size * (1 - overlap))))
    xs = _axis_origins(width, tile_size, stride)
    ys = _axis_origins(height, tile_size, stride)
    origins = tuple((x, y) for y in ys for x in xs)
    return TileGrid(width, height, tile_size, stride, origins)


def rasterize_targets(
    anns: Sequence[Annotation],
    origin: tuple[float, float] = (0, 0),
    size: int | tuple[int, int] = 512,
    radius: float = 12,
) -> np.ndarray:
    """Disks of class 2 (mitosis) and 3 (hard negative); mitosis wins overlaps."""
    if radius <= 0:
        raise ValueError("radius must be > 0")
    w, h = (size, size) if isinstance(size, int) else size
    x0, y0 = origin
    out = np.zeros((h, w), dtype=np.uint8)
    r = float(radius)
    ordered = [a for a in anns if a.kind == "hard_negative"] + [a for a in anns if a.kind == "mitosis"]
    for a in ordered:
        cx, cy = a.x - x0, a.y - y0
        j0, j1 = max(0, int(math.floor(cx - r)) - 1), min(w, int(math.ceil(cx + r)) + 1)
        i0, i1 = max(0, int(math.floor(cy - r)) - 1), min(h, int(math.ceil(cy + r)) + 1)
        if j0 >= j1 or i0 >= i1:
            continue
        yy, xx = np.mgrid[i0:i1, j0:j1]
        inside = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r
        out[i0:i1, j0:j1][inside] = MITOSIS if a.kind == "mitosis" else HARD_NEGATIVE
    return out


# --------------------------------------------------------------------------- augmentation

@dataclass
class AugmentedPair:
    weak: np.ndarray
    strong: np.ndarray
    mask: np.ndarray
    seed: int
    points: list[tuple[float, float, int]] = field(default_factory=list)
    angle: float = 0.0
    crop_origin: tuple[int, int] = (0, 0)
    ops: tuple[str, ...] = ()


def rotation_crop_size(out_size: int) -> int:
    """Smallest square that holds an ``out_size`` square at any rotation."""
    return int(math.ceil(out_size * math.sqrt(2)))


def _stain_jitter(img: np.ndarray, rng: np.random.Generator, amount: float = 0.1) -> np.ndarray:
    od = rgb_to_od(np.clip(np.rint(img), 0, 255).astype(np.uint8))
    try:
        S = estimate_stain_matrix(od)
    except (InsufficientTissue, StainDegenerate):
        S = REFERENCE_STAINS
    flat = od.reshape(-1, 3)
    conc = flat @ np.linalg.pinv(S).T
    resid = flat - conc @ S.T
    factors = 1.0 + rng.uniform(-amount, amount, size=2)
    od2 = (conc * factors) @ S.T + resid
    return (255.0 * np.power(10.0, -od2)).reshape(img.shape)


def photometric(img: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, tuple[str, ...]]:
    """Stain jitter, blur and unsharp masking; at least one is applied."""
    picks = rng.random(3) < 0.5
    if not picks.any():
        picks[rng.integers(3)] = True
    out = img.astype(np.float64)
    ops = []
    if picks[0]:
        out = _stain_jitter(out, rng)
        ops.append("stain_jitter")
    if picks[1]:
        out = gaussian_blur(out, float(rng.uniform(0.0, 1.5)))
        ops.append("blur")
    if picks[2]:
        amount = float(rng.uniform(0.5, 1.5))
        out = out + amount * (out - gaussian_blur(out, 1.0))
        ops.append("sharpen")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8), tuple(ops)


def make_pair(
    patch: np.ndarray,
    mask: np.ndarray,
    seed: int,
    *,
    points: Sequence[tuple[float, float, int]] = (),
    out_size: int = 256,
    angle: float | None = None,
    crop_origin: tuple[int, int] | None = None,
    strong: bool = True,
) -> AugmentedPair:
    """Random crop -> random rotation -> centre crop, then a photometric strong view.

    ``points`` are ``(x, y, class)`` in patch coordinates; those that land in
    the output are returned in output coordinates. ``angle`` and
    ``crop_origin`` override the random draws (the draws still happen, so the
    photometric stream is unchanged).
    """
    crop = rotation_crop_size(out_size)
    h, w = patch.shape[:2]
    if h < crop or w < crop:
        raise PatchTooSmall(f"patch {w}x{h} smaller than {crop}x{crop}")
    if mask.shape[:2] != (h, w):
        raise ValueError("mask and patch shapes differ")

    rng = np.random.default_rng(seed)
    ox = int(rng.integers(0, w - crop + 1))
    oy = int(rng.integers(0, h - crop + 1))
    theta = float(rng.uniform(0.0, 360.0))
    if crop_origin is not None:
        ox, oy = crop_origin
    if angle is not None:
        theta = float(angle)

    off = (crop - out_size) // 2
    half = out_size / 2
    cx, cy = ox + off + half, oy + off + half
    t = math.radians(theta)
    c, s = math.cos(t), math.sin(t)
    if theta % 360 == 0:
        c, s = 1.0, 0.0

    v, u = np.mgrid[0:out_size, 0:out_size].astype(np.float64)
    u = u + 0.5 - half
    v = v + 0.5 - half
    # inverse rotation maps output offsets back to the source
    src_x = cx + c * u + s * v
    src_y = cy - s * u + c * v
    coords = np.stack([src_y - 0.5, src_x - 0.5])

    weak = np.empty((out_size, out_size, 3), dtype=np.uint8)
    for ch in range(3):
        vals = ndimage.map_coordinates(
            patch[..., ch].astype(np.float64), coords, order=1, mode="constant", cval=0.0, prefilter=False
        )
        weak[..., ch] = np.clip(np.rint(vals), 0, 255).astype(np.uint8)
    out_mask = ndimage.map_coordinates(mask, coords, order=0, mode="constant", cval=IGNORE, prefilter=False)
    out_mask = out_mask.astype(np.uint8)

    moved = []
    for px, py, cls in points:
        dx, dy = px - cx, py - cy
        nx = c * dx - s * dy + half
        ny = s * dx + c * dy + half
        if 0 <= nx < out_size and 0 <= ny < out_size:
            moved.append((nx, ny, cls))

    if strong:
        strong_view, ops = photometric(weak, rng)
    else:
        strong_view, ops = weak.copy(), ()
    return AugmentedPair(weak, strong_view, out_mask, seed, moved, theta, (ox, oy), ops)


# --------------------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitSpec:
    train_cases: tuple[str, ...]
    val_cases: tuple[str, ...]
    test_cases: tuple[str, ...]
    seed: int

    def to_dict(self) -> dict:
        return {"train": list(self.train_cases), "val": list(self.val_cases),
                "test": list(self.test_cases), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]), int(d["seed"]))


def _round_half_up(num: int, pct: int) -> int:
    return (num * pct + 50) // 100


def split_patients(case_ids: Sequence[str], seed: int, test_pct: int = 15, val_pct: int = 20) -> SplitSpec:
    """Case-level train/val/test split; percentages rounded half up, at least one case each."""
    ids = sorted(set(case_ids))
    if len(ids) < 5:
        raise TooFewCases(f"need at least 5 cases, got {len(ids)}")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    n_test = max(1, _round_half_up(len(ids), test_pct))
    rest = len(ids) - n_test
    n_val = max(1, _round_half_up(rest, val_pct))
    test = tuple(order[:n_test])
    val = tuple(order[n_test:n_test + n_val])
    train = tuple(order[n_test + n_val:])
    return SplitSpec(train, val, test, seed)


# --------------------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SynthConfig:
    n_cases: int = 40
    n_domains: int = 4
    image_size: int = 512
    spacing_um: float = 0.5
    mitosis_per_image: int = 4
    hard_negative_per_image: int = 3
    nuclei_per_image: int = 25
    atypical_fraction: float = 0.0
    domain_strength: float = 1.0
    rgb_shifts: tuple[tuple[float, float, float], ...] | None = None
    noise: float = 0.015
    seed: int = 0

    def __post_init__(self):
        if self.n_cases < 1:
            raise ValueError("n_cases must be >= 1")
        if self.n_domains < 1:
            raise ValueError("n_domains must be >= 1")
        if self.rgb_shifts is not None and len(self.rgb_shifts) != self.n_domains:
            raise ValueError("rgb_shifts needs one entry per domain")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if d.get("rgb_shifts") is not None:
            d["rgb_shifts"] = tuple(tuple(float(v) for v in s) for s in d["rgb_shifts"])
        return cls(**d)


@dataclass(frozen=True)
class DomainStyle:
    stains: np.ndarray
    intensity: float
    rgb_shift: np.ndarray


@dataclass
class Blob:
    kind: str  # "nucleus", "mitosis", "hard_negative"
    cx: float
    cy: float
    extent: float
    area: float
    subtype: str | None = None


@dataclass
class Region:
    case_id: str
    domain_id: int
    image: np.ndarray
    annotations: list[Annotation]
    spacing_um: float
    mask: np.ndarray | None = None
    instances: np.ndarray | None = None
    blobs: list[Blob] = field(default_factory=list)

    def mitosis_points(self) -> list[tuple[float, float]]:
        return [(a.x, a.y) for a in self.annotations if a.kind == "mitosis"]


def domain_style(cfg: SynthConfig, domain_id: int) -> DomainStyle:
    rng = np.random.default_rng([cfg.seed, 104729, domain_id])
    k = cfg.domain_strength
    S = REFERENCE_STAINS + k * rng.normal(0.0, 0.06, size=(3, 2))
    S = np.clip(S, 0.02, None)
    S = S / np.linalg.norm(S, axis=0)
    intensity = float(np.exp(k * rng.uniform(-0.15, 0.15)))
    if cfg.rgb_shifts is not None:
        shift = np.asarray(cfg.rgb_shifts[domain_id], dtype=np.float64)
    else:
        shift = np.round(k * rng.uniform(-8.0, 8.0, size=3))
    return DomainStyle(S, intensity, shift)


def star_area(radius: float, amp: float, k: int, start: float = 0.0, stop: float = 2 * math.pi) -> float:
    """Area of ``r(phi) = R (1 + amp cos(k phi))`` for ``phi`` in ``[start, stop]``."""

    def prim(p):
        return p + 2 * amp / k * math.sin(k * p) + amp * amp * (p / 2 + math.sin(2 * k * p) / (4 * k))

    return 0.5 * radius * radius * (prim(stop) - prim(start))


def _local_grid(cx, cy, ext, h, w):
    i0, i1 = max(0, int(cy - ext) - 1), min(h, int(cy + ext) + 2)
    j0, j1 = max(0, int(cx - ext) - 1), min(w, int(cx + ext) + 2)
    yy, xx = np.mgrid[i0:i1, j0:j1]
    return (slice(i0, i1), slice(j0, j1)), xx + 0.5 - cx, yy + 0.5 - cy


def _ellipse(dx, dy, a, b, rot):
    c, s = math.cos(rot), math.sin(rot)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _star(dx, dy, R, amp, k, phase, gap=None):
    r = np.hypot(dx, dy)
    phi = np.mod(np.arctan2(dy, dx) - phase, 2 * np.pi)
    inside = r <= R * (1 + amp * np.cos(k * phi))
    if gap is not None:
        inside &= phi <= 2 * np.pi - gap
    return inside


def _sample_shape(kind: str, subtype: str | None, rng: np.random.Generator):
    """Returns (painter(dx, dy) -> bool, extent, analytic area)."""
    if kind == "nucleus":
        a, b = rng.uniform(6.0, 8.5), rng.uniform(5.0, 6.5)
        rot = rng.uniform(0, math.pi)
        return (lambda dx, dy: _ellipse(dx, dy, a, b, rot)), max(a, b), math.pi * a * b
    if kind == "hard_negative":
        a, b = rng.uniform(7.5, 10.0), rng.uniform(6.0, 8.0)
        rot = rng.uniform(0, math.pi)
        return (lambda dx, dy: _ellipse(dx, dy, a, b, rot)), max(a, b), math.pi * a * b
    R = rng.uniform(8.0, 10.0)
    amp = rng.uniform(0.3, 0.4)
    k = int(rng.integers(6, 10))
    phase = rng.uniform(0, 2 * math.pi)
    if subtype != "atypical":
        return (lambda dx, dy: _star(dx, dy, R, amp, k, phase)), R * (1 + amp), star_area(R, amp, k)
    # atypical: star with a missing sector plus a detached fragment on the open side
    gap = rng.uniform(0.6, 0.9) * math.pi
    body = star_area(R, amp, k, 0.0, 2 * math.pi - gap)
    fr = rng.uniform(2.5, 3.5)
    fd = R * (1 + amp) + fr + rng.uniform(2.0, 4.0)
    fphi = phase + 2 * math.pi - gap / 2
    fx, fy = fd * math.cos(fphi), fd * math.sin(fphi)

    def paint(dx, dy):
        return _star(dx, dy, R, amp, k, phase, gap) | ((dx - fx) ** 2 + (dy - fy) ** 2 <= fr * fr)

    return paint, fd + fr, body + math.pi * fr * fr


def _smooth_noise(rng, shape, sigma):
    n = ndimage.gaussian_filter(rng.normal(size=shape), sigma, mode="reflect")
    return n / (n.std() + 1e-12)


def render_case(cfg: SynthConfig, index: int, domain_id: int | None = None,
                style: DomainStyle | None = None) -> Region:
    """Render one synthetic H&E-like region. Content depends only on (seed, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    if domain_id is None:
        domain_id = index % cfg.n_domains
    style = style or domain_style(cfg, domain_id)
    size = cfg.image_size
    case_id = f"case{index:03d}"

    kinds: list[tuple[str, str | None]] = []
    for _ in range(cfg.mitosis_per_image):
        kinds.append(("mitosis", "atypical" if rng.random() < cfg.atypical_fraction else "normal"))
    kinds += [("hard_negative", None)] * cfg.hard_negative_per_image
    kinds += [("nucleus", None)] * cfg.nuclei_per_image

    conc_h = 0.04 + 0.015 * _smooth_noise(rng, (size, size), 8)
    conc_e = 0.30 + 0.06 * _smooth_noise(rng, (size, size), 12)
    instances = np.zeros((size, size), dtype=np.int32)
    blobs: list[Blob] = []
    placed: list[tuple[float, float, float]] = []

    for kind, subtype in kinds:
        paint, ext, area = _sample_shape(kind, subtype, rng)
        margin = ext + 3
        for _ in range(500):
            cx, cy = rng.uniform(margin, size - margin, size=2)
            if all((cx - px) ** 2 + (cy - py) ** 2 > (ext + pe + 4) ** 2 for px, py, pe in placed):
                break
        else:
            if kind != "nucleus":
                raise RuntimeError(f"could not place {kind}; lower the blob counts for this image size")
            continue
        placed.append((cx, cy, ext))
        sl, dx, dy = _local_grid(cx, cy, ext + 1, size, size)
        inside = paint(dx, dy) & (instances[sl] == 0)
        instances[sl][inside] = len(blobs) + 1
        level = {"nucleus": (0.7, 0.08), "hard_negative": (0.85, 0.06), "mitosis": (1.35, 0.06)}[kind]
        conc_h[sl][inside] += rng.normal(*level)
        conc_e[sl][inside] *= 0.5
        blobs.append(Blob(kind, float(cx), float(cy), float(ext), float(area), subtype))

    fg = instances > 0
    conc_h = conc_h + fg * 0.05 * rng.normal(size=(size, size))
    conc_h = ndimage.gaussian_filter(conc_h, 0.6, mode="reflect")
    od = style.intensity * (conc_h[..., None] * style.stains[:, 0] + conc_e[..., None] * style.stains[:, 1])
    od = np.clip(od + rng.normal(0.0, cfg.noise, size=od.shape), 0.0, None)
    rgb = 255.0 * np.power(10.0, -od) + style.rgb_shift
    image = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)

    class_of = np.zeros(len(blobs) + 1, dtype=np.uint8)
    annotations = []
    for n, b in enumerate(blobs, start=1):
        class_of[n] = {"nucleus": NUCLEUS, "mitosis": MITOSIS, "hard_negative": HARD_NEGATIVE}[b.kind]
        if b.kind == "nucleus":
            continue
        ys, xs = np.nonzero(instances == n)
        annotations.append(Annotation(
            x=float(xs.mean() + 0.5), y=float(ys.mean() + 0.5), kind=b.kind,
            subtype=b.subtype if b.kind == "mitosis" else None,
            case_id=case_id, domain_id=domain_id,
        ))
    mask = class_of[instances]
    return Region(case_id, domain_id, image, annotations, cfg.spacing_um, mask, instances, blobs)


def synth_dataset(cfg: SynthConfig) -> list[Region]:
    """Synthetic multi-domain regions; case ``i`` belongs to domain ``i % n_domains``."""
    return [render_case(cfg, i) for i in range(cfg.n_cases)]


def nuclei_targets(mask: np.ndarray) -> np.ndarray:
    """Collapse every nucleus-like class to 1, the layout of a nuclei-only dataset."""
    m = np.asarray(mask)
    out = (m > 0).astype(np.uint8)
    out[m == IGNORE] = IGNORE
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(regions: Sequence[Region], out_dir: str | Path, cfg: SynthConfig | None = None) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    anns = []
    files = []
    for r in regions:
        Image.fromarray(r.image).save(out / "images" / f"{r.case_id}.png")
        files.append(f"images/{r.case_id}.png")
        if r.mask is not None:
            Image.fromarray(r.mask).save(out / "masks" / f"{r.case_id}.png")
            files.append(f"masks/{r.case_id}.png")
        anns.extend(r.annotations)
    save_annotations(anns, out / "annotations.json")
    files.append("annotations.json")
    manifest = {
        "spacing_um": regions[0].spacing_um if regions else None,
        "domains": {r.case_id: r.domain_id for r in regions},
        "seed": cfg.seed if cfg else None,
        "config": asdict(cfg) if cfg else None,
        "files": {f: _sha256(out / f) for f in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return out


def load_dataset(path: str | Path) -> list[Region]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    anns = load_annotations(root / "annotations.json")
    by_case: dict[str, list[Annotation]] = {}
    for a in anns:
        by_case.setdefault(a.case_id, []).append(a)
    regions = []
    for case_id, dom in sorted(manifest["domains"].items()):
        img = np.asarray(Image.open(root / "images" / f"{case_id}.png").convert("RGB"))
        mpath = root / "masks" / f"{case_id}.png"
        mask = np.asarray(Image.open(mpath)) if mpath.exists() else None
        regions.append(Region(case_id, int(dom), img, by_case.get(case_id, []),
                              float(manifest["spacing_um"]), mask))
    return regions


def load_region_layout_stub(root: str | Path) -> None:
    """Import adapter placeholder for real archives.

    Expected layout mirrors :func:`write_dataset`: ``images/<case>.png``,
    ``annotations.json`` in the MIDOG-style record format, and a
    ``manifest.json`` giving ``spacing_um`` and a ``domains`` case map.
    Converting the original archives into that layout is left to the user.
    """
    raise NotImplementedError(
        f"convert the archive at {root} into the images/ + annotations.json + manifest.json layout first"
    )

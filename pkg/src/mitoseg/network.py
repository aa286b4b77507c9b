"""UNet student/teacher network with attention, domain and contrastive heads.

All 3x3 convolutions use reflect padding and upsampling is nearest-neighbour
followed by a convolution, so a constant input yields spatially constant
logits (window stitching relies on this). Activations run channels-last,
which is markedly faster on CPU with reflect padding.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1
# seg head bias starts at these class priors (bg, nucleus, mitosis, hard negative)
SEG_PRIOR = (0.93, 0.05, 0.01, 0.01)


class InvalidConfig(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class MissingCheckpoint(FileNotFoundError):
    pass


@dataclass(frozen=True)
class NetConfig:
    depth: int = 4
    base_channels: int = 16
    n_classes: int = 4
    n_domains: int = 1
    embed_dim: int = 64
    refine_blocks: int = 2
    se_reduction: int = 4
    grl_lambda: float = 1.0
    refine_stage: int | None = None  # default: depth - 2
    tap_stage: int | None = None  # default: deepest stage
    attention: bool = True

    def validate(self) -> "NetConfig":
        if self.depth < 2:
            raise InvalidConfig("depth must be >= 2")
        if self.base_channels < 4:
            raise InvalidConfig("base_channels must be >= 4")
        if self.n_classes != 4:
            raise InvalidConfig("n_classes must be exactly 4")
        if self.n_domains < 1 or self.embed_dim < 1 or self.se_reduction < 1:
            raise InvalidConfig("n_domains, embed_dim and se_reduction must be positive")
        if self.grl_lambda < 0:
            raise InvalidConfig("grl_lambda must be >= 0")
        if not 0 <= self.refine_index < self.depth or not 0 <= self.tap_index < self.depth:
            raise InvalidConfig("refine_stage / tap_stage out of range")
        return self

    @property
    def refine_index(self) -> int:
        return self.depth - 2 if self.refine_stage is None else self.refine_stage

    @property
    def tap_index(self) -> int:
        return self.depth - 1 if self.tap_stage is None else self.tap_stage

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2 ** k for k in range(self.depth)]

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def grl(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lam``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return _GradReverse.apply(x, float(lam))


def _norm(ch: int) -> nn.GroupNorm:
    groups = 4 if ch % 4 == 0 else 1
    return nn.GroupNorm(groups, ch)


def _conv3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=1, padding_mode="reflect")


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            _conv3(cin, cout), _norm(cout), nn.ReLU(inplace=True),
            _conv3(cout, cout), _norm(cout), nn.ReLU(inplace=True),
        )


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(_conv3(ch, ch), _norm(ch), nn.ReLU(inplace=True), _conv3(ch, ch), _norm(ch))

    def forward(self, x):
        return F.relu(x + self.body(x))


class AttentionBlock(nn.Module):
    """Channel gate then spatial gate, both sigmoid-valued and multiplicative."""

    def __init__(self, ch: int, reduction: int = 4, kernel: int = 7):
        super().__init__()
        hidden = max(1, ch // reduction)
        self.channel_mlp = nn.Sequential(nn.Linear(ch, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, ch))
        self.spatial = nn.Conv2d(2, 1, kernel, padding=kernel // 2, padding_mode="reflect")

    def channel_gate(self, x):
        avg = x.mean(dim=(2, 3))
        mx = x.amax(dim=(2, 3))
        return torch.sigmoid(self.channel_mlp(avg) + self.channel_mlp(mx))[:, :, None, None]

    def spatial_gate(self, x):
        pooled = torch.cat([x.amax(dim=1, keepdim=True), x.mean(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.spatial(pooled))

    def forward(self, x):
        x = x * self.channel_gate(x)
        return x * self.spatial_gate(x)


class SEGate(nn.Module):
    """``out = x * sigmoid(W2 relu(W1 x))`` on a flat embedding."""

    def __init__(self, dim: int, reduction: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, max(1, dim // reduction))
        self.fc2 = nn.Linear(max(1, dim // reduction), dim)

    def forward(self, x):
        return x * torch.sigmoid(self.fc2(F.relu(self.fc1(x))))


class ClassifierHead(nn.Module):
    """Multi-scale head: one refined scale plus pooled projections of the others."""

    def __init__(self, channels: list[int], embed_dim: int, refine_index: int, refine_blocks: int,
                 se_reduction: int):
        super().__init__()
        self.refine_index = refine_index
        ch = channels[refine_index]
        self.refine = nn.Sequential(*[ResidualBlock(ch) for _ in range(refine_blocks)])
        self.proj = nn.ModuleList([nn.Linear(c, embed_dim) for c in channels])
        self.se = SEGate(embed_dim * len(channels), se_reduction)
        self.fc = nn.Linear(embed_dim * len(channels), 1)

    def fuse(self, pyramid: list[torch.Tensor]) -> torch.Tensor:
        parts = []
        for k, feat in enumerate(pyramid):
            if k == self.refine_index:
                feat = self.refine(feat)
            parts.append(self.proj[k](feat.mean(dim=(2, 3))))
        return torch.cat(parts, dim=1)

    def forward(self, pyramid: list[torch.Tensor]) -> torch.Tensor:
        return self.fc(self.se(self.fuse(pyramid))).squeeze(1)


@dataclass
class ForwardBundle:
    seg_logits: torch.Tensor  # (N, 4, H, W)
    feature_pyramid: list[torch.Tensor]
    embedding: torch.Tensor  # (N, embed_dim), unit norm
    domain_logits: torch.Tensor  # (N, n_domains)
    cls_logit: torch.Tensor | None  # (N,)


class MitosisNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.config = cfg.validate()
        ch = cfg.channels
        self.encoder = nn.ModuleList(
            [ConvBlock(3 if k == 0 else ch[k - 1], ch[k]) for k in range(cfg.depth)]
        )
        self.attention = nn.ModuleList([AttentionBlock(c) for c in ch]) if cfg.attention else None
        self.up = nn.ModuleList([_conv3(ch[k + 1], ch[k]) for k in range(cfg.depth - 1)])
        self.decoder = nn.ModuleList([ConvBlock(2 * ch[k], ch[k]) for k in range(cfg.depth - 1)])
        self.seg_head = nn.Conv2d(ch[0], cfg.n_classes, 1)
        with torch.no_grad():
            # without this the early all-background phase starves the rare classes
            self.seg_head.bias.copy_(torch.log(torch.tensor(SEG_PRIOR)))

        tap = ch[cfg.tap_index]
        self.projector = nn.Sequential(nn.Linear(tap, tap), nn.ReLU(inplace=True), nn.Linear(tap, cfg.embed_dim))
        self.domain_head = nn.Sequential(nn.Linear(tap, tap), nn.ReLU(inplace=True), nn.Linear(tap, cfg.n_domains))
        self.classifier = ClassifierHead(ch, cfg.embed_dim, cfg.refine_index, cfg.refine_blocks, cfg.se_reduction)
        self.grl_lambda = cfg.grl_lambda

    def check_input(self, x: torch.Tensor) -> None:
        k = 2 ** (self.config.depth - 1)
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] % k or x.shape[3] % k:
            raise ShapeMismatch(f"expected (N, 3, H, W) with H, W divisible by {k}; got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        pyramid = []
        for k, block in enumerate(self.encoder):
            if k > 0:
                x = F.max_pool2d(x, 2)
            x = block(x)
            if self.attention is not None:
                x = self.attention[k](x)
            pyramid.append(x)
        return pyramid

    def decode(self, pyramid: list[torch.Tensor]) -> torch.Tensor:
        x = pyramid[-1]
        for k in reversed(range(self.config.depth - 1)):
            x = self.up[k](F.interpolate(x, scale_factor=2, mode="nearest"))
            x = self.decoder[k](torch.cat([x, pyramid[k]], dim=1))
        return self.seg_head(x)

    def forward(self, x: torch.Tensor, with_cls: bool = True) -> ForwardBundle:
        """``with_cls=False`` skips the classifier head (``cls_logit`` is then None)."""
        self.check_input(x)
        pyramid = self.encode(x.contiguous(memory_format=torch.channels_last))
        seg = self.decode(pyramid)
        pooled = pyramid[self.config.tap_index].mean(dim=(2, 3))
        emb = F.normalize(self.projector(pooled), dim=1)
        dom = self.domain_head(grl(pooled, self.grl_lambda))
        cls = self.classifier(pyramid) if with_cls else None
        return ForwardBundle(seg, pyramid, emb, dom, cls)

    def segment(self, x: torch.Tensor) -> torch.Tensor:
        """Seg logits only; skips the auxiliary heads."""
        self.check_input(x)
        return self.decode(self.encode(x.contiguous(memory_format=torch.channels_last)))


def build(cfg: NetConfig, seed: int = 0) -> MitosisNet:
    """Deterministically initialised network for ``seed``."""
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MitosisNet(cfg).to(memory_format=torch.channels_last)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """``(N, H, W, 3)`` uint8 or [0, 1] floats -> ``(N, 3, H, W)`` float32."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=np.float32))


def forward(model: MitosisNet, batch: np.ndarray | torch.Tensor, mode: str = "eval") -> ForwardBundle:
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    x = batch if isinstance(batch, torch.Tensor) else to_tensor(batch)
    model.train(mode == "train")
    if mode == "eval":
        with torch.no_grad():
            return model(x)
    return model(x)


def flat_parameters(model: nn.Module) -> tuple[np.ndarray, list[dict]]:
    chunks, manifest, offset = [], [], 0
    for name, t in model.state_dict().items():
        a = t.detach().cpu().numpy().astype(np.float32).ravel()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(a)
        offset += a.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float32)
    return flat, manifest


def param_checksum(model: nn.Module) -> str:
    return hashlib.sha256(flat_parameters(model)[0].tobytes()).hexdigest()


def save_checkpoint(model: MitosisNet, path: str | Path, extra: dict | None = None) -> Path:
    """Single ``.npz`` file: JSON header (version, config, manifest) + flat float32 array."""
    flat, manifest = flat_parameters(model)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "manifest": manifest,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
                 params=flat)
    return path


def load_checkpoint(path: str | Path) -> tuple[MitosisNet, dict]:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(str(path))
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        flat = data["params"]
    if "version" not in header:
        raise ValueError(f"{path} has no version field")
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    model = MitosisNet(NetConfig.from_dict(header["config"]))
    state = {}
    for entry in header["manifest"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = flat[entry["offset"]:entry["offset"] + n].reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(chunk.copy())
    model.load_state_dict(state)
    model = model.to(memory_format=torch.channels_last).eval()
    return model, header.get("extra", {})

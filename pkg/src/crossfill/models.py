"""The three networks: two mirror-symmetric encoder-decoder generators that
translate between the face and sketch domains, and a pair discriminator that
scores a stacked (face, sketch) pair as real or generated.

All public entry points take and return :class:`DomainImage`; torch tensors
stay internal.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as fn

from .images import Domain, DomainImage, DomainError, ShapeError, require_domain

CHECKPOINT_VERSION = 1
PROB_EPS = 1e-7  # floor applied before any explicit log of a probability


class ConfigError(ValueError):
    """Raised for an invalid architecture or training configuration."""


class NumericError(RuntimeError):
    """Raised when a computation produces non-finite values."""


@dataclass(frozen=True)
class ArchConfig:
    """Network topology knobs. 64 px is the desk-scale default; the same
    architecture family scales to 256 px with a larger depth."""

    image_size: int = 64
    depth: int = 4
    base_channels: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8 or (self.image_size & (self.image_size - 1)) != 0:
            raise ConfigError(f"image_size must be a power of two >= 8, got {self.image_size}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.image_size % (2 ** self.depth) != 0 or self.image_size // (2 ** self.depth) < 1:
            raise ConfigError(
                f"image_size {self.image_size} cannot be downsampled {self.depth} times"
            )
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // (2 ** self.depth)

    def encoder_channels(self) -> list[int]:
        return [min(self.base_channels * 2 ** i, self.base_channels * 8) for i in range(self.depth)]


class TransformNet(nn.Module):
    """Encoder-decoder with stride-2 stages; each encoder output is
    concatenated to the input of its mirror decoder stage."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        chs = arch.encoder_channels()
        self.depth = arch.depth

        enc = []
        prev = 3
        for i, ch in enumerate(chs):
            block = [nn.Conv2d(prev, ch, 4, stride=2, padding=1)]
            if i > 0:
                block.append(nn.InstanceNorm2d(ch, affine=True))
            block.append(nn.LeakyReLU(0.2, inplace=True))
            enc.append(nn.Sequential(*block))
            prev = ch
        self.encoder = nn.ModuleList(enc)

        dec = []
        prev = chs[-1]
        for i in range(arch.depth):
            cin = prev if i == 0 else prev + chs[arch.depth - 1 - i]
            last = i == arch.depth - 1
            cout = 3 if last else chs[arch.depth - 2 - i]
            block = [nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)]
            if not last:
                block.append(nn.InstanceNorm2d(cout, affine=True))
                block.append(nn.ReLU(inplace=True))
            dec.append(nn.Sequential(*block))
            prev = cout
        self.decoder = nn.ModuleList(dec)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
        y = skips[-1]
        for i, stage in enumerate(self.decoder):
            if i > 0:
                y = torch.cat([y, skips[self.depth - 1 - i]], dim=1)
            y = stage(y)
        return torch.tanh(y)

    def encoder_shapes(self, image_size: int) -> list[tuple[int, int]]:
        """(channels, spatial) per encoder stage, by shape tracing."""
        shapes = []
        dtype = next(self.parameters()).dtype
        with torch.no_grad():
            x = torch.zeros(1, 3, image_size, image_size, dtype=dtype)
            for stage in self.encoder:
                x = stage(x)
                shapes.append((x.shape[1], x.shape[2]))
        return shapes


class PairDiscriminator(nn.Module):
    """Convolutional stack over a stacked 6-channel (face, sketch) pair,
    ending in a single fully-connected logit."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        chs = arch.encoder_channels()
        layers = []
        prev = 6
        for i, ch in enumerate(chs):
            layers.append(nn.Conv2d(prev, ch, 4, stride=2, padding=1))
            if i > 0:
                layers.append(nn.InstanceNorm2d(ch, affine=True))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            prev = ch
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(prev * arch.bottleneck_size ** 2, 1)

    def forward(self, face: torch.Tensor, sketch: torch.Tensor) -> torch.Tensor:
        """Returns the raw logit, shape (B,)."""
        x = torch.cat([face, sketch], dim=1)
        x = self.features(x)
        return self.head(x.flatten(1)).squeeze(1)


def _init_weights(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            with torch.no_grad():
                m.weight.normal_(1.0, 0.02, generator=gen)
                m.bias.zero_()


@dataclass
class ModelBundle:
    """The two generators plus the pair discriminator.

    Immutable during inference; training mutates the parameters in place and
    needs exclusive access.
    """

    arch: ArchConfig
    face_to_sketch: TransformNet
    sketch_to_face: TransformNet
    discriminator: PairDiscriminator
    trained: bool = False
    dtype: torch.dtype = field(default=torch.float32)

    def to_dtype(self, dtype: torch.dtype) -> "ModelBundle":
        """A converted copy; the original is untouched."""
        clone = build_models(self.arch)
        clone.face_to_sketch.load_state_dict(self.face_to_sketch.state_dict())
        clone.sketch_to_face.load_state_dict(self.sketch_to_face.state_dict())
        clone.discriminator.load_state_dict(self.discriminator.state_dict())
        clone.face_to_sketch.to(dtype)
        clone.sketch_to_face.to(dtype)
        clone.discriminator.to(dtype)
        return replace(clone, trained=self.trained, dtype=dtype)

    def parameter_count(self) -> int:
        return sum(
            p.numel()
            for net in (self.face_to_sketch, self.sketch_to_face, self.discriminator)
            for p in net.parameters()
        )


def build_models(config: ArchConfig) -> ModelBundle:
    """Deterministically construct the three networks from ``config.seed``."""
    gen = torch.Generator().manual_seed(config.seed)
    f2s = TransformNet(config)
    s2f = TransformNet(config)
    disc = PairDiscriminator(config)
    _init_weights(f2s, gen)
    _init_weights(s2f, gen)
    _init_weights(disc, gen)
    for net in (f2s, s2f, disc):
        net.eval()
    return ModelBundle(config, f2s, s2f, disc)


# ---------------------------------------------------------------------------
# tensor <-> image plumbing

def pixels_to_tensor(pixels: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    """H×W×3 (or N×H×W×3) float array -> (B, 3, H, W) tensor."""
    arr = np.asarray(pixels)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)
    return t.permute(0, 3, 1, 2).contiguous()


def tensor_to_pixels(t: torch.Tensor) -> np.ndarray:
    """(B, 3, H, W) tensor -> N×H×W×3 float array (same dtype)."""
    return t.detach().permute(0, 2, 3, 1).contiguous().numpy()


def _check_size(image: DomainImage, bundle: ModelBundle, what: str) -> None:
    if image.size != bundle.arch.image_size:
        raise ShapeError(
            f"{what} is {image.size} px but the model expects {bundle.arch.image_size} px"
        )


def _single_image(t: torch.Tensor, domain: Domain) -> DomainImage:
    pixels = np.clip(tensor_to_pixels(t)[0], -1.0, 1.0)
    return DomainImage(pixels, domain)


# ---------------------------------------------------------------------------
# public forward operations

def to_sketch(image: DomainImage, bundle: ModelBundle) -> DomainImage:
    """Map a face-domain image to the sketch domain."""
    require_domain(image, Domain.FACE)
    _check_size(image, bundle, "input")
    with torch.no_grad():
        out = bundle.face_to_sketch(pixels_to_tensor(image.pixels, bundle.dtype))
    return _single_image(out, Domain.SKETCH)


def to_face(image: DomainImage, bundle: ModelBundle) -> DomainImage:
    """Map a sketch-domain image to the face domain."""
    require_domain(image, Domain.SKETCH)
    _check_size(image, bundle, "input")
    with torch.no_grad():
        out = bundle.sketch_to_face(pixels_to_tensor(image.pixels, bundle.dtype))
    return _single_image(out, Domain.FACE)


def _pair_tensors(face: DomainImage, sketch: DomainImage, bundle: ModelBundle):
    require_domain(face, Domain.FACE, "first argument")
    require_domain(sketch, Domain.SKETCH, "second argument")
    _check_size(face, bundle, "face")
    _check_size(sketch, bundle, "sketch")
    return (
        pixels_to_tensor(face.pixels, bundle.dtype),
        pixels_to_tensor(sketch.pixels, bundle.dtype),
    )


def clamp_probability(p: torch.Tensor) -> torch.Tensor:
    return torch.clamp(p, PROB_EPS, 1.0 - PROB_EPS)


def discriminate(face: DomainImage, sketch: DomainImage, bundle: ModelBundle) -> float:
    """Probability in (0, 1) that the (face, sketch) pair is a real pair."""
    face_t, sketch_t = _pair_tensors(face, sketch, bundle)
    with torch.no_grad():
        logit = bundle.discriminator(face_t, sketch_t)
        prob = clamp_probability(torch.sigmoid(logit))
    return float(prob.item())


def realism_gradient(face: DomainImage, sketch: DomainImage, bundle: ModelBundle) -> np.ndarray:
    """Gradient of log D(face, sketch) with respect to the sketch pixels.

    Computed through the log-sigmoid of the discriminator logit, which is the
    numerically stable form of log D. Returns an H×W×3 array.
    """
    face_t, sketch_t = _pair_tensors(face, sketch, bundle)
    grad = realism_gradient_t(face_t, sketch_t, bundle)
    return tensor_to_pixels(grad)[0]


def realism_gradient_t(
    face_t: torch.Tensor, sketch_t: torch.Tensor, bundle: ModelBundle
) -> torch.Tensor:
    """Batched tensor form of :func:`realism_gradient`; (B,3,H,W) in/out."""
    sketch_var = sketch_t.detach().clone().requires_grad_(True)
    logit = bundle.discriminator(face_t.detach(), sketch_var)
    log_prob = fn.logsigmoid(logit).sum()
    (grad,) = torch.autograd.grad(log_prob, sketch_var)
    if not torch.all(torch.isfinite(grad)):
        raise NumericError("discriminator gradient is not finite")
    return grad.detach()


# ---------------------------------------------------------------------------
# checkpoints

def save_bundle(bundle: ModelBundle, path: str | Path, optimizer_state: dict | None = None) -> None:
    """Single-file checkpoint; ``load_bundle`` reproduces outputs bit-exactly."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "arch": {
            "image_size": bundle.arch.image_size,
            "depth": bundle.arch.depth,
            "base_channels": bundle.arch.base_channels,
            "seed": bundle.arch.seed,
        },
        "trained": bundle.trained,
        "face_to_sketch": bundle.face_to_sketch.state_dict(),
        "sketch_to_face": bundle.sketch_to_face.state_dict(),
        "discriminator": bundle.discriminator.state_dict(),
    }
    if optimizer_state is not None:
        payload["optimizers"] = optimizer_state
    torch.save(payload, str(path))


def load_bundle(path: str | Path, with_optimizers: bool = False):
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version!r}")
    arch = ArchConfig(**payload["arch"])
    bundle = build_models(arch)
    bundle.face_to_sketch.load_state_dict(payload["face_to_sketch"])
    bundle.sketch_to_face.load_state_dict(payload["sketch_to_face"])
    bundle.discriminator.load_state_dict(payload["discriminator"])
    bundle.trained = bool(payload.get("trained", False))
    if with_optimizers:
        return bundle, payload.get("optimizers")
    return bundle

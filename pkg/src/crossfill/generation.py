"""Recursive image completion from one or more anchored patches.

Starting from a white canvas with the given patches pasted in, each
iteration re-anchors the patches, maps the face estimate to the sketch
domain, nudges the sketch along the discriminator's realism gradient, and
maps it back, progressively filling the missing area in both domains.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .images import Domain, DomainImage, DomainError, ShapeError, save_image
from .models import (
    ModelBundle,
    NumericError,
    pixels_to_tensor,
    realism_gradient_t,
    tensor_to_pixels,
)

BACKGROUND = 1.0  # the white canvas value used before anything is generated


class OverlapError(ValueError):
    """Raised when two same-domain patches claim the same pixels."""


class UntrainedModelError(RuntimeError):
    """Raised when generation is attempted with an untrained bundle."""


class GenerationCancelled(RuntimeError):
    """Raised from a progress callback to abort a run."""


@dataclass(frozen=True)
class Mask:
    """Binary H×W keep-map; 1 marks pixels supplied by the patch."""

    map: np.ndarray

    def __post_init__(self):
        m = self.map
        if not isinstance(m, np.ndarray) or m.ndim != 2:
            raise ShapeError(f"mask must be a 2-D array, got {getattr(m, 'shape', None)}")
        if m.shape[0] != m.shape[1]:
            raise ShapeError(f"mask must be square, got {m.shape}")
        values = np.unique(m)
        if not np.all(np.isin(values, (0, 1))):
            raise ValueError("mask values must be exactly 0 or 1")

    @property
    def size(self) -> int:
        return self.map.shape[0]

    @property
    def kept_pixels(self) -> int:
        return int(self.map.sum())

    @classmethod
    def from_rect(cls, size: int, x0: int, y0: int, x1: int, y1: int) -> "Mask":
        """Keep the half-open rectangle [x0, x1) × [y0, y1)."""
        if not (0 <= x0 < x1 <= size and 0 <= y0 < y1 <= size):
            raise ValueError(f"rectangle ({x0},{y0},{x1},{y1}) out of bounds for size {size}")
        m = np.zeros((size, size), dtype=np.uint8)
        m[y0:y1, x0:x1] = 1
        return cls(m)

    @classmethod
    def full(cls, size: int) -> "Mask":
        return cls(np.ones((size, size), dtype=np.uint8))


@dataclass(frozen=True)
class Patch:
    """Masked image content used as a fixed anchor during generation."""

    pixels: DomainImage
    mask: Mask

    def __post_init__(self):
        if self.pixels.size != self.mask.size:
            raise ShapeError(
                f"patch image is {self.pixels.size} px but mask is {self.mask.size} px"
            )
        if self.mask.kept_pixels == 0:
            raise ValueError("patch mask is empty")
        outside = self.pixels.pixels * (1 - self.mask.map[:, :, None])
        if np.any(outside != 0):
            raise ValueError("patch pixels must be zero outside the mask")

    @property
    def domain(self) -> Domain:
        return self.pixels.domain

    @classmethod
    def from_image(cls, image: DomainImage, mask: Mask) -> "Patch":
        """Cut a patch out of a full image by zeroing everything off-mask."""
        masked = image.pixels * mask.map[:, :, None].astype(image.pixels.dtype)
        return cls(DomainImage(masked, image.domain), mask)


@dataclass(frozen=True)
class GenerationOptions:
    iterations: int = 100
    adv_step: float = 1.0
    use_patch_anchor: bool = True
    use_adv_adjust: bool = True
    record_every: int = 1
    adv_sign: int = 1  # +1 climbs the realism gradient; -1 descends it

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.adv_step < 0:
            raise ValueError("adv_step must be >= 0")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        if self.adv_sign not in (1, -1):
            raise ValueError("adv_sign must be +1 or -1")


@dataclass(frozen=True)
class TraceFrame:
    k: int
    face: DomainImage
    sketch: DomainImage


@dataclass
class GenerationTrace:
    """Recorded frames plus per-iteration face-domain residual statistics.

    ``residual_mean[k-1]`` and ``residual_abs_mean[k-1]`` hold the signed and
    absolute pixel means of the difference between the faces at iterations k
    and k-1 (iteration 0 being the initial canvas).
    """

    frames: list[TraceFrame]
    residual_mean: np.ndarray
    residual_abs_mean: np.ndarray
    options: GenerationOptions

    @property
    def final_face(self) -> DomainImage:
        return self.frames[-1].face

    @property
    def final_sketch(self) -> DomainImage:
        return self.frames[-1].sketch


# ---------------------------------------------------------------------------
# patch plumbing

def apply_patch(x: DomainImage, patch: Patch) -> DomainImage:
    """Overwrite the masked region of ``x`` with the patch content."""
    if x.domain is not patch.domain:
        raise DomainError(
            f"patch is {patch.domain.value}-domain but target is {x.domain.value}-domain"
        )
    if x.size != patch.pixels.size:
        raise ShapeError(f"image is {x.size} px but patch is {patch.pixels.size} px")
    mask3 = patch.mask.map[:, :, None].astype(bool)
    out = np.where(mask3, patch.pixels.pixels, x.pixels)
    return DomainImage(out.astype(x.pixels.dtype, copy=False), x.domain)


def _check_disjoint(patches: list[Patch]) -> None:
    by_domain: dict[Domain, list[tuple[int, Patch]]] = {}
    for i, p in enumerate(patches):
        by_domain.setdefault(p.domain, []).append((i, p))
    for domain, group in by_domain.items():
        cover = np.zeros_like(group[0][1].mask.map, dtype=np.int32)
        for _, p in group:
            cover += p.mask.map
        if cover.max() > 1:
            offenders = [
                i
                for i, p in group
                if np.any((cover > 1) & (p.mask.map == 1))
            ]
            raise OverlapError(
                f"{domain.value}-domain patches {offenders} overlap; same-domain patches must be disjoint"
            )


def _combine(patches: list[Patch], domain: Domain, size: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Union mask and summed pixels of the (disjoint) same-domain patches."""
    mask = np.zeros((size, size), dtype=bool)
    pixels = np.zeros((size, size, 3), dtype=dtype)
    for p in patches:
        if p.domain is not domain:
            continue
        mask |= p.mask.map.astype(bool)
        pixels += p.pixels.pixels.astype(dtype)
    return pixels, mask


def init_canvas(patches: list[Patch], target_domain: Domain) -> DomainImage:
    """White background with every patch of the target domain pasted in."""
    if not patches:
        raise ValueError("at least one patch is required")
    size = patches[0].pixels.size
    for p in patches:
        if p.pixels.size != size:
            raise ShapeError("all patches must share one image size")
    _check_disjoint(patches)
    canvas = np.full((size, size, 3), BACKGROUND, dtype=np.float32)
    pixels, mask = _combine(patches, target_domain, size, np.float32)
    canvas = np.where(mask[:, :, None], pixels, canvas)
    return DomainImage(canvas, target_domain)


def adjust_by_discriminator(
    face: DomainImage,
    sketch: DomainImage,
    bundle: ModelBundle,
    step: float,
    sign: int = 1,
) -> DomainImage:
    """Move the sketch along the gradient of log D(face, sketch), clamped back
    into [-1, 1]. ``step`` 0 returns the sketch unchanged, bit-exactly."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step == 0:
        return sketch
    from .models import realism_gradient

    grad = realism_gradient(face, sketch, bundle)
    out = np.clip(sketch.pixels + sign * step * grad, -1.0, 1.0)
    return DomainImage(out.astype(sketch.pixels.dtype, copy=False), Domain.SKETCH)


# ---------------------------------------------------------------------------
# the recursion engine (batched over samples; the public API uses B=1)

def _anchor_t(x: torch.Tensor, pixels: torch.Tensor | None, mask: torch.Tensor | None) -> torch.Tensor:
    if pixels is None:
        return x
    return torch.where(mask, pixels, x)


def _recursion(
    face_px: torch.Tensor | None,
    face_mask: torch.Tensor | None,
    sketch_px: torch.Tensor | None,
    sketch_mask: torch.Tensor | None,
    batch: int,
    size: int,
    bundle: ModelBundle,
    opts: GenerationOptions,
    progress=None,
):
    """Run the anchored recursion on (B,3,H,W) tensors.

    Returns (recorded frames as [(k, face_t, sketch_t)], residual means
    (B, K), residual abs means (B, K)).
    """
    dtype = bundle.dtype
    # the iteration-0 canvas always contains the patches, toggle or not
    x = torch.full((batch, 3, size, size), BACKGROUND, dtype=dtype)
    x = _anchor_t(x, face_px, face_mask)

    sketch_canvas = torch.full((batch, 3, size, size), BACKGROUND, dtype=dtype)
    sketch_canvas = _anchor_t(sketch_canvas, sketch_px, sketch_mask)

    frames = [(0, x.clone(), sketch_canvas)]
    res_mean = np.zeros((batch, opts.iterations), dtype=np.float64)
    res_abs = np.zeros((batch, opts.iterations), dtype=np.float64)
    prev = x

    anchor = opts.use_patch_anchor
    with torch.no_grad():
        for k in range(1, opts.iterations + 1):
            cur = _anchor_t(prev, face_px, face_mask) if anchor else prev
            sketch = bundle.face_to_sketch(cur)
            if anchor:
                sketch = _anchor_t(sketch, sketch_px, sketch_mask)
            if opts.use_adv_adjust and opts.adv_step > 0:
                with torch.enable_grad():
                    grad = realism_gradient_t(cur, sketch, bundle)
                adjusted = torch.clamp(sketch + opts.adv_sign * opts.adv_step * grad, -1.0, 1.0)
            else:
                adjusted = sketch
            nxt = bundle.sketch_to_face(adjusted)
            if anchor:
                nxt = _anchor_t(nxt, face_px, face_mask)

            diff = (nxt - cur).to(torch.float64)
            res_mean[:, k - 1] = diff.mean(dim=(1, 2, 3)).numpy()
            res_abs[:, k - 1] = diff.abs().mean(dim=(1, 2, 3)).numpy()

            if k % opts.record_every == 0 or k == opts.iterations:
                frames.append((k, nxt.clone(), sketch.clone()))
            if progress is not None:
                progress(k, nxt, sketch)
            prev = nxt
    return frames, res_mean, res_abs


def _prepare(patches: list[Patch], bundle: ModelBundle):
    if not patches:
        raise ValueError("at least one patch is required")
    if not bundle.trained:
        raise UntrainedModelError("generation requires a trained model bundle")
    size = bundle.arch.image_size
    for p in patches:
        if p.pixels.size != size:
            raise ShapeError(f"patch is {p.pixels.size} px but the model expects {size} px")
    _check_disjoint(patches)

    dtype = bundle.dtype
    np_dtype = np.float64 if dtype == torch.float64 else np.float32

    def combined(domain: Domain):
        if not any(p.domain is domain for p in patches):
            return None, None
        pixels, mask = _combine(patches, domain, size, np_dtype)
        px_t = pixels_to_tensor(pixels, dtype)
        mask_t = torch.from_numpy(mask[None, None].copy())
        return px_t, mask_t

    face_px, face_mask = combined(Domain.FACE)
    sketch_px, sketch_mask = combined(Domain.SKETCH)
    return face_px, face_mask, sketch_px, sketch_mask, size


def generate(
    patches: list[Patch] | Patch,
    bundle: ModelBundle,
    opts: GenerationOptions | None = None,
    progress=None,
) -> GenerationTrace:
    """Recursively grow a full face/sketch pair from the given patches."""
    if isinstance(patches, Patch):
        patches = [patches]
    if opts is None:
        opts = GenerationOptions()
    face_px, face_mask, sketch_px, sketch_mask, size = _prepare(patches, bundle)

    def hook(k, face_t, sketch_t):
        if progress is not None:
            progress(k, _frame_image(face_t, Domain.FACE), _frame_image(sketch_t, Domain.SKETCH))

    frames_t, res_mean, res_abs = _recursion(
        face_px, face_mask, sketch_px, sketch_mask, 1, size, bundle, opts,
        progress=hook if progress is not None else None,
    )
    frames = [
        TraceFrame(k, _frame_image(f, Domain.FACE), _frame_image(s, Domain.SKETCH))
        for k, f, s in frames_t
    ]
    return GenerationTrace(
        frames=frames,
        residual_mean=res_mean[0],
        residual_abs_mean=res_abs[0],
        options=opts,
    )


def composite(
    patches: list[Patch],
    bundle: ModelBundle,
    opts: GenerationOptions | None = None,
    progress=None,
) -> GenerationTrace:
    """Generation anchored on patches from several people and/or domains.

    Identical loop to :func:`generate`; each domain's patches are re-anchored
    every iteration, and the final face/sketch pair is returned in the trace.
    """
    return generate(patches, bundle, opts, progress)


def _frame_image(t: torch.Tensor, domain: Domain) -> DomainImage:
    pixels = tensor_to_pixels(t)[0]
    np.clip(pixels, -1.0, 1.0, out=pixels)
    return DomainImage(pixels, domain)


def export_trace(trace: GenerationTrace, directory: str | Path) -> None:
    """Write numbered frames per domain plus a residual-statistics CSV."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for frame in trace.frames:
        save_image(frame.face, directory / f"face_{frame.k:04d}.png")
        save_image(frame.sketch, directory / f"sketch_{frame.k:04d}.png")
    lines = ["k,mean_r,mean_abs_r"]
    for i in range(len(trace.residual_mean)):
        lines.append(f"{i + 1},{trace.residual_mean[i]:.10g},{trace.residual_abs_mean[i]:.10g}")
    (directory / "residuals.csv").write_text("\n".join(lines) + "\n")

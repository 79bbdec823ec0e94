"""Adversarial training of the bidirectional transformation pair.

Each outer step updates the discriminator several times on the four
generated (fake) pairings plus the real pair, then each generator once on
its own two-pair subset plus an L1 reconstruction term.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .images import Domain, DomainImage
from .models import (
    PROB_EPS,
    ArchConfig,
    ConfigError,
    ModelBundle,
    build_models,
    clamp_probability,
    pixels_to_tensor,
    save_bundle,
)

HISTORY_COLUMNS = ("step", "epoch", "l_rec", "l_adv", "d_real_mean", "d_fake_mean")


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; the last good checkpoint is kept."""


@dataclass(frozen=True)
class TrainConfig:
    recon_weight: float = 100.0      # balance between L1 reconstruction and the adversarial term
    adam_alpha: float = 0.0002
    adam_beta1: float = 0.5
    d_updates_per_gen: int = 3
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.recon_weight < 0:
            raise ConfigError("recon_weight must be >= 0")
        for name in ("adam_alpha", "adam_beta1"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("d_updates_per_gen", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


class FakePairKind(enum.Enum):
    REAL_FACE_GEN_SKETCH = "real_face_gen_sketch"      # (face, f2s(face))
    CYCLED_FACE_GEN_SKETCH = "cycled_face_gen_sketch"  # (s2f(f2s(face)), f2s(face))
    GEN_FACE_REAL_SKETCH = "gen_face_real_sketch"      # (s2f(sketch), sketch)
    GEN_FACE_CYCLED_SKETCH = "gen_face_cycled_sketch"  # (s2f(sketch), f2s(s2f(sketch)))


# pairs whose sketch half was produced by the face->sketch generator
SKETCH_GENERATOR_KINDS = (
    FakePairKind.REAL_FACE_GEN_SKETCH,
    FakePairKind.GEN_FACE_CYCLED_SKETCH,
)
# pairs whose face half was produced by the sketch->face generator
FACE_GENERATOR_KINDS = (
    FakePairKind.GEN_FACE_REAL_SKETCH,
    FakePairKind.CYCLED_FACE_GEN_SKETCH,
)


@dataclass(frozen=True)
class RoundTripImages:
    generated_sketch: DomainImage  # f2s(face)
    cycled_face: DomainImage       # s2f(f2s(face))
    generated_face: DomainImage    # s2f(sketch)
    cycled_sketch: DomainImage     # f2s(s2f(sketch))


@dataclass(frozen=True)
class FakePairSet:
    """The four generated pairings derived from one real (face, sketch) pair."""

    pairs: tuple[tuple[DomainImage, DomainImage, FakePairKind], ...]

    def __post_init__(self):
        if len(self.pairs) != 4:
            raise ValueError(f"expected exactly 4 pairs, got {len(self.pairs)}")

    @property
    def for_sketch_generator(self):
        return tuple(p for p in self.pairs if p[2] in SKETCH_GENERATOR_KINDS)

    @property
    def for_face_generator(self):
        return tuple(p for p in self.pairs if p[2] in FACE_GENERATOR_KINDS)


def _round_trip_t(face_t: torch.Tensor, sketch_t: torch.Tensor, bundle: ModelBundle):
    gen_sketch = bundle.face_to_sketch(face_t)
    cyc_face = bundle.sketch_to_face(gen_sketch)
    gen_face = bundle.sketch_to_face(sketch_t)
    cyc_sketch = bundle.face_to_sketch(gen_face)
    return gen_sketch, cyc_face, gen_face, cyc_sketch


def round_trip(face: DomainImage, sketch: DomainImage, bundle: ModelBundle) -> RoundTripImages:
    """All four generated images derived from one aligned pair."""
    from .models import _pair_tensors, _single_image

    face_t, sketch_t = _pair_tensors(face, sketch, bundle)
    with torch.no_grad():
        gs, cf, gf, cs = _round_trip_t(face_t, sketch_t, bundle)
    return RoundTripImages(
        generated_sketch=_single_image(gs, Domain.SKETCH),
        cycled_face=_single_image(cf, Domain.FACE),
        generated_face=_single_image(gf, Domain.FACE),
        cycled_sketch=_single_image(cs, Domain.SKETCH),
    )


def fake_pair_set(face: DomainImage, sketch: DomainImage, bundle: ModelBundle) -> FakePairSet:
    rt = round_trip(face, sketch, bundle)
    return FakePairSet(
        pairs=(
            (face, rt.generated_sketch, FakePairKind.REAL_FACE_GEN_SKETCH),
            (rt.cycled_face, rt.generated_sketch, FakePairKind.CYCLED_FACE_GEN_SKETCH),
            (rt.generated_face, sketch, FakePairKind.GEN_FACE_REAL_SKETCH),
            (rt.generated_face, rt.cycled_sketch, FakePairKind.GEN_FACE_CYCLED_SKETCH),
        )
    )


# ---------------------------------------------------------------------------
# losses

def _l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def reconstruction_loss(face, sketch, generated_face, cycled_face, generated_sketch, cycled_sketch):
    """Sum of per-pixel-mean L1 distances between each real image and both of
    its generated counterparts. Accepts torch tensors or numpy arrays of
    identical shape; returns a torch scalar.
    """
    ts = [torch.as_tensor(x) for x in (face, sketch, generated_face, cycled_face, generated_sketch, cycled_sketch)]
    face, sketch, gen_face, cyc_face, gen_sketch, cyc_sketch = ts
    return (
        _l1(face, gen_face)
        + _l1(face, cyc_face)
        + _l1(sketch, gen_sketch)
        + _l1(sketch, cyc_sketch)
    )


def discriminator_loss(fake_probs, real_probs) -> torch.Tensor:
    """mean(log D(fake)) - mean(log D(real)); the discriminator minimizes
    this, driving D(fake) toward 0 and D(real) toward 1. Probabilities are
    floored at 1e-7 from both ends before the log.
    """
    fake = clamp_probability(torch.as_tensor(fake_probs).reshape(-1))
    real = clamp_probability(torch.as_tensor(real_probs).reshape(-1))
    return torch.log(fake).mean() - torch.log(real).mean()


def _generator_adv_loss(probs: torch.Tensor) -> torch.Tensor:
    # non-saturating form: the generator maximizes log D on its outputs
    return -torch.log(clamp_probability(probs)).mean()


# ---------------------------------------------------------------------------
# per-network update steps

@dataclass
class StepMetrics:
    loss: float
    adv: float
    recon: float
    d_real_mean: float = float("nan")
    d_fake_mean: float = float("nan")
    clamped: bool = False


class Trainer:
    """Owns the three optimizers and counts every update per network."""

    def __init__(self, bundle: ModelBundle, cfg: TrainConfig):
        self.bundle = bundle
        self.cfg = cfg
        betas = (cfg.adam_beta1, 0.999)
        self.opt_f2s = torch.optim.Adam(bundle.face_to_sketch.parameters(), lr=cfg.adam_alpha, betas=betas)
        self.opt_s2f = torch.optim.Adam(bundle.sketch_to_face.parameters(), lr=cfg.adam_alpha, betas=betas)
        self.opt_disc = torch.optim.Adam(bundle.discriminator.parameters(), lr=cfg.adam_alpha, betas=betas)
        self.update_counts = {"discriminator": 0, "face_to_sketch": 0, "sketch_to_face": 0}

    # -- discriminator ------------------------------------------------------

    def discriminator_step(self, face_t: torch.Tensor, sketch_t: torch.Tensor) -> StepMetrics:
        bundle = self.bundle
        with torch.no_grad():
            gen_sketch, cyc_face, gen_face, cyc_sketch = _round_trip_t(face_t, sketch_t, bundle)

        fake_faces = torch.cat([face_t, cyc_face, gen_face, gen_face], dim=0)
        fake_sketches = torch.cat([gen_sketch, gen_sketch, sketch_t, cyc_sketch], dim=0)
        both_faces = torch.cat([fake_faces, face_t], dim=0)
        both_sketches = torch.cat([fake_sketches, sketch_t], dim=0)

        logits = bundle.discriminator(both_faces, both_sketches)
        probs = torch.sigmoid(logits)
        n_fake = fake_faces.shape[0]
        loss = discriminator_loss(probs[:n_fake], probs[n_fake:])
        self._check_finite(loss, "discriminator")

        self.opt_disc.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_disc.step()
        self.update_counts["discriminator"] += 1

        clamped = bool((probs.min() < PROB_EPS) or (probs.max() > 1 - PROB_EPS))
        return StepMetrics(
            loss=float(loss.item()),
            adv=float(loss.item()),
            recon=0.0,
            d_real_mean=float(probs[n_fake:].mean().item()),
            d_fake_mean=float(probs[:n_fake].mean().item()),
            clamped=clamped,
        )

    # -- generators ---------------------------------------------------------

    def _sketch_generator_objective(self, face_t: torch.Tensor, sketch_t: torch.Tensor):
        bundle = self.bundle
        gen_sketch = bundle.face_to_sketch(face_t)
        with torch.no_grad():
            gen_face = bundle.sketch_to_face(sketch_t)
        cyc_sketch = bundle.face_to_sketch(gen_face)

        pair_faces = torch.cat([face_t, gen_face], dim=0)
        pair_sketches = torch.cat([gen_sketch, cyc_sketch], dim=0)
        probs = torch.sigmoid(bundle.discriminator(pair_faces, pair_sketches))
        adv = _generator_adv_loss(probs)
        recon = _l1(sketch_t, gen_sketch) + _l1(sketch_t, cyc_sketch)
        return adv + self.cfg.recon_weight * recon, adv, recon

    def _face_generator_objective(self, face_t: torch.Tensor, sketch_t: torch.Tensor):
        bundle = self.bundle
        gen_face = bundle.sketch_to_face(sketch_t)
        with torch.no_grad():
            gen_sketch = bundle.face_to_sketch(face_t)
        cyc_face = bundle.sketch_to_face(gen_sketch)

        pair_faces = torch.cat([gen_face, cyc_face], dim=0)
        pair_sketches = torch.cat([sketch_t, gen_sketch], dim=0)
        probs = torch.sigmoid(bundle.discriminator(pair_faces, pair_sketches))
        adv = _generator_adv_loss(probs)
        recon = _l1(face_t, gen_face) + _l1(face_t, cyc_face)
        return adv + self.cfg.recon_weight * recon, adv, recon

    def sketch_generator_step(self, face_t: torch.Tensor, sketch_t: torch.Tensor) -> StepMetrics:
        loss, adv, recon = self._sketch_generator_objective(face_t, sketch_t)
        self._check_finite(loss, "face->sketch generator")
        self.opt_f2s.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_f2s.step()
        self.update_counts["face_to_sketch"] += 1
        return StepMetrics(loss=float(loss.item()), adv=float(adv.item()), recon=float(recon.item()))

    def face_generator_step(self, face_t: torch.Tensor, sketch_t: torch.Tensor) -> StepMetrics:
        loss, adv, recon = self._face_generator_objective(face_t, sketch_t)
        self._check_finite(loss, "sketch->face generator")
        self.opt_s2f.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_s2f.step()
        self.update_counts["sketch_to_face"] += 1
        return StepMetrics(loss=float(loss.item()), adv=float(adv.item()), recon=float(recon.item()))

    @staticmethod
    def _check_finite(loss: torch.Tensor, what: str) -> None:
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"{what} loss is not finite")

    def optimizer_state(self) -> dict:
        return {
            "face_to_sketch": self.opt_f2s.state_dict(),
            "sketch_to_face": self.opt_s2f.state_dict(),
            "discriminator": self.opt_disc.state_dict(),
        }


# ---------------------------------------------------------------------------
# data plumbing and the outer loop

@dataclass
class PairArrays:
    """In-memory aligned dataset: faces and sketches as N×H×W×3 float32."""

    faces: np.ndarray
    sketches: np.ndarray

    def __post_init__(self):
        if self.faces.shape != self.sketches.shape:
            raise ValueError("faces and sketches must have identical shapes")
        if len(self.faces) == 0:
            raise ValueError("dataset is empty")

    def __len__(self):
        return len(self.faces)


class _BatchStream:
    """Endless shuffled batch source; reshuffles deterministically whenever a
    pass over the dataset is exhausted."""

    def __init__(self, data: PairArrays, batch_size: int, rng: np.random.Generator):
        self.data = data
        self.batch_size = min(batch_size, len(data))
        self.rng = rng
        self._order = rng.permutation(len(data))
        self._pos = 0

    def next_batch(self) -> tuple[torch.Tensor, torch.Tensor]:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(len(self.data))
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return (
            pixels_to_tensor(self.data.faces[idx], torch.float32),
            pixels_to_tensor(self.data.sketches[idx], torch.float32),
        )


@dataclass
class StepRecord:
    step: int
    epoch: int
    l_rec: float
    l_adv: float
    d_real_mean: float
    d_fake_mean: float
    clamped: bool
    wall_time: float


@dataclass
class HeldoutRecord:
    epoch: int
    face_to_sketch_l1: float
    sketch_to_face_l1: float


@dataclass
class TrainHistory:
    steps: list[StepRecord] = field(default_factory=list)
    heldout: list[HeldoutRecord] = field(default_factory=list)
    update_counts: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> None:
        lines = [",".join(HISTORY_COLUMNS)]
        for r in self.steps:
            lines.append(
                f"{r.step},{r.epoch},{r.l_rec:.8g},{r.l_adv:.8g},{r.d_real_mean:.8g},{r.d_fake_mean:.8g}"
            )
        Path(path).write_text("\n".join(lines) + "\n")


def heldout_l1(bundle: ModelBundle, data: PairArrays, batch_size: int = 32) -> tuple[float, float]:
    """Mean |f2s(face) - sketch| and |s2f(sketch) - face| over a dataset."""
    f_total, b_total, n = 0.0, 0.0, 0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            faces = pixels_to_tensor(data.faces[start : start + batch_size], torch.float32)
            sketches = pixels_to_tensor(data.sketches[start : start + batch_size], torch.float32)
            k = faces.shape[0]
            f_total += float((bundle.face_to_sketch(faces) - sketches).abs().mean().item()) * k
            b_total += float((bundle.sketch_to_face(sketches) - faces).abs().mean().item()) * k
            n += k
    return f_total / n, b_total / n


def train(
    data,
    cfg: TrainConfig,
    arch: ArchConfig | None = None,
    heldout: PairArrays | None = None,
    checkpoint_path: str | Path | None = None,
    log_every: int = 0,
) -> tuple[ModelBundle, TrainHistory]:
    """Run the full alternating schedule.

    ``data`` is a :class:`PairArrays` or a dataset manifest (in which case the
    train split is used and the test split becomes the held-out set). Every
    outer step performs ``d_updates_per_gen`` discriminator updates followed
    by one update of each generator, each on a freshly drawn batch.
    Deterministic for a fixed ``cfg.seed``, data included.
    """
    from .data import DatasetManifest, load_pair_arrays

    if isinstance(data, DatasetManifest):
        train_data = load_pair_arrays(data, split="train")
        if heldout is None and any(e.split == "test" for e in data.entries):
            heldout = load_pair_arrays(data, split="test")
    else:
        train_data = data
    if len(train_data) == 0:
        raise ValueError("dataset is empty")

    size = train_data.faces.shape[1]
    if arch is None:
        arch = ArchConfig(image_size=size, seed=cfg.seed)
    if arch.image_size != size:
        raise ConfigError(f"architecture expects {arch.image_size} px, data is {size} px")

    bundle = build_models(arch)
    trainer = Trainer(bundle, cfg)
    history = TrainHistory()

    if heldout is not None:
        f_l1, b_l1 = heldout_l1(bundle, heldout)
        history.heldout.append(HeldoutRecord(0, f_l1, b_l1))

    rng = np.random.default_rng(cfg.seed)
    streams = {
        "disc": _BatchStream(train_data, cfg.batch_size, np.random.default_rng(rng.integers(2**63))),
        "f2s": _BatchStream(train_data, cfg.batch_size, np.random.default_rng(rng.integers(2**63))),
        "s2f": _BatchStream(train_data, cfg.batch_size, np.random.default_rng(rng.integers(2**63))),
    }
    steps_per_epoch = max(1, len(train_data) // streams["f2s"].batch_size)

    step = 0
    start = time.time()
    for epoch in range(1, cfg.epochs + 1):
        for _ in range(steps_per_epoch):
            step += 1
            try:
                d_metrics = None
                for _ in range(cfg.d_updates_per_gen):
                    d_metrics = trainer.discriminator_step(*streams["disc"].next_batch())
                f_metrics = trainer.sketch_generator_step(*streams["f2s"].next_batch())
                b_metrics = trainer.face_generator_step(*streams["s2f"].next_batch())
            except TrainingDiverged:
                history.update_counts = dict(trainer.update_counts)
                raise
            history.steps.append(
                StepRecord(
                    step=step,
                    epoch=epoch,
                    l_rec=f_metrics.recon + b_metrics.recon,
                    l_adv=d_metrics.adv,
                    d_real_mean=d_metrics.d_real_mean,
                    d_fake_mean=d_metrics.d_fake_mean,
                    clamped=d_metrics.clamped,
                    wall_time=time.time() - start,
                )
            )
        bundle.trained = True
        if heldout is not None:
            f_l1, b_l1 = heldout_l1(bundle, heldout)
            history.heldout.append(HeldoutRecord(epoch, f_l1, b_l1))
        if checkpoint_path is not None:
            save_bundle(bundle, checkpoint_path, optimizer_state=trainer.optimizer_state())
        if log_every and (epoch % log_every == 0 or epoch == cfg.epochs):
            rec = history.steps[-1]
            extra = ""
            if history.heldout:
                extra = f"  heldout_f2s={history.heldout[-1].face_to_sketch_l1:.4f}"
            print(
                f"epoch {epoch}/{cfg.epochs}  l_rec={rec.l_rec:.4f}  l_adv={rec.l_adv:.4f}"
                f"  d_real={rec.d_real_mean:.3f}  d_fake={rec.d_fake_mean:.3f}{extra}",
                flush=True,
            )

    history.update_counts = dict(trainer.update_counts)
    return bundle, history

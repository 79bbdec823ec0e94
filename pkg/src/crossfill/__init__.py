"""crossfill: bidirectional face/sketch transformation networks with
recursive patch-anchored image completion."""

from .images import Domain, DomainImage, DomainError, ShapeError, load_image, save_image
from .models import (
    ArchConfig,
    ConfigError,
    ModelBundle,
    NumericError,
    build_models,
    discriminate,
    load_bundle,
    realism_gradient,
    save_bundle,
    to_face,
    to_sketch,
)
from .training import (
    FakePairKind,
    FakePairSet,
    PairArrays,
    TrainConfig,
    TrainHistory,
    Trainer,
    TrainingDiverged,
    discriminator_loss,
    fake_pair_set,
    reconstruction_loss,
    round_trip,
    train,
)
from .generation import (
    GenerationCancelled,
    GenerationOptions,
    GenerationTrace,
    Mask,
    OverlapError,
    Patch,
    UntrainedModelError,
    adjust_by_discriminator,
    apply_patch,
    composite,
    export_trace,
    generate,
    init_canvas,
)
from .data import (
    DatasetManifest,
    FaceSpec,
    ImagePair,
    IngestResult,
    MaskSpec,
    ingest_pairs,
    jitter_spec,
    load_manifest,
    load_pair_arrays,
    make_dataset,
    make_mask,
    missing_percentage,
    random_face_spec,
    synth_pair,
)

__version__ = "0.1.0"

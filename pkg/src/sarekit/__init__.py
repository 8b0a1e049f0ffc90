"""Generated-image detection via caption-guided reconstruction error.

The pipeline: caption an image, partially noise its latent, denoise it
under the caption with a guided deterministic sampler, and measure the
pixel-space reconstruction difference. Generated images land close to
their reconstruction; camera images do not. A cross-attention fusion
detector (image features as queries, difference-map features as keys and
values) turns the difference map into a calibrated fake-probability.
"""

from ._version import __version__
from .conditioning import (
    Caption,
    CaptionFileBackend,
    ConditionEmbedding,
    HashTextEncoder,
    NullCaptioner,
    SyntheticCaptioner,
    generate_caption,
)
from .datasets import (
    Manifest,
    ManifestEntry,
    ingest_communityforensics_layout,
    ingest_forensynths_layout,
    ingest_genimage_layout,
    load_manifest,
    save_manifest,
    select,
)
from .errors import (
    BackendError,
    CacheMissError,
    CaptioningError,
    EmptySelectionError,
    IngestError,
    ParameterError,
    SarekitError,
    ShapeError,
    TrainingError,
    UndefinedMetricError,
)
from .evaluation import (
    DetectorScorer,
    EvalReport,
    MeanSareScorer,
    ScoreSet,
    ablation_grid,
    accuracy,
    auc,
    evaluate,
)
from .fusion import (
    AugmentationPolicy,
    DetectorModel,
    TrainConfig,
    build_detector,
    cross_attention_fuse,
    load_checkpoint,
    save_checkpoint,
    train_detector,
)
from .images import image_digest, load_image
from .recon import (
    ReconCache,
    ReconstructionConfig,
    ReconstructionRecord,
    cache_key,
    cached_reconstruct,
    reconstruct,
)
from .sare import SareMap, compute_sare, prepare_sare_input, preprocess_for_recon
from .schedule import (
    GuidanceSpec,
    NoiseSchedule,
    build_schedule,
    cfg_combine,
    ddim_sample_loop,
    ddim_step,
    default_schedule,
    forward_noise,
    timesteps_for_strength,
)

__all__ = [name for name in dir() if not name.startswith("_")]

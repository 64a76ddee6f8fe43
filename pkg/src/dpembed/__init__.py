"""Differentially private diffusion adaptation via noisy aggregated embeddings."""

from .adaptation import (
    GuidanceConfig,
    ImageEncoder,
    TokenEmbedding,
    TokenTrainConfig,
    adapt_conditioning,
    build_ti_embedding_set,
    encode_image,
    fit_encoder,
    guided_eps,
    train_token_per_image,
)
from .aggregation import (
    Embedding,
    EmbeddingSet,
    NoisyCentroid,
    centroid,
    normalize,
    release,
    subsample,
)
from .conditioning import base_conditioning, prompt_matrix
from .datasets import StyleDataset, make_style_dataset
from .denoiser import (
    DenoiserModel,
    TrainConfig,
    ddim_sample,
    denoiser_backward,
    denoiser_forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
    train_denoiser,
)
from .diffusion import (
    DiffusionSchedule,
    ImageTensor,
    ddim_step,
    forward_noise,
    make_schedule,
    predict_x0,
)
from .harness import (
    CellArtifacts,
    ExperimentConfig,
    SweepResult,
    report,
    run_cell,
    run_sweep,
    run_sweep_from_config,
    style_score,
)
from .privacy import (
    NoiseCalibration,
    PrivacyBudget,
    SubsampleConfig,
    amplify_by_subsampling,
    calibrate_classical,
    calibrate_numeric,
    gaussian_privacy_curve,
    invert_amplification,
)
from .store import read_store, write_store

__version__ = "0.1.0"

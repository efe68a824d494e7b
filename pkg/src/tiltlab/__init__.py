"""Contrastive learning as measure tilting: exact Gaussian solutions,
trainable encoder pairs, and deterministic desk-scale experiments."""

from .errors import (
    BadMagic,
    ConfigError,
    CountMismatch,
    DivergentNormalizer,
    NonFiniteGradient,
    NotPositiveDefinite,
    SolverDidNotConverge,
    TiltlabError,
    TruncatedFile,
    ZeroNormRow,
)
from .gaussian import (
    BlockGaussian,
    CosineLinear,
    GaussianConditionalMap,
    QuadraticTiltingParams,
    SolverConfig,
    cond_loss_closed,
    conditional_u_given_v,
    conditional_v_given_u,
    empirical_block_gaussian,
    exp_quadratic_expectation,
    joint_loss_closed,
    kl_gaussians,
    minimizer_cond,
    minimizer_joint,
    minimizer_quadratic_onesided,
    model_conditional,
    model_joint,
    model_marginal_u,
    recover_encoders,
    shrinkage_h,
)
from .encoders import (
    EncoderParams,
    EncoderSpec,
    SimilarityBatch,
    affine_spec,
    encode,
    encode_vjp,
    frozen_table_spec,
    init_params,
    linear_spec,
    load_checkpoint,
    mlp_spec,
    one_hot_spec,
    params_from_table,
    save_checkpoint,
    similarity_matrix,
    similarity_vjp,
)
from .losses import (
    Kernel,
    LossKind,
    kernel_gram,
    loss_clip,
    loss_cond,
    loss_cond_mmd,
    loss_joint,
    loss_joint_mmd,
    loss_value_and_grad,
    median_heuristic_bandwidth,
    mmd_unbiased,
)
from .training import TrainConfig, TrainHistory, adam_step, epoch_batches, train
from .crossmodal import (
    ClassifierHead,
    EmbeddingIndex,
    build_index,
    classify,
    classify_finetuned,
    fine_tune,
    load_index,
    recall_at_k,
    retrieve,
    save_index,
)
from .datagen import (
    FlowConfig,
    GpConfig,
    PairedDataset,
    draw_flow_config,
    gp_analytic_blocks,
    gp_modality_pair,
    lagrangian_dataset,
    lagrangian_pair,
    load_dataset,
    mnist_load,
    sample_block_gaussian,
    save_dataset,
    velocity_eval,
)
from .rng import SeededRng

__version__ = "0.1.0"

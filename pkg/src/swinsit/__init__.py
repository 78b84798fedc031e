"""Semantic image transmission over simulated fading channels.

A Swin-transformer joint source-channel codec with SNR-aware enhancement
modules, a Rayleigh channel simulator with pilot-based ML estimation refined
by a residual denoising CNN, zero-forcing compensation, joint pruning and
quantization for deployment, and an evaluation harness producing
PSNR / MS-SSIM versus SNR curves.
"""

from .channel import (
    make_pilots,
    sample_rayleigh,
    seeded_generator,
    snr_to_noise_var,
    transmit,
)
from .ceac import DnCNN, dncnn_loss, equalize, ml_estimate, refine_estimates
from .codec import (
    PatchDivide,
    PatchEmbed,
    PatchMerge,
    StageConfig,
    SwinBlock,
    SwinDecoder,
    SwinEncoder,
    power_normalize,
    rate_to_channels,
    unpack_symbols,
)
from .compression import (
    CompressedModel,
    compress,
    prune_accounting,
    prune_weights,
    quantize_activations,
    quantize_weights,
    report_model_stats,
    threshold_from_sparsity,
)
from .metrics import code_rate, ms_ssim, ms_ssim_db, mse_distortion, psnr
from .snr_adapt import Excitation, SnrAwareModule, SnrMapper, global_pool, rescale
from .system import SwinSIT, VARIANTS
from .training import (
    ResultRow,
    TrainConfig,
    build_variant,
    evaluate,
    load_checkpoint,
    sample_snr,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

"""Neighborhood attention filtering for guided feature upsampling.

Tensors are plain ``(H, W, C)`` numpy arrays. The main entry points are
:func:`naf_forward` (upsampling), :func:`init_encoder` / :func:`encode`
(guidance), :func:`train` (desk-scale training) and
:func:`denoise_forward` (same-resolution filtering).
"""

__version__ = "0.1.0"

from .attention import (
    AttnConfig,
    attention_logits,
    attention_weights,
    compute_keys,
    dense_reference,
    naf_backward,
    naf_forward,
    naf_value_and_grad,
    neighborhood,
)
from .encoder import (
    EncoderParams,
    encode,
    encode_backward,
    init_encoder,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .errors import (
    BoundsError,
    ConfigError,
    FormatError,
    NAFError,
    ShapeError,
    TrainingDiverged,
    UnsupportedTensorError,
)
from .filters import BilateralConfig, jbf, jbu, upsample_resize
from .flops import bench_throughput, flops_estimate, measure_speedup
from .restoration import (
    NoiseSpec,
    add_channel_salt_pepper,
    add_gaussian_noise,
    denoise_forward,
    psnr,
    restoration_loss,
    ssim,
    train_denoiser,
)
from .rope import RopeConfig, apply_rope, phase_angles, relative_phase, wavelengths
from .spectral import channel_decomposition, export_attention_map, mean_trig_maps, polar_form, pooled_score
from .tensor import (
    ConvSpec,
    block_avg_pool,
    block_max_pool,
    conv2d_forward,
    load_npy,
    load_png,
    resize,
    save_npy,
    save_png,
)
from .training import (
    Stage,
    SyntheticImages,
    SyntheticTeacher,
    TrainConfig,
    evaluate_upsampler,
    grad_check,
    initial_loss,
    make_pair,
    smoothed,
    teacher_features,
    train,
)

"""Train a small denoiser and compare noisy and filtered images.

Run from the repository root:  python demos/denoise.py
"""

from naf.restoration import NoiseSpec, denoiser_train_config, evaluate_denoiser, train_denoiser
from naf.training import Stage, SyntheticImages

source = SyntheticImages(seed=0)
# A shortened run; the test suite uses 1000 iterations.
cfg = denoiser_train_config(stages=[Stage(100, 64, (64,))])

for noise in (NoiseSpec("gaussian", 0.1), NoiseSpec("channel_salt_pepper", 0.1)):
    res = train_denoiser(cfg, noise, source)
    m = evaluate_denoiser(res.params, cfg, noise, source, n_images=4, sigma=res.sigma)
    print(f"{noise.kind} {noise.level}")
    print(f"  PSNR {m['psnr_noisy']:.2f} -> {m['psnr_denoised']:.2f} dB")
    print(f"  SSIM {m['ssim_noisy']:.4f} -> {m['ssim_denoised']:.4f}")

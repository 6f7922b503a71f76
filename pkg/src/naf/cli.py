"""Command-line interface.

Every command resolves its settings as flags > ``--config`` JSON > defaults,
runs, and writes a run manifest next to its outputs. ``naf replay
<manifest>`` re-runs a command from the resolved settings recorded there.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .errors import NAFError

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# Defaults per command; argparse defaults stay None so that a missing flag can
# fall back to the config file.
DEFAULTS = {
    "upsample": dict(features=None, image=None, weights=None, scale="auto", kernel=None, pos=None, keys=None,
                     out=None),
    "train": dict(task="upsample", images=None, seed=None, out=None, iterations=None, size=64, input_sizes="32",
                  stage2_iterations=None, stage2_size=128, stage2_input_sizes="32,64", batch=1, lr=1e-3,
                  depth=1, channels=32, kernel=None, pos="rope", keys="avgpool", sigma=1.0, rope_base=100.0,
                  teacher_patch=8, teacher_dim=16, noise="gaussian", level=0.1),
    "denoise": dict(image=None, weights=None, out=None, noise="gaussian", level=0.1, seed=None, kernel=None),
    "analyze": dict(image=None, weights=None, seed=None, map=None, scale=1, kernel=None, pos=None, keys=None,
                    out=None, trig_window=None, trig_channels=256, trig_base=100.0),
    "filter": dict(method=None, signal=None, guidance=None, scale=1, sigma_s=1.0, sigma_r=0.1, radius=4, out=None),
    "flops": dict(lr_h=28, lr_w=28, scale=16, kernel=9, channels=256, depth=2, dim=384, out=None),
    "bench": dict(sizes="8x8,16x16", scale=2, kernel=3, repeats=5, channels=32, dim=32, seed=None, out=None,
                  speedup=False),
}

REQUIRED = {
    "upsample": ("features", "image", "weights", "out"),
    "train": ("seed", "out"),
    "denoise": ("image", "weights", "out", "seed"),
    "analyze": ("image", "map", "out"),
    "filter": ("method", "signal", "guidance", "out"),
    "flops": (),
    "bench": ("seed",),
}


def _add_common(p):
    p.add_argument("--config", help="JSON file of settings (flags take precedence)")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")


def build_parser():
    parser = _Parser(prog="naf", description="Neighborhood attention feature upsampling and filtering.")
    parser.add_argument("--version", action="version", version=f"naf {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("upsample", help="upsample an LR feature map guided by an image")
    p.add_argument("--features", help="input features, NPY (h, w, d)")
    p.add_argument("--image", help="guidance image, PNG")
    p.add_argument("--weights", help="checkpoint directory")
    p.add_argument("--scale", help="'auto' or an integer factor")
    p.add_argument("--kernel", type=int, help="window size k (default: from checkpoint)")
    p.add_argument("--pos", choices=["rope", "gaussian", "manhattan", "none"])
    p.add_argument("--keys", choices=["avgpool", "maxpool", "bilinear"])
    p.add_argument("--out", help="output NPY")

    p = sub.add_parser("train", help="train the guidance encoder at desk scale")
    p.add_argument("--task", choices=["upsample", "denoise"])
    p.add_argument("--images", help="directory of PNGs (default: synthetic generator)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="checkpoint directory")
    p.add_argument("--iterations", type=int, help="stage-1 iterations (default 500, or 1000 for denoise)")
    p.add_argument("--size", type=int, help="stage-1 target image size")
    p.add_argument("--input-sizes", help="comma-separated stage-1 input image sizes")
    p.add_argument("--stage2-iterations", type=int, help="stage-2 iterations (default 10%% of stage 1)")
    p.add_argument("--stage2-size", type=int)
    p.add_argument("--stage2-input-sizes")
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--depth", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--kernel", type=int, help="window size (default 3, or 7 for denoise)")
    p.add_argument("--pos", choices=["rope", "gaussian", "manhattan", "none"])
    p.add_argument("--keys", choices=["avgpool", "maxpool", "bilinear"])
    p.add_argument("--sigma", type=float)
    p.add_argument("--rope-base", type=float)
    p.add_argument("--teacher-patch", type=int)
    p.add_argument("--teacher-dim", type=int)
    p.add_argument("--noise", choices=["gaussian", "channel_salt_pepper"])
    p.add_argument("--level", type=float)

    p = sub.add_parser("denoise", help="corrupt a clean PNG, denoise it and report metrics")
    p.add_argument("--image", help="clean image, PNG")
    p.add_argument("--weights", help="checkpoint directory")
    p.add_argument("--out", help="denoised PNG (the noisy input is written next to it)")
    p.add_argument("--noise", choices=["gaussian", "channel_salt_pepper"])
    p.add_argument("--level", type=float, help="sigma or corruption probability; 0 treats the input as noisy")
    p.add_argument("--seed", type=int)
    p.add_argument("--kernel", type=int)

    p = sub.add_parser("analyze", help="export an attention map and RoPE trig maps")
    p.add_argument("--image", help="guidance image, PNG")
    p.add_argument("--weights", help="checkpoint directory (default: random init, needs --seed)")
    p.add_argument("--seed", type=int)
    p.add_argument("--map", help="query position as p=ROW,COL")
    p.add_argument("--scale", type=int)
    p.add_argument("--kernel", type=int)
    p.add_argument("--pos", choices=["rope", "gaussian", "manhattan", "none"])
    p.add_argument("--keys", choices=["avgpool", "maxpool", "bilinear"])
    p.add_argument("--out", help="output stem; writes <stem>.npy and <stem>.png")
    p.add_argument("--trig-window", type=int, help="also write mean cos/sin maps of this odd size")
    p.add_argument("--trig-channels", type=int)
    p.add_argument("--trig-base", type=float)

    p = sub.add_parser("filter", help="classical filters and resampling baselines")
    p.add_argument("--method", choices=["jbf", "jbu", "nearest", "bilinear", "bicubic"])
    p.add_argument("--signal", help="signal, NPY or PNG")
    p.add_argument("--guidance", help="guidance, NPY or PNG")
    p.add_argument("--scale", type=int)
    p.add_argument("--sigma-s", type=float)
    p.add_argument("--sigma-r", type=float)
    p.add_argument("--radius", type=int)
    p.add_argument("--out", help="output NPY")

    p = sub.add_parser("flops", help="analytic FLOP breakdown")
    p.add_argument("--lr-h", type=int)
    p.add_argument("--lr-w", type=int)
    p.add_argument("--scale", type=int)
    p.add_argument("--kernel", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--out", help="optional JSON output")

    p = sub.add_parser("bench", help="wall-time benchmark of the upsampler")
    p.add_argument("--sizes", help="comma-separated LR sizes, e.g. 8x8,16x16")
    p.add_argument("--scale", type=int)
    p.add_argument("--kernel", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="CSV output (default: stdout)")
    p.add_argument("--speedup", action="store_true", default=None,
                   help="also time the dense oracle at 28x28 LR, x8, k=9")

    for name in DEFAULTS:
        _add_common(sub.choices[name])

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--threads", type=int, default=None)
    return parser


def resolve(command, args):
    """Merge flags, config file and defaults into one settings dict."""
    conf = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                conf = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(conf) - set(DEFAULTS[command])
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
    settings = {}
    for key, default in DEFAULTS[command].items():
        flag = getattr(args, key, None)
        settings[key] = flag if flag is not None else conf.get(key, default)
    missing = [k for k in REQUIRED[command] if settings[k] is None]
    if missing:
        raise UsageError(f"{command}: missing required setting(s): " + ", ".join("--" + m.replace("_", "-")
                                                                               for m in missing))
    return settings


def manifest_path(out):
    if os.path.isdir(out):
        return os.path.join(out, "run_manifest.json")
    return os.path.splitext(out)[0] + ".manifest.json"


def write_manifest(command, settings, outputs, extra=None):
    manifest = {
        "command": command,
        "config": settings,
        "seed": settings.get("seed"),
        "inputs": {k: settings[k] for k in ("features", "image", "weights", "images", "signal", "guidance")
                   if settings.get(k) is not None},
        "outputs": outputs,
        "version": __version__,
    }
    if extra:
        manifest.update(extra)
    path = manifest_path(outputs[0])
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def _ints(text):
    try:
        return tuple(int(v) for v in str(text).split(","))
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _load_any(path):
    from .tensor import load_npy, load_png

    return load_png(path) if path.lower().endswith(".png") else load_npy(path)


def _attn_from(settings, manifest, scale):
    from .attention import AttnConfig

    kernel = settings.get("kernel") or manifest.get("kernel_size", 9)
    pos = settings.get("pos") or manifest.get("positional_mode", "rope")
    keys = settings.get("keys") or manifest.get("key_mode", "avgpool")
    settings.update(kernel=kernel, pos=pos, keys=keys)
    return AttnConfig(scale, kernel, pos, keys, sigma=manifest.get("sigma", 1.0))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def run_upsample(s):
    from .attention import naf_forward
    from .encoder import load_checkpoint
    from .rope import RopeConfig
    from .tensor import load_npy, load_png, resize, save_npy

    feats = load_npy(s["features"])
    image = load_png(s["image"])
    enc, manifest = load_checkpoint(s["weights"])
    h, w, _ = feats.shape
    H, W, _ = image.shape
    if s["scale"] == "auto":
        scale = min(H // h, W // w)
        if scale < 1:
            raise NAFError(f"image {(H, W)} is smaller than the feature map {(h, w)}")
        final = (H, W)
    else:
        try:
            scale = int(s["scale"])
        except ValueError as exc:
            raise UsageError(f"--scale must be 'auto' or an integer, got {s['scale']!r}") from exc
        if scale < 1:
            raise UsageError("--scale must be >= 1")
        final = (h * scale, w * scale)
    cfg = _attn_from(s, manifest, scale)
    steps = [f"naf x{scale} to {h * scale}x{w * scale}"]
    guide = image
    if (H, W) != (h * scale, w * scale):
        guide = resize(image, h * scale, w * scale, "bilinear")
        steps.insert(0, f"bilinear guidance resize {H}x{W} to {h * scale}x{w * scale}")
    rope = RopeConfig(enc.channels, h * scale, w * scale, manifest.get("rope_base", 100.0))
    out = naf_forward(feats, guide, enc, rope, cfg)
    if out.shape[:2] != final:
        out = resize(out, final[0], final[1], "bilinear")
        steps.append(f"bilinear resize {h * scale}x{w * scale} to {final[0]}x{final[1]}")
    save_npy(out.astype(np.float32), s["out"])
    write_manifest("upsample", s, [s["out"]], {"steps": steps, "scale": scale})
    print(f"wrote {s['out']} shape={out.shape} steps={'; '.join(steps)}")


def run_train(s):
    from .restoration import NoiseSpec, train_denoiser
    from .training import Stage, SyntheticImages, SyntheticTeacher, TrainConfig, train

    denoise = s["task"] == "denoise"
    iters = s["iterations"] if s["iterations"] is not None else (1000 if denoise else 500)
    stages = [Stage(iters, s["size"], (s["size"],) if denoise else _ints(s["input_sizes"]))]
    stage2 = s["stage2_iterations"] if s["stage2_iterations"] is not None else (0 if denoise else iters // 10)
    if stage2 > 0:
        size2 = s["stage2_size"]
        stages.append(Stage(stage2, size2, (size2,) if denoise else _ints(s["stage2_input_sizes"])))
    kernel = s["kernel"] or (7 if denoise else 3)
    s.update(iterations=iters, stage2_iterations=stage2, kernel=kernel)
    config = TrainConfig(stages=stages, batch_size=s["batch"], lr=s["lr"], seed=s["seed"], depth=s["depth"],
                         channels=s["channels"], kernel=kernel, rope_base=s["rope_base"], positional_mode=s["pos"],
                         key_mode=s["keys"], sigma=s["sigma"])
    source = s["images"] if s["images"] else SyntheticImages(s["seed"])
    os.makedirs(s["out"], exist_ok=True)
    log = os.path.join(s["out"], "train_log.csv")
    if denoise:
        noise = NoiseSpec(s["noise"], s["level"], seed=s["seed"])
        res = train_denoiser(config, noise, source, log=log, checkpoint_dir=s["out"])
    else:
        teacher = SyntheticTeacher(s["teacher_patch"], s["teacher_dim"], s["seed"])
        res = train(config, teacher, source, log=log, checkpoint_dir=s["out"])
    write_manifest("train", s, [s["out"], log])
    print(f"trained {len(res.losses)} iterations; first loss {res.losses[0]:.6g}, last loss {res.losses[-1]:.6g}")


def run_denoise(s):
    from .encoder import load_checkpoint
    from .restoration import NoiseSpec, corrupt, denoise_forward, psnr, ssim
    from .rope import RopeConfig
    from .tensor import load_png, save_png

    clean = load_png(s["image"])
    enc, manifest = load_checkpoint(s["weights"])
    s["kernel"] = s["kernel"] or manifest.get("kernel_size", 15)
    cfg = _attn_from({"kernel": s["kernel"]}, manifest, 1)
    noisy = clean if s["level"] == 0 else corrupt(clean, NoiseSpec(s["noise"], s["level"], seed=s["seed"]))
    rope = RopeConfig(enc.channels, clean.shape[0], clean.shape[1], manifest.get("rope_base", 100.0))
    out = denoise_forward(noisy, enc, rope, cfg)
    noisy_path = os.path.splitext(s["out"])[0] + "_noisy.png"
    save_png(out, s["out"])
    save_png(noisy, noisy_path)
    write_manifest("denoise", s, [s["out"], noisy_path])
    if s["level"] != 0:
        print(f"noisy    PSNR={psnr(noisy, clean):.4f} SSIM={ssim(noisy, clean):.6f}")
        print(f"denoised PSNR={psnr(out, clean):.4f} SSIM={ssim(out, clean):.6f}")


def _position(text):
    body = text[2:] if text.startswith("p=") else text
    try:
        r, c = (int(v) for v in body.split(","))
    except ValueError as exc:
        raise UsageError(f"--map expects p=ROW,COL, got {text!r}") from exc
    return r, c


def run_analyze(s):
    from .encoder import init_encoder, load_checkpoint
    from .rope import RopeConfig
    from .spectral import export_attention_map, mean_trig_maps
    from .tensor import load_png, save_npy

    image = load_png(s["image"])
    if s["weights"]:
        enc, manifest = load_checkpoint(s["weights"])
    else:
        if s["seed"] is None:
            raise UsageError("analyze without --weights uses a random encoder and needs --seed")
        enc, manifest = init_encoder(1, 32, s["seed"]), {}
    cfg = _attn_from(s, manifest, s["scale"])
    p = _position(s["map"])
    rope = RopeConfig(enc.channels, image.shape[0], image.shape[1], manifest.get("rope_base", 100.0))
    weights = export_attention_map(image, enc, rope, cfg, p, s["out"])
    stem = os.path.splitext(s["out"])[0]
    outputs = [stem + ".npy", stem + ".png"]
    if s["trig_window"]:
        trig = RopeConfig(s["trig_channels"], image.shape[0], image.shape[1], s["trig_base"])
        cos_map, sin_map = mean_trig_maps(trig, s["trig_window"], stride=s["scale"])
        save_npy(cos_map[:, :, None], stem + "_cos.npy")
        save_npy(sin_map[:, :, None], stem + "_sin.npy")
        outputs += [stem + "_cos.npy", stem + "_sin.npy"]
    write_manifest("analyze", s, outputs)
    print(f"attention map at {p}: {weights.shape[0]}x{weights.shape[1]}, sum={weights.sum():.6f}, "
          f"max={weights.max():.6f}")


def run_filter(s):
    from .filters import BilateralConfig, jbf, jbu, upsample_resize
    from .tensor import save_npy

    signal = _load_any(s["signal"])
    guidance = _load_any(s["guidance"])
    cfg = BilateralConfig(s["sigma_s"], s["sigma_r"], s["radius"])
    if s["method"] == "jbf":
        out = jbf(signal, guidance, cfg)
    elif s["method"] == "jbu":
        out = jbu(signal, guidance, s["scale"], cfg)
    else:
        out = upsample_resize(signal, s["scale"], s["method"])
    save_npy(out, s["out"])
    write_manifest("filter", s, [s["out"]])
    print(f"wrote {s['out']} shape={out.shape}")


def run_flops(s):
    from .attention import AttnConfig
    from .encoder import init_encoder
    from .flops import flops_estimate

    est = flops_estimate(AttnConfig(s["scale"], s["kernel"]), init_encoder(s["depth"], s["channels"]),
                         s["lr_h"], s["lr_w"], s["dim"])
    for key, value in est.items():
        if key == "logits_ratio":
            print(f"{key:18s} {value.numerator}/{value.denominator}")
        else:
            print(f"{key:18s} {value / 1e9:12.4f} GFLOP")
    if s["out"]:
        data = {k: (str(v) if k == "logits_ratio" else v) for k, v in est.items()}
        with open(s["out"], "w") as f:
            json.dump(data, f, indent=2)
        write_manifest("flops", s, [s["out"]])


def run_bench(s):
    from .attention import AttnConfig
    from .flops import bench_throughput, measure_speedup, peak_rss_mb

    if s["repeats"] < 5:
        raise UsageError(f"--repeats must be >= 5, got {s['repeats']}")
    try:
        sizes = [tuple(int(v) for v in item.split("x")) for item in s["sizes"].split(",")]
    except ValueError as exc:
        raise UsageError(f"--sizes expects e.g. 8x8,16x16, got {s['sizes']!r}") from exc
    text = bench_throughput(AttnConfig(s["scale"], s["kernel"]), sizes, s["repeats"], s["channels"], s["dim"],
                            s["seed"])
    if s["out"]:
        with open(s["out"], "w") as f:
            f.write(text)
        write_manifest("bench", s, [s["out"]])
    else:
        sys.stdout.write(text)
    if s["speedup"]:
        r = measure_speedup(seed=s["seed"])
        print(f"neighborhood {r['neighborhood_s']:.4f}s dense {r['dense_s']:.4f}s speedup {r['speedup']:.2f}x")
    print(f"peak RSS {peak_rss_mb():.1f} MiB")


COMMANDS = {
    "upsample": run_upsample,
    "train": run_train,
    "denoise": run_denoise,
    "analyze": run_analyze,
    "filter": run_filter,
    "flops": run_flops,
    "bench": run_bench,
}


def replay(path):
    try:
        with open(path) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise NAFError(f"cannot read manifest {path}: {exc}") from exc
    command = manifest.get("command")
    if command not in COMMANDS:
        raise NAFError(f"manifest {path} names unknown command {command!r}")
    settings = dict(DEFAULTS[command])
    settings.update(manifest["config"])
    COMMANDS[command](settings)


def _limit_threads(n):
    if n is None:
        return None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        limiter = _limit_threads(args.threads)
        try:
            if args.command == "replay":
                replay(args.manifest)
            else:
                COMMANDS[args.command](resolve(args.command, args))
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except UsageError as exc:
        print(f"naf: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NAFError, ValueError, OSError) as exc:
        print(f"naf: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line orchestration: synth / train / eval / sample / ablate.

Every command resolves its flags against an optional key=value config file
('#' comments allowed), writes the frozen resolved config next to its
outputs, and can be rerun bit-identically from that frozen copy.

Exit codes: 0 success, 2 usage/config error, 3 data or format error,
4 divergence abort.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path

# honor the worker cap before numpy spins up its thread pools
_cap = os.environ.get("NOISYLAB_THREADS")
if _cap:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _cap)


@dataclass(frozen=True)
class Opt:
    name: str
    type: type
    default: object
    help: str


_TRAIN_OPTS = [
    Opt("mode", str, "cross", "loss mode: cross|self|r2r|n2n|supervised|supervised-nf"),
    Opt("noise-model", str, "noiseflow", "noise model: awgn|nlf|noiseflow"),
    Opt("denoiser", str, "dncnn9", "denoiser: dncnn9|unet"),
    Opt("lambda", float, float(2 ** 18), "weight of the paired squared-error term"),
    Opt("epochs", int, 50, "training epochs"),
    Opt("data", str, None, "NPDS dataset path"),
    Opt("out", str, None, "output directory"),
    Opt("seed", int, 0, "global RNG seed"),
    Opt("batch-size", int, 128, "pairs per optimizer step"),
    Opt("schedule", str, "joint", "lr schedule: supervised|joint|const:<value>"),
    Opt("width", int, 64, "denoiser channel width"),
    Opt("blocks", int, 1, "flow blocks (noiseflow only)"),
    Opt("hidden", int, 16, "coupling subnet width (noiseflow only)"),
    Opt("pretrain-epochs", int, 0, "denoiser-only warmup epochs"),
    Opt("train-fraction", float, 0.7, "scene fraction assigned to training"),
    Opt("eval-cap", int, 2000, "max held-out patches per evaluation"),
    Opt("eval-every", int, 1, "evaluate every N epochs"),
    Opt("checkpoint-every", int, 0, "checkpoint cadence in epochs (0 = final only)"),
    Opt("divergence-floor", float, -8.0, "abort when the likelihood NLL/dim falls below this"),
    Opt("r2r-alpha", float, 0.5, "scale of the recorruption noise (r2r mode)"),
]

OPTIONS: dict[str, list[Opt]] = {
    "synth": [
        Opt("beta1", float, 1e-2, "signal-dependent variance slope"),
        Opt("beta2", float, 1e-4, "signal-independent variance floor"),
        Opt("camera", str, "cam0", "camera id tag"),
        Opt("iso", int, 800, "ISO level (100|400|800|1600|3200)"),
        Opt("pairs", int, 5000, "number of noisy pairs"),
        Opt("channels", int, 1, "channels per patch"),
        Opt("seed", int, 0, "generator seed"),
        Opt("out", str, None, "output dataset path (.npds)"),
    ],
    "train": _TRAIN_OPTS,
    "eval": [
        Opt("ckpt", str, None, "NLAB checkpoint path"),
        Opt("data", str, None, "NPDS dataset path"),
        Opt("report", str, None, "output CSV path"),
        Opt("seed", int, 0, "sampling seed for the KL metric"),
    ],
    "sample": [
        Opt("ckpt", str, None, "NLAB checkpoint path"),
        Opt("clean-source", str, None, "NPDS dataset path, or 'synthetic'"),
        Opt("n", int, 4, "number of sample grids"),
        Opt("seed", int, 0, "sampling seed"),
        Opt("out", str, None, "output directory"),
    ],
    "ablate": _TRAIN_OPTS + [
        Opt("sweep", str, "lambda", "parameter to sweep (lambda)"),
        Opt("values", str, None, "comma-separated sweep values"),
    ],
}

_REQUIRED = {
    "synth": ("out",),
    "train": ("data", "out"),
    "eval": ("ckpt", "data", "report"),
    "sample": ("ckpt", "clean_source", "out"),
    "ablate": ("data", "out", "values"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noisylab",
        description="Joint camera-noise modeling and denoising from noisy pairs.")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", type=str, default=None,
                       help="key=value config file supplying flag defaults")
        for o in opts:
            p.add_argument(f"--{o.name}", dest=o.name.replace("-", "_"),
                           type=o.type, default=None, help=o.help)
    return parser


def _read_config_file(path: str) -> dict[str, str]:
    from .errors import ConfigError
    out = {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge CLI flags over config-file values over declared defaults."""
    from .errors import ConfigError
    cmd = args.command
    file_vals = _read_config_file(args.config) if args.config else {}
    if "command" in file_vals and file_vals["command"] != cmd:
        raise ConfigError(
            f"config file was frozen for '{file_vals['command']}', not '{cmd}'")
    resolved = {"command": cmd}
    for o in OPTIONS[cmd]:
        key = o.name.replace("-", "_")
        cli_val = getattr(args, key)
        if cli_val is not None:
            resolved[key] = cli_val
        elif o.name in file_vals or key in file_vals:
            raw = file_vals.get(o.name, file_vals.get(key))
            try:
                resolved[key] = o.type(raw)
            except ValueError:
                raise ConfigError(f"config key {o.name!r}: cannot parse {raw!r} as {o.type.__name__}")
        else:
            resolved[key] = o.default
    for key in _REQUIRED[cmd]:
        if resolved.get(key) is None:
            raise ConfigError(f"missing required option --{key.replace('_', '-')}")
    return resolved


def write_frozen_config(resolved: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"command={resolved['command']}"]
    for key in sorted(k for k in resolved if k != "command"):
        value = resolved[key]
        if value is not None:
            lines.append(f"{key.replace('_', '-')}={value}")
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: dict) -> int:
    from .data import synth_hgn_dataset, write_dataset
    out = Path(cfg["out"])
    dataset = synth_hgn_dataset(cfg["beta1"], cfg["beta2"], cfg["camera"], cfg["iso"],
                                cfg["pairs"], cfg["seed"], channels=cfg["channels"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, dataset)
    write_frozen_config(cfg, out.with_suffix(out.suffix + ".config.txt"))
    print(f"wrote {len(dataset)} pairs to {out}")
    return 0


def _build_models(cfg: dict, dataset, dtype):
    import numpy as np

    from .denoise import build_denoiser
    from .noisemodels import build_noise_model

    isos = sorted({p.meta.iso for p in dataset.pairs})
    cams = sorted({p.meta.camera_id for p in dataset.pairs})
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg["seed"], 7])))
    noise_model = build_noise_model(cfg["noise_model"], dataset.channels, isos, cams,
                                    blocks=cfg["blocks"], hidden=cfg["hidden"],
                                    seed=cfg["seed"], dtype=dtype)
    denoiser = build_denoiser(cfg["denoiser"], dataset.channels, cfg["width"], rng, dtype)
    return noise_model, denoiser


def _train_config(cfg: dict):
    from .train import JointConfig
    return JointConfig(
        mode=cfg["mode"], lambda_weight=cfg["lambda"], epochs=cfg["epochs"],
        batch_size=cfg["batch_size"], schedule=cfg["schedule"], seed=cfg["seed"],
        train_fraction=cfg["train_fraction"], pretrain_epochs=cfg["pretrain_epochs"],
        eval_cap=cfg["eval_cap"], eval_every=cfg["eval_every"],
        checkpoint_every=cfg["checkpoint_every"],
        divergence_floor=cfg["divergence_floor"], r2r_alpha=cfg["r2r_alpha"])


def _model_param_summary(noise_model) -> dict:
    import numpy as np
    out = {}
    if noise_model is None:
        return out
    if noise_model.kind == "awgn":
        out["sigma"] = noise_model.sigma
    elif noise_model.kind == "nlf":
        out["beta1"] = noise_model.beta1
        out["beta2"] = noise_model.beta2
    else:
        for name, p in noise_model.parameters().items():
            if name.endswith("log_beta1"):
                out["beta1"] = float(np.exp(p.data))
            elif name.endswith("log_beta2"):
                out["beta2"] = float(np.exp(p.data))
    return out


def cmd_train(cfg: dict) -> int:
    import numpy as np

    from .data import read_dataset
    from .train import train_joint

    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_frozen_config(cfg, out_dir / "config.txt")
    dataset = read_dataset(cfg["data"])
    noise_model, denoiser = _build_models(cfg, dataset, np.float32)
    if cfg["mode"] in ("n2n", "supervised"):
        noise_model = None
    result = train_joint(_train_config(cfg), dataset, noise_model, denoiser,
                         out_dir=out_dir,
                         log=lambda s: print(f"epoch {s.epoch}: loss={s.train_loss:.5g} "
                                             f"nll/dim={s.eval_nll_per_dim:.4f} "
                                             f"psnr={s.eval_psnr:.2f}"))
    summary = {"diverged": int(result.diverged)}
    if result.divergence_epoch is not None:
        summary["divergence_epoch"] = result.divergence_epoch
        summary["divergence_reason"] = result.divergence_reason
    if result.history:
        last = result.history[-1]
        summary.update(final_epoch=last.epoch, final_train_loss=last.train_loss,
                       final_nll_per_dim=last.eval_nll_per_dim, final_kl=last.eval_kl,
                       final_psnr=last.eval_psnr, final_ssim=last.eval_ssim)
    summary.update(_model_param_summary(noise_model))
    with open(out_dir / "summary.txt", "w") as f:
        for k, v in summary.items():
            f.write(f"{k}={v}\n")
    if result.diverged:
        print(f"diverged at epoch {result.divergence_epoch}: {result.divergence_reason}",
              file=sys.stderr)
        return 4
    return 0


def cmd_eval(cfg: dict) -> int:
    import numpy as np

    from . import metrics
    from .errors import FormatError
    from .data import read_dataset
    from .noisemodels import nll_per_dim
    from .engine import Tensor
    from .train import load_train_checkpoint, _stack_pairs, _encode_meta, _chunked_denoise

    ckpt = Path(cfg["ckpt"])
    if not ckpt.exists():
        raise FormatError(f"checkpoint not found: {ckpt}")
    noise_model, denoiser, _, _ = load_train_checkpoint(ckpt)
    dataset = read_dataset(cfg["data"])
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg["seed"], 11])))

    strata: dict[tuple, list] = {}
    for p in dataset.pairs:
        strata.setdefault((p.meta.camera_id, p.meta.iso, p.meta.scene_id), []).append(p)

    def row_for(key, pairs):
        a, b, clean, metas = _stack_pairs(pairs)
        meta = _encode_meta(noise_model, metas) if noise_model is not None else None
        nll = kl = psnr_v = ssim_v = float("nan")
        denoised = _chunked_denoise(denoiser, a) if denoiser is not None else None
        if clean is not None:
            if noise_model is not None:
                nll = float(nll_per_dim(noise_model, a, Tensor(clean), meta).data)
                sampled = noise_model.sample(clean, meta, rng)
                kl = metrics.kl_divergence(metrics.noise_histogram(a, clean),
                                           metrics.noise_histogram(sampled, clean))
            if denoised is not None:
                psnr_v = float(np.mean([metrics.psnr(denoised[i], clean[i])
                                        for i in range(len(pairs))]))
                ssim_v = float(np.mean([metrics.ssim(denoised[i], clean[i])
                                        for i in range(len(pairs))]))
        return metrics.MetricsRow(key[0], key[1], key[2], len(pairs), nll, kl, psnr_v, ssim_v)

    rows = [row_for(k, v) for k, v in sorted(strata.items())]
    rows.append(row_for(("ALL", 0, "ALL"), dataset.pairs))

    report = Path(cfg["report"])
    report.parent.mkdir(parents=True, exist_ok=True)
    hist_note = (f"# histogram: bins={metrics.HIST_BINS} range=[-{metrics.HIST_RANGE},"
                 f"{metrics.HIST_RANGE}] eps={metrics.HIST_EPS}")
    report.write_text("\n".join([hist_note, metrics.MetricsRow.HEADER]
                                + [r.as_csv() for r in rows]) + "\n")
    write_frozen_config(cfg, report.with_suffix(report.suffix + ".config.txt"))
    print(f"wrote {len(rows)} rows to {report}")
    return 0


def _to_image(arr) -> "object":
    """Map a (C,H,W) patch to an 8-bit PIL image (grayscale or RGB)."""
    import numpy as np
    from PIL import Image

    arr = np.asarray(arr, dtype=np.float32)
    if arr.shape[0] == 1:
        img = arr[0]
        mode = "L"
    elif arr.shape[0] >= 3:
        # raw 4-plane layout: average the two green planes into one channel
        if arr.shape[0] == 4:
            img = np.stack([arr[0], 0.5 * (arr[1] + arr[2]), arr[3]], axis=-1)
        else:
            img = np.moveaxis(arr[:3], 0, -1)
        mode = "RGB"
    else:
        img = arr.mean(axis=0)
        mode = "L"
    img = np.clip(img * 255.0, 0, 255).astype(np.uint8)
    return Image.fromarray(img, mode=mode)


def cmd_sample(cfg: dict) -> int:
    import numpy as np
    from PIL import Image

    from .errors import ConfigError, FormatError
    from .data import read_dataset, smooth_clean_patches
    from .train import load_train_checkpoint, _encode_meta

    ckpt = Path(cfg["ckpt"])
    if not ckpt.exists():
        raise FormatError(f"checkpoint not found: {ckpt}")
    noise_model, _, _, _ = load_train_checkpoint(ckpt)
    if noise_model is None:
        raise FormatError(f"{ckpt} holds no noise model to sample from")
    if cfg["n"] < 1:
        raise ConfigError(f"--n must be >= 1, got {cfg['n']}")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg["seed"], 13])))
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_frozen_config(cfg, out_dir / "config.txt")

    real_noisy = None
    if cfg["clean_source"] == "synthetic":
        from .data import SceneMeta
        tables = getattr(noise_model, "tables", None)
        iso = tables.iso_values[0] if tables and tables.iso_values else 800
        cam = tables.camera_ids[0] if tables and tables.camera_ids else "cam0"
        channels = 4 if getattr(noise_model, "kind", "") == "noiseflow" else 1
        clean = smooth_clean_patches(cfg["n"], channels, rng)
        metas = [SceneMeta(cam, iso, 0)] * cfg["n"]
    else:
        dataset = read_dataset(cfg["clean_source"])
        with_clean = [p for p in dataset.pairs if p.clean is not None]
        if not with_clean:
            raise FormatError(f"{cfg['clean_source']} has no records with clean patches")
        picks = [with_clean[i] for i in rng.permutation(len(with_clean))[:cfg["n"]]]
        clean = np.stack([p.clean.data for p in picks])
        real_noisy = np.stack([p.a.data for p in picks])
        metas = [p.meta for p in picks]

    meta = _encode_meta(noise_model, metas)
    sampled = noise_model.sample(clean, meta, rng)
    np.savez(out_dir / "samples.npz", clean=clean,
             sampled=sampled, **({"real_noisy": real_noisy} if real_noisy is not None else {}))

    for i in range(cfg["n"]):
        cols = [clean[i]]
        if real_noisy is not None:
            cols.append(real_noisy[i])
        cols.append(sampled[i])
        if real_noisy is not None:
            cols.append(0.5 + 4.0 * (real_noisy[i] - clean[i]))  # noise maps, +-0.125 range
        cols.append(0.5 + 4.0 * (sampled[i] - clean[i]))
        tiles = [_to_image(c) for c in cols]
        w, h = tiles[0].size
        grid = Image.new(tiles[0].mode, (w * len(tiles) + len(tiles) - 1, h), 255)
        for j, tile in enumerate(tiles):
            grid.paste(tile, (j * (w + 1), 0))
        grid.save(out_dir / f"grid_{i:03d}.png")
    print(f"wrote {cfg['n']} sample grids to {out_dir}")
    return 0


def cmd_ablate(cfg: dict) -> int:
    from .errors import ConfigError

    if cfg["sweep"] != "lambda":
        raise ConfigError(f"unsupported sweep parameter {cfg['sweep']!r}")
    raw = [v for v in str(cfg["values"]).split(",") if v.strip()]
    if not raw:
        raise ConfigError("empty sweep value list")
    try:
        values = [float(v) for v in raw]
    except ValueError:
        raise ConfigError(f"bad sweep values {cfg['values']!r}") from None

    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_frozen_config(cfg, out_dir / "config.txt")
    rows = ["lambda,final_nll_per_dim,final_psnr,diverged,divergence_epoch"]
    for value in values:
        sub = dict(cfg)
        sub["command"] = "train"
        sub["lambda"] = value
        sub["out"] = str(out_dir / f"lambda_{value:g}")
        sub.pop("sweep", None)
        sub.pop("values", None)
        code = cmd_train(sub)
        summary = {}
        for line in (Path(sub["out"]) / "summary.txt").read_text().splitlines():
            k, _, v = line.partition("=")
            summary[k] = v
        rows.append(f"{value:g},{summary.get('final_nll_per_dim', 'nan')},"
                    f"{summary.get('final_psnr', 'nan')},{int(code == 4)},"
                    f"{summary.get('divergence_epoch', '')}")
    (out_dir / "sweep.csv").write_text("\n".join(rows) + "\n")
    print(f"wrote sweep results to {out_dir / 'sweep.csv'}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    from .errors import ConfigError, DivergenceError, FormatError, UnknownKeyError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        resolved = resolve_config(args)
        return COMMANDS[args.command](resolved)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FormatError, UnknownKeyError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Joint training of a noise model and a denoiser from noisy pairs.

The loop owns an Adam optimizer over the parameters the mode actually
trains, evaluates on a fixed held-out scene split every epoch, writes a
per-epoch CSV, checkpoints on a cadence, and aborts early when the
likelihood term collapses (the degenerate identity-denoiser solution drives
it to minus infinity) or any parameter goes non-finite.

Per-epoch randomness derives from (seed, epoch), so a run resumed from a
checkpoint continues the exact trajectory of an uninterrupted run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses, metrics
from .checkpoint import decode_text, decode_u64, encode_text, encode_u64, read_archive, write_archive
from .data import PatchDataset, split_dataset
from .denoise import denoiser_from_descriptor
from .engine import GradTape, Tensor
from .errors import ConfigError, FormatError
from .losses import LOSS_MODES
from .noisemodels import model_from_descriptor, nll_per_dim
from .optim import Adam

_SALT_SHUFFLE = 101
_SALT_EVAL = 202
_SALT_R2R = 303


def lr_schedule(schedule_id: str, epoch: int) -> float:
    """Learning rate for an epoch.

    Ids: "supervised" (1e-3, 1e-4 from epoch 30, 5e-5 from 60), "joint"
    (constant 1e-4), "const:<value>", and "steps:<lr>x<n>,..." which holds
    each rate for n epochs and then stays at the last one.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if schedule_id == "supervised":
        if epoch < 30:
            return 1e-3
        if epoch < 60:
            return 1e-4
        return 5e-5
    if schedule_id == "joint":
        return 1e-4
    if schedule_id.startswith("const:"):
        try:
            return float(schedule_id.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad constant schedule {schedule_id!r}") from None
    if schedule_id.startswith("steps:"):
        try:
            segments = []
            for part in schedule_id.split(":", 1)[1].split(","):
                lr, n = part.split("x")
                segments.append((float(lr), int(n)))
            if not segments:
                raise ValueError
        except ValueError:
            raise ConfigError(f"bad step schedule {schedule_id!r}") from None
        for lr, n in segments:
            if epoch < n:
                return lr
            epoch -= n
        return segments[-1][0]
    raise ConfigError(f"unknown lr schedule {schedule_id!r}")


@dataclass
class JointConfig:
    mode: str = "cross"
    lambda_weight: float = float(2 ** 18)
    epochs: int = 50
    batch_size: int = 128
    schedule: str = "joint"
    seed: int = 0
    train_fraction: float = 0.7
    pretrain_epochs: int = 0
    eval_cap: int = 2000
    eval_every: int = 1
    checkpoint_every: int = 0
    divergence_floor: float = -8.0
    r2r_alpha: float = 0.5
    r2r_eval_draws: int = 8

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss mode {self.mode!r}; pick one of {LOSS_MODES}")
        if self.lambda_weight < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lambda_weight}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.r2r_alpha <= 0:
            raise ConfigError(f"r2r alpha must be > 0, got {self.r2r_alpha}")
        lr_schedule(self.schedule, 0)  # fail fast on bad ids


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    eval_nll_per_dim: float
    eval_kl: float
    eval_psnr: float
    eval_ssim: float
    wallclock_s: float

    CSV_HEADER = "epoch,lr,train_loss,eval_nll_per_dim,eval_kl,eval_psnr,eval_ssim,wallclock_s"

    def as_csv(self) -> str:
        def fmt(v):
            return "nan" if v is None or not np.isfinite(v) else f"{v:.8g}"
        return (f"{self.epoch},{self.lr:.8g},{fmt(self.train_loss)},"
                f"{fmt(self.eval_nll_per_dim)},{fmt(self.eval_kl)},{fmt(self.eval_psnr)},"
                f"{fmt(self.eval_ssim)},{self.wallclock_s:.3f}")


@dataclass
class TrainResult:
    history: list[EpochStats] = field(default_factory=list)
    diverged: bool = False
    divergence_epoch: int | None = None
    divergence_reason: str = ""
    noise_model: object = None
    denoiser: object = None
    adam: Adam | None = None


def _rng(seed: int, salt: int, epoch: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, salt, epoch])))


def _stack_pairs(pairs):
    a = np.stack([p.a.data for p in pairs])
    b = np.stack([p.b.data for p in pairs])
    clean = np.stack([p.clean.data for p in pairs]) if all(
        p.clean is not None for p in pairs) else None
    metas = [p.meta for p in pairs]
    return a, b, clean, metas


def _encode_meta(model, metas):
    encode = getattr(model, "encode_meta", None)
    return encode(metas) if encode is not None else None


def _slice_meta(meta, idx):
    if meta is None:
        return None
    from .noisemodels import MetaBatch
    return MetaBatch(meta.iso_idx[idx], meta.cam_idx[idx])


def _params_finite(params: dict[str, Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params.values())


def _chunked_denoise(denoiser, x: np.ndarray, chunk: int = 64) -> np.ndarray:
    outs = []
    for i in range(0, x.shape[0], chunk):
        outs.append(denoiser(Tensor(x[i:i + chunk])).data)
    return np.concatenate(outs)


def evaluate(noise_model, denoiser, a, b, clean, meta, rng,
             mode: str = "cross", r2r_alpha: float = 0.5,
             r2r_eval_draws: int = 8) -> dict:
    """Held-out metrics; falls back to the cross likelihood when clean is absent."""
    out = {"nll_per_dim": np.nan, "kl": np.nan, "psnr": np.nan, "ssim": np.nan}
    if mode == "r2r" and r2r_eval_draws > 0:
        acc = np.zeros_like(a)
        for _ in range(r2r_eval_draws):
            z = rng.standard_normal(a.shape).astype(np.float32)
            acc += _chunked_denoise(denoiser, a + r2r_alpha * z)
        denoised = acc / r2r_eval_draws
    else:
        denoised = _chunked_denoise(denoiser, a)

    if clean is not None:
        if noise_model is not None:
            out["nll_per_dim"] = float(nll_per_dim(noise_model, a, Tensor(clean), meta).data)
            sampled = noise_model.sample(clean, meta, rng)
            real_hist = metrics.noise_histogram(a, clean)
            model_hist = metrics.noise_histogram(sampled, clean)
            out["kl"] = metrics.kl_divergence(real_hist, model_hist)
        out["psnr"] = float(np.mean([metrics.psnr(denoised[i], clean[i])
                                     for i in range(clean.shape[0])]))
        out["ssim"] = float(np.mean([metrics.ssim(denoised[i], clean[i])
                                     for i in range(clean.shape[0])]))
    elif noise_model is not None:
        # no reference signal: score each image against its pair's estimate
        est = _chunked_denoise(denoiser, b)
        out["nll_per_dim"] = float(nll_per_dim(noise_model, a, Tensor(est), meta).data)
    return out


def _trainable_params(mode: str, noise_model, denoiser) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    if mode not in ("n2n", "supervised") and noise_model is not None:
        params.update({f"noise_model/{k}": p for k, p in noise_model.parameters().items()})
    if mode != "supervised-nf":
        params.update({f"denoiser/{k}": p for k, p in denoiser.parameters().items()})
    if not params:
        raise ConfigError(f"mode {mode!r} has nothing to train")
    return params


def train_joint(cfg: JointConfig, dataset: PatchDataset, noise_model, denoiser,
                out_dir=None, start_epoch: int = 0, adam: Adam | None = None,
                log=None) -> TrainResult:
    """Run the configured training mode over scene-split data.

    Returns a TrainResult whose `diverged` flag reports a tripped guard
    rather than raising, so sweep drivers can record the epoch and continue.
    """
    needs_clean = cfg.mode in ("supervised", "supervised-nf")
    if needs_clean and not dataset.has_clean():
        raise ConfigError(f"mode {cfg.mode!r} requires clean patches in every record")

    train_pairs, eval_pairs = split_dataset(dataset, cfg.train_fraction, cfg.seed)
    a_tr, b_tr, clean_tr, metas_tr = _stack_pairs(train_pairs)
    a_ev, b_ev, clean_ev, metas_ev = _stack_pairs(eval_pairs)
    sel = _rng(cfg.seed, _SALT_EVAL).permutation(len(eval_pairs))[:cfg.eval_cap]
    a_ev, b_ev = a_ev[sel], b_ev[sel]
    clean_ev = clean_ev[sel] if clean_ev is not None else None
    metas_ev = [metas_ev[i] for i in sel]

    meta_tr = _encode_meta(noise_model, metas_tr) if noise_model is not None else None
    meta_ev = _encode_meta(noise_model, metas_ev) if noise_model is not None else None

    if cfg.pretrain_epochs and start_epoch == 0 and cfg.mode not in ("n2n", "supervised-nf"):
        pre_cfg = JointConfig(mode="n2n", lambda_weight=1.0, epochs=cfg.pretrain_epochs,
                              batch_size=cfg.batch_size, schedule="supervised",
                              seed=cfg.seed + 1, train_fraction=cfg.train_fraction,
                              eval_cap=cfg.eval_cap, eval_every=0)
        train_joint(pre_cfg, dataset, None, denoiser)

    params = _trainable_params(cfg.mode, noise_model, denoiser)
    if adam is None:
        adam = Adam(params, lr=lr_schedule(cfg.schedule, start_epoch))
    result = TrainResult(noise_model=noise_model, denoiser=denoiser)

    csv_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "training_log.csv"
        if start_epoch == 0 or not csv_path.exists():
            csv_path.write_text(EpochStats.CSV_HEADER + "\n")

    n = a_tr.shape[0]
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        adam.lr = lr_schedule(cfg.schedule, epoch)
        order = _rng(cfg.seed, _SALT_SHUFFLE, epoch).permutation(n)
        r2r_rng = _rng(cfg.seed, _SALT_R2R, epoch)
        losses_sum = 0.0
        nm_nll_sum = 0.0
        nm_batches = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            a = Tensor(a_tr[idx])
            b = Tensor(b_tr[idx])
            c = Tensor(clean_tr[idx]) if (needs_clean and clean_tr is not None) else None
            m = _slice_meta(meta_tr, idx)
            with GradTape() as tape:
                terms = losses.batch_terms(cfg.mode, noise_model, denoiser, a, b,
                                           clean=c, meta=m, rng=r2r_rng,
                                           r2r_alpha=cfg.r2r_alpha)
                loss = terms.total(cfg.lambda_weight)
                tape.backward(loss)
            adam.step()
            adam.zero_grad()
            losses_sum += float(loss.data) * len(idx)
            nm = terms.nm_nll_per_dim()
            if nm is not None:
                nm_nll_sum += nm
                nm_batches += 1

        train_loss = losses_sum / n
        train_nm_nll = nm_nll_sum / nm_batches if nm_batches else None

        ev = {"nll_per_dim": np.nan, "kl": np.nan, "psnr": np.nan, "ssim": np.nan}
        if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            ev = evaluate(noise_model, denoiser, a_ev, b_ev, clean_ev, meta_ev,
                          _rng(cfg.seed, _SALT_EVAL, epoch + 1), cfg.mode,
                          cfg.r2r_alpha, cfg.r2r_eval_draws)

        stats = EpochStats(epoch, adam.lr, train_loss, ev["nll_per_dim"], ev["kl"],
                           ev["psnr"], ev["ssim"], time.perf_counter() - t0)
        result.history.append(stats)
        if csv_path is not None:
            with open(csv_path, "a") as f:
                f.write(stats.as_csv() + "\n")
        if log is not None:
            log(stats)

        reason = ""
        if not _params_finite(params):
            reason = "non-finite parameter"
        elif train_nm_nll is not None and train_nm_nll < cfg.divergence_floor:
            reason = f"training likelihood term {train_nm_nll:.3f} below floor {cfg.divergence_floor}"
        elif np.isfinite(ev["nll_per_dim"]) and ev["nll_per_dim"] < cfg.divergence_floor:
            reason = f"eval NLL/dim {ev['nll_per_dim']:.3f} below floor {cfg.divergence_floor}"
        if reason:
            result.diverged = True
            result.divergence_epoch = epoch
            result.divergence_reason = reason
            break

        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_train_checkpoint(out_dir / f"checkpoint_epoch{epoch:04d}.nlab",
                                  noise_model, denoiser, adam, epoch, cfg)

    if out_dir is not None:
        last = cfg.epochs - 1 if not result.diverged else result.divergence_epoch
        save_train_checkpoint(out_dir / "checkpoint_final.nlab",
                              noise_model, denoiser, adam, max(last, 0), cfg)
    return result


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_train_checkpoint(path, noise_model, denoiser, adam: Adam | None,
                          epoch: int, cfg: JointConfig | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    if denoiser is not None:
        arrays["denoiser/arch"] = encode_text(denoiser.arch_descriptor())
        for k, p in denoiser.parameters().items():
            arrays[f"denoiser/{k}"] = p.data
    if noise_model is not None:
        arrays["noise_model/arch"] = encode_text(noise_model.arch_descriptor())
        for k, p in noise_model.parameters().items():
            arrays[f"noise_model/{k}"] = p.data
    if adam is not None:
        arrays.update(adam.state_arrays())
    arrays["trainer/epoch"] = np.asarray(float(epoch), dtype=np.float32)
    if cfg is not None:
        arrays["trainer/mode"] = encode_text(cfg.mode)
        arrays["trainer/schedule"] = encode_text(cfg.schedule)
        arrays["trainer/lambda"] = np.asarray(cfg.lambda_weight, dtype=np.float32)
        arrays["trainer/seed_bits"] = encode_u64(cfg.seed)
    write_archive(path, arrays)


def load_train_checkpoint(path, dtype=np.float32):
    """Rebuild models (and optimizer state arrays) from an NLAB archive."""
    arrays = read_archive(path)
    denoiser = None
    noise_model = None
    if "denoiser/arch" in arrays:
        denoiser = denoiser_from_descriptor(decode_text(arrays["denoiser/arch"]), dtype=dtype)
        _load_params("denoiser", denoiser.parameters(), arrays)
    if "noise_model/arch" in arrays:
        noise_model = model_from_descriptor(decode_text(arrays["noise_model/arch"]), dtype=dtype)
        _load_params("noise_model", noise_model.parameters(), arrays)
    meta = {
        "epoch": int(round(float(arrays.get("trainer/epoch", np.float32(0.0))))),
        "mode": decode_text(arrays["trainer/mode"]) if "trainer/mode" in arrays else None,
        "schedule": decode_text(arrays["trainer/schedule"]) if "trainer/schedule" in arrays else None,
        "lambda": float(arrays["trainer/lambda"]) if "trainer/lambda" in arrays else None,
        "seed": decode_u64(arrays["trainer/seed_bits"]) if "trainer/seed_bits" in arrays else None,
    }
    return noise_model, denoiser, arrays, meta


def _load_params(prefix: str, params: dict[str, Tensor], arrays: dict[str, np.ndarray]):
    for k, p in params.items():
        key = f"{prefix}/{k}"
        if key not in arrays:
            raise FormatError(f"checkpoint missing parameter {key!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise FormatError(
                f"checkpoint parameter {key!r} has shape {arr.shape}, expected {p.data.shape}")
        p.data = arr.astype(p.data.dtype)

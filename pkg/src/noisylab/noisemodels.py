"""Conditional noise densities p(noisy | clean, ISO, camera).

Three families share one interface (log_prob / sample / parameters):

* AwgnModel - constant-variance Gaussian, one log-sigma.
* NlfModel  - heteroscedastic Gaussian, per-pixel variance b1*clean + b2.
* NoiseFlowModel - a stack of invertible layers mapping noise to a standard
  normal base; exact log-density via accumulated log-determinants.

Convention: layer `forward` runs in the normalizing direction (noise ->
base, dividing by scales); `inverse` is used for sampling.  All positive
quantities are exp-parameterized so optimization is unconstrained.
"""

from __future__ import annotations

import numpy as np

from . import engine as eng
from .engine import LOG_2PI, Tensor
from .errors import ShapeError, UnknownKeyError


class MetaBatch:
    """Per-sample conditioning indices into a model's ISO/camera tables."""

    def __init__(self, iso_idx: np.ndarray, cam_idx: np.ndarray):
        self.iso_idx = np.asarray(iso_idx, dtype=np.intp)
        self.cam_idx = np.asarray(cam_idx, dtype=np.intp)


class ConditioningTables:
    """Maps discrete (camera, ISO) keys to table indices; unseen keys error."""

    def __init__(self, iso_values, camera_ids):
        self.iso_values = tuple(int(v) for v in iso_values)
        self.camera_ids = tuple(str(c) for c in camera_ids)
        self._iso_pos = {v: i for i, v in enumerate(self.iso_values)}
        self._cam_pos = {c: i for i, c in enumerate(self.camera_ids)}

    def encode(self, metas) -> MetaBatch:
        iso_idx = np.empty(len(metas), dtype=np.intp)
        cam_idx = np.empty(len(metas), dtype=np.intp)
        for i, m in enumerate(metas):
            try:
                iso_idx[i] = self._iso_pos[m.iso]
            except KeyError:
                raise UnknownKeyError(f"ISO {m.iso} not in model table {self.iso_values}") from None
            try:
                cam_idx[i] = self._cam_pos[m.camera_id]
            except KeyError:
                raise UnknownKeyError(
                    f"camera {m.camera_id!r} not in model table {self.camera_ids}") from None
        return MetaBatch(iso_idx, cam_idx)


def _gaussian_logpdf_sum(resid: Tensor, log_var: Tensor) -> Tensor:
    """Sum over all elements of log N(resid; 0, exp(log_var))."""
    quad = (resid.square() * eng.exp(-1.0 * log_var)).sum()
    return -0.5 * (quad + log_var.sum() + float(resid.size) * LOG_2PI)


def nll_per_dim(model, noisy, clean, meta: MetaBatch | None = None) -> Tensor:
    """Negative log-likelihood in nats per element."""
    noisy = eng.as_tensor(noisy)
    lp = model.log_prob(noisy, clean, meta)
    return -1.0 * lp * (1.0 / float(noisy.size))


# ---------------------------------------------------------------------------
# closed-form Gaussian models
# ---------------------------------------------------------------------------

class AwgnModel:
    kind = "awgn"

    def __init__(self, sigma_init: float = 0.1, dtype=np.float32):
        self.log_sigma = Tensor(np.log(sigma_init), requires_grad=True, dtype=dtype)

    def parameters(self) -> dict[str, Tensor]:
        return {"log_sigma": self.log_sigma}

    def arch_descriptor(self) -> str:
        return "awgn"

    @property
    def sigma(self) -> float:
        return float(np.exp(self.log_sigma.data))

    def log_prob(self, noisy, clean, meta=None) -> Tensor:
        noisy, clean = eng.as_tensor(noisy), eng.as_tensor(clean)
        resid = noisy - clean
        quad = (resid.square() * eng.exp(-2.0 * self.log_sigma)).sum()
        n = float(resid.size)
        return -0.5 * (quad + n * LOG_2PI) - n * self.log_sigma

    def sample(self, clean: np.ndarray, meta=None, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng()
        clean = np.asarray(clean, dtype=np.float32)
        return clean + self.sigma * rng.standard_normal(clean.shape).astype(np.float32)

    def noise_std(self, clean: np.ndarray) -> np.ndarray:
        return np.full_like(np.asarray(clean, dtype=np.float32), self.sigma)


class NlfModel:
    """Noise level function: variance linear in clean intensity."""

    kind = "nlf"

    def __init__(self, beta1_init: float = 0.1, beta2_init: float = 0.01,
                 per_key: bool = False, iso_values=None,
                 camera_ids=None, dtype=np.float32):
        self.per_key = bool(per_key)
        if self.per_key:
            self.tables = ConditioningTables(iso_values or (), camera_ids or ())
            n = max(len(self.tables.iso_values) * len(self.tables.camera_ids), 1)
            self.log_beta1 = Tensor(np.full(n, np.log(beta1_init)), requires_grad=True, dtype=dtype)
            self.log_beta2 = Tensor(np.full(n, np.log(beta2_init)), requires_grad=True, dtype=dtype)
        else:
            self.tables = None
            self.log_beta1 = Tensor(np.log(beta1_init), requires_grad=True, dtype=dtype)
            self.log_beta2 = Tensor(np.log(beta2_init), requires_grad=True, dtype=dtype)

    def parameters(self) -> dict[str, Tensor]:
        return {"log_beta1": self.log_beta1, "log_beta2": self.log_beta2}

    def arch_descriptor(self) -> str:
        if self.per_key:
            isos = ",".join(str(v) for v in self.tables.iso_values)
            cams = ",".join(self.tables.camera_ids)
            return f"nlf;per_key=1;isos={isos};cams={cams}"
        return "nlf"

    @property
    def beta1(self) -> float:
        return float(np.exp(self.log_beta1.data if not self.per_key else self.log_beta1.data[0]))

    @property
    def beta2(self) -> float:
        return float(np.exp(self.log_beta2.data if not self.per_key else self.log_beta2.data[0]))

    def encode_meta(self, metas) -> MetaBatch | None:
        return self.tables.encode(metas) if self.per_key else None

    def _betas_for(self, meta: MetaBatch | None, batch: int):
        if not self.per_key:
            return self.log_beta1, self.log_beta2
        if meta is None:
            raise ShapeError("per-key NLF model needs meta indices")
        flat = meta.cam_idx * len(self.tables.iso_values) + meta.iso_idx
        b1 = eng.take(self.log_beta1, flat).reshape(batch, 1, 1, 1)
        b2 = eng.take(self.log_beta2, flat).reshape(batch, 1, 1, 1)
        return b1, b2

    def log_prob(self, noisy, clean, meta: MetaBatch | None = None) -> Tensor:
        noisy, clean = eng.as_tensor(noisy), eng.as_tensor(clean)
        b1, b2 = self._betas_for(meta, noisy.shape[0] if noisy.ndim == 4 else 1)
        # conditioning intensity is clamped to the valid signal range so the
        # variance stays positive even for imperfect clean estimates
        var = eng.exp(b1) * clean.clamp(0.0, 1.0) + eng.exp(b2)
        resid = noisy - clean
        return _gaussian_logpdf_sum(resid, eng.log(var))

    def noise_std(self, clean: np.ndarray) -> np.ndarray:
        clean = np.clip(np.asarray(clean, dtype=np.float32), 0.0, 1.0)
        return np.sqrt(self.beta1 * clean + self.beta2)

    def sample(self, clean: np.ndarray, meta=None, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng()
        clean = np.asarray(clean, dtype=np.float32)
        return clean + self.noise_std(clean) * rng.standard_normal(clean.shape).astype(np.float32)


# ---------------------------------------------------------------------------
# flow layers
# ---------------------------------------------------------------------------

class FlowContext:
    def __init__(self, clean: Tensor, meta: MetaBatch | None):
        self.clean = clean
        self.meta = meta


class SignalDependentLayer:
    """Scale by 1/sqrt(b1*clean + b2): the NLF embedded as a flow layer."""

    tag = "sdt"

    def __init__(self, beta1_init: float = 1e-9, beta2_init: float = 1.0, dtype=np.float32):
        self.log_beta1 = Tensor(np.log(beta1_init), requires_grad=True, dtype=dtype)
        self.log_beta2 = Tensor(np.log(beta2_init), requires_grad=True, dtype=dtype)

    def parameters(self):
        return {"log_beta1": self.log_beta1, "log_beta2": self.log_beta2}

    def _scale(self, ctx: FlowContext) -> Tensor:
        var = eng.exp(self.log_beta1) * ctx.clean.clamp(0.0, 1.0) + eng.exp(self.log_beta2)
        return eng.sqrt(var)

    def forward(self, x: Tensor, ctx: FlowContext):
        s = self._scale(ctx)
        z = x / s
        logdet = -1.0 * eng.log(s).sum()
        return z, logdet

    def inverse(self, z: Tensor, ctx: FlowContext) -> Tensor:
        return z * self._scale(ctx)


class GainLayer:
    """Divide by exp(g_iso + g_cam): camera/ISO amplification, one gain each."""

    tag = "gain"

    def __init__(self, tables: ConditioningTables, dtype=np.float32):
        self.tables = tables
        self.iso_gain = Tensor(np.zeros(len(tables.iso_values)), requires_grad=True, dtype=dtype)
        self.cam_gain = Tensor(np.zeros(len(tables.camera_ids)), requires_grad=True, dtype=dtype)

    def parameters(self):
        return {"iso_gain": self.iso_gain, "cam_gain": self.cam_gain}

    def _log_gain(self, x: Tensor, ctx: FlowContext) -> Tensor:
        if ctx.meta is None:
            raise ShapeError("gain layer needs encoded meta indices")
        n = x.shape[0]
        g = eng.take(self.iso_gain, ctx.meta.iso_idx) + eng.take(self.cam_gain, ctx.meta.cam_idx)
        return g.reshape(n, 1, 1, 1)

    def forward(self, x: Tensor, ctx: FlowContext):
        g = self._log_gain(x, ctx)
        per_sample = float(np.prod(x.shape[1:]))
        z = x * eng.exp(-1.0 * g)
        logdet = -per_sample * g.sum()
        return z, logdet

    def inverse(self, z: Tensor, ctx: FlowContext) -> Tensor:
        return z * eng.exp(self._log_gain(z, ctx))


class AffineCouplingLayer:
    """Channel-split affine coupling; tanh bounds the log-scale.

    The second half of the channels is scaled and shifted by a small conv
    net of the first half.  The net's last kernel starts at zero, so the
    layer is the identity at initialization.
    """

    tag = "cpl"

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        if channels < 2 or channels % 2:
            raise ShapeError(f"coupling layer needs an even channel count >= 2, got {channels}")
        self.c1 = channels // 2
        self.c2 = channels - self.c1
        self.w0 = eng.orthogonal_init((hidden, self.c1, 3, 3), rng, dtype)
        self.b0 = Tensor(np.zeros(hidden), requires_grad=True, dtype=dtype)
        self.w1 = Tensor(np.zeros((2 * self.c2, hidden, 3, 3)), requires_grad=True, dtype=dtype)
        self.b1 = Tensor(np.zeros(2 * self.c2), requires_grad=True, dtype=dtype)

    def parameters(self):
        return {"w0": self.w0, "b0": self.b0, "w1": self.w1, "b1": self.b1}

    def _scale_shift(self, x1: Tensor):
        h = eng.conv2d(x1, self.w0, self.b0).relu()
        h = eng.conv2d(h, self.w1, self.b1)
        raw = eng.narrow(h, 1, 0, self.c2)
        shift = eng.narrow(h, 1, self.c2, self.c2)
        return raw.tanh(), shift

    def forward(self, x: Tensor, ctx: FlowContext):
        x1 = eng.narrow(x, 1, 0, self.c1)
        x2 = eng.narrow(x, 1, self.c1, self.c2)
        log_s, t = self._scale_shift(x1)
        z2 = x2 * eng.exp(log_s) + t
        logdet = log_s.sum()
        return eng.concat([x1, z2], axis=1), logdet

    def inverse(self, z: Tensor, ctx: FlowContext) -> Tensor:
        z1 = eng.narrow(z, 1, 0, self.c1)
        z2 = eng.narrow(z, 1, self.c1, self.c2)
        log_s, t = self._scale_shift(z1)
        x2 = (z2 - t) * eng.exp(-1.0 * log_s)
        return eng.concat([z1, x2], axis=1)


class Mix1x1Layer:
    """Invertible per-pixel channel mixing, LU-parameterized.

    M = L U with unit-lower L and upper U whose diagonal is exp-parameterized
    (fixed +1 signs, identity permutation), so M is nonsingular by
    construction and starts as the identity.
    """

    tag = "mix"

    def __init__(self, channels: int, dtype=np.float32):
        c = int(channels)
        self.c = c
        self.lower = Tensor(np.zeros((c, c)), requires_grad=True, dtype=dtype)
        self.upper = Tensor(np.zeros((c, c)), requires_grad=True, dtype=dtype)
        self.log_diag = Tensor(np.zeros(c), requires_grad=True, dtype=dtype)
        self._eye = Tensor(np.eye(c), dtype=dtype)
        self._mask_l = Tensor(np.tril(np.ones((c, c)), -1), dtype=dtype)
        self._mask_u = Tensor(np.triu(np.ones((c, c)), 1), dtype=dtype)

    def parameters(self):
        return {"lower": self.lower, "upper": self.upper, "log_diag": self.log_diag}

    def _matrix(self) -> Tensor:
        l = self._eye + self.lower * self._mask_l
        u = self.upper * self._mask_u + self._eye * eng.exp(self.log_diag).reshape(1, self.c)
        return eng.matmul(l, u)

    def forward(self, x: Tensor, ctx: FlowContext):
        n, c, h, w = x.shape
        m = self._matrix()
        z = eng.conv2d(x, m.reshape(c, c, 1, 1))
        logdet = float(n * h * w) * self.log_diag.sum()
        return z, logdet

    def inverse(self, z: Tensor, ctx: FlowContext) -> Tensor:
        inv = np.linalg.inv(self._matrix().data)
        x = np.einsum("co,nohw->nchw", inv, z.data)
        return Tensor(np.ascontiguousarray(x, dtype=z.dtype))


# ---------------------------------------------------------------------------
# flow model
# ---------------------------------------------------------------------------

class NoiseFlowModel:
    """Composition of flow layers over noise = noisy - clean, N(0,1) base."""

    kind = "noiseflow"

    def __init__(self, layers, tables: ConditioningTables | None = None,
                 descriptor: str = "noiseflow"):
        self.layers = list(layers)
        self.tables = tables
        self._descriptor = descriptor

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters().items():
                out[f"layer{i}.{layer.tag}/{name}"] = p
        return out

    def arch_descriptor(self) -> str:
        return self._descriptor

    def encode_meta(self, metas) -> MetaBatch | None:
        return self.tables.encode(metas) if self.tables is not None else None

    def _context(self, clean: Tensor, meta: MetaBatch | None) -> FlowContext:
        return FlowContext(clean.clamp(0.0, 1.0), meta)

    def log_prob(self, noisy, clean, meta: MetaBatch | None = None) -> Tensor:
        noisy, clean = eng.as_tensor(noisy), eng.as_tensor(clean)
        ctx = self._context(clean, meta)
        x = noisy - clean
        logdet_total = None
        for layer in self.layers:
            x, logdet = layer.forward(x, ctx)
            logdet_total = logdet if logdet_total is None else logdet_total + logdet
        base = -0.5 * (x.square().sum() + float(x.size) * LOG_2PI)
        return base if logdet_total is None else base + logdet_total

    def sample(self, clean: np.ndarray, meta: MetaBatch | None = None,
               rng: np.random.Generator | None = None) -> np.ndarray:
        rng = rng or np.random.default_rng()
        clean = np.asarray(clean, dtype=np.float32)
        ctx = self._context(Tensor(clean), meta)
        z = Tensor(rng.standard_normal(clean.shape).astype(np.float32))
        for layer in reversed(self.layers):
            z = layer.inverse(z, ctx)
        return clean + z.data


def build_noise_flow(channels: int, iso_values, camera_ids, blocks: int = 1,
                     hidden: int = 16, seed: int = 0, dtype=np.float32) -> NoiseFlowModel:
    """Default architecture: [SDT, 1x1 mix, coupling, gain] x blocks.

    Single-channel inputs drop the coupling layer (it needs an even channel
    count >= 2) and the 1x1 mix (a scalar it already covers via gains).
    """
    tables = ConditioningTables(iso_values, camera_ids)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xF10])))
    layers = []
    for _ in range(int(blocks)):
        layers.append(SignalDependentLayer(dtype=dtype))
        if channels >= 2:
            layers.append(Mix1x1Layer(channels, dtype=dtype))
            if channels % 2 == 0:
                layers.append(AffineCouplingLayer(channels, hidden, rng, dtype=dtype))
        layers.append(GainLayer(tables, dtype=dtype))
    isos = ",".join(str(v) for v in tables.iso_values)
    cams = ",".join(tables.camera_ids)
    desc = f"noiseflow;channels={channels};blocks={blocks};hidden={hidden};isos={isos};cams={cams}"
    return NoiseFlowModel(layers, tables, desc)


def build_nlf_flow(iso_values, camera_ids, beta1_init: float = 0.1,
                   beta2_init: float = 0.01, dtype=np.float32) -> NoiseFlowModel:
    """Flow restricted to the signal-dependent and gain layers (equals NLF)."""
    tables = ConditioningTables(iso_values, camera_ids)
    layers = [SignalDependentLayer(beta1_init, beta2_init, dtype=dtype),
              GainLayer(tables, dtype=dtype)]
    isos = ",".join(str(v) for v in tables.iso_values)
    cams = ",".join(tables.camera_ids)
    return NoiseFlowModel(layers, tables, f"nlfflow;isos={isos};cams={cams}")


def build_noise_model(kind: str, channels: int, iso_values, camera_ids,
                      blocks: int = 1, hidden: int = 16, seed: int = 0,
                      dtype=np.float32):
    if kind == "awgn":
        return AwgnModel(dtype=dtype)
    if kind == "nlf":
        return NlfModel(dtype=dtype)
    if kind == "noiseflow":
        return build_noise_flow(channels, iso_values, camera_ids, blocks, hidden, seed, dtype)
    raise ValueError(f"unknown noise model kind {kind!r}")


def model_from_descriptor(desc: str, seed: int = 0, dtype=np.float32):
    """Rebuild an uninitialized model from a checkpoint architecture string."""
    head, _, rest = desc.partition(";")
    fields = dict(kv.split("=", 1) for kv in rest.split(";") if kv)

    def split_list(key, cast=str):
        raw = fields.get(key, "")
        return tuple(cast(v) for v in raw.split(",") if v != "")

    if head == "awgn":
        return AwgnModel(dtype=dtype)
    if head == "nlf":
        if fields.get("per_key") == "1":
            return NlfModel(per_key=True, iso_values=split_list("isos", int),
                            camera_ids=split_list("cams"), dtype=dtype)
        return NlfModel(dtype=dtype)
    if head == "nlfflow":
        return build_nlf_flow(split_list("isos", int), split_list("cams"), dtype=dtype)
    if head == "noiseflow":
        return build_noise_flow(int(fields["channels"]), split_list("isos", int),
                                split_list("cams"), int(fields["blocks"]),
                                int(fields["hidden"]), seed, dtype)
    raise ValueError(f"unknown noise model descriptor {desc!r}")

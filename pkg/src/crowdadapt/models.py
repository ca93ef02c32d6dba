"""Counting network f(x; {phi, psi}) and guiding network g(z; theta).

The counting network is a small encoder (three conv/ReLU/max-pool stages,
overall stride 8) followed by a decoder of dilated 3x3 convolutions. The first
``n_gbn_layers`` decoder blocks carry a normalisation layer: guided BN for the
adaptive model, plain BN for the baseline. A 1x1 convolution produces the
density map; its output is not clamped, so negative densities can occur.

The guiding network maps one or more unlabeled images to the flat vector of
guided-BN scales and shifts. With several images the per-image predictions
are averaged.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import rng as rngmod
from .norm import (
    BnLayerState,
    GbnLayerConfig,
    GbnParams,
    RunningStats,
    bn_forward,
    gbn_forward,
    layout_width,
    make_layout,
    slice_phi,
)
from .tensor import (
    Tensor,
    conv2d,
    global_avg_pool,
    linear,
    maxpool2d,
    mean_rows,
    relu,
)

DOWNSAMPLE = 8
GUIDE_INIT_STD = 1e-4
HEAD_INIT_STD = 1e-2


@dataclass(frozen=True)
class ArchConfig:
    input_channels: int = 1
    encoder_channels: tuple[int, ...] = (8, 16, 32)
    decoder_gbn_channels: tuple[int, ...] = (32, 32, 32, 16, 8, 8)
    guiding_channels: tuple[int, ...] = (8, 16, 32)
    n_gbn_layers: int = 6
    guide_linear_width: int | None = None
    epsilon: float = 1e-5
    stats_mode: str = "batch"
    momentum: float = 0.1
    # fixed input standardisation applied before both networks: (x - offset) * scale
    input_offset: float = 0.5
    input_scale: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "decoder_gbn_channels", tuple(int(c) for c in self.decoder_gbn_channels))
        object.__setattr__(self, "guiding_channels", tuple(int(c) for c in self.guiding_channels))
        self.validate()

    def validate(self) -> None:
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")
        if len(self.encoder_channels) != 3:
            raise ValueError("encoder needs exactly three stages (stride 8)")
        if len(self.guiding_channels) != 3:
            raise ValueError("guiding network needs exactly three conv layers")
        if not self.decoder_gbn_channels:
            raise ValueError("decoder needs at least one block")
        if any(c < 1 for c in self.encoder_channels + self.decoder_gbn_channels + self.guiding_channels):
            raise ValueError("channel counts must be >= 1")
        if not 1 <= self.n_gbn_layers <= len(self.decoder_gbn_channels):
            raise ValueError(
                f"n_gbn_layers must lie in [1, {len(self.decoder_gbn_channels)}], got {self.n_gbn_layers}")
        if not self.input_scale > 0:
            raise ValueError("input_scale must be positive")
        if self.stats_mode not in ("batch", "running"):
            raise ValueError(f"unknown stats_mode {self.stats_mode!r}")
        width = layout_width(self.gbn_layout())
        if self.guide_linear_width is not None and self.guide_linear_width != width:
            raise ValueError(
                f"guiding linear width {self.guide_linear_width} != sum of 2*D_p over GBN layers ({width})")

    def gbn_layout(self) -> list[tuple[int, int]]:
        return make_layout(self.decoder_gbn_channels[: self.n_gbn_layers])

    @property
    def phi_width(self) -> int:
        return layout_width(self.gbn_layout())

    def layer_config(self, p: int) -> GbnLayerConfig:
        return GbnLayerConfig(self.decoder_gbn_channels[p], self.epsilon, self.stats_mode, self.momentum)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("encoder_channels", "decoder_gbn_channels", "guiding_channels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown arch keys: {sorted(unknown)}")
        return cls(**d)


FULL_SCALE_DECODER = (512, 512, 512, 256, 128, 64)


@dataclass
class ModelState:
    """Parameters of one model.

    ``kind`` is ``"gbn"`` (adaptive: psi + theta) or ``"bn"`` (baseline: psi
    holds the learned BN affine, theta is empty). ``buffers`` holds
    non-trainable moving statistics.
    """

    psi: dict[str, Tensor]
    theta: dict[str, Tensor]
    arch: ArchConfig
    kind: str = "gbn"
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = 1

    @property
    def dtype(self):
        return next(iter(self.psi.values())).dtype

    def parameters(self) -> dict[str, Tensor]:
        return {**self.psi, **self.theta}

    def inference_view(self) -> "ModelState":
        """Same arrays, no gradient tracking, so forwards build no graph."""
        return replace(
            self,
            psi={k: Tensor(v.data) for k, v in self.psi.items()},
            theta={k: Tensor(v.data) for k, v in self.theta.items()},
        )

    def copy(self) -> "ModelState":
        return replace(
            self,
            psi={k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.psi.items()},
            theta={k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.theta.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
        )


def checksum(params: dict[str, Tensor] | dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = params[name]
        arr = arr.data if isinstance(arr, Tensor) else arr
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def model_checksum(model: ModelState) -> str:
    return checksum(model.parameters())


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _param_shapes(arch: ArchConfig, kind: str) -> tuple[dict[str, tuple], dict[str, tuple]]:
    psi: dict[str, tuple] = {}
    c_in = arch.input_channels
    for i, c in enumerate(arch.encoder_channels):
        psi[f"enc{i}.weight"] = (c, c_in, 3, 3)
        psi[f"enc{i}.bias"] = (c,)
        c_in = c
    for i, c in enumerate(arch.decoder_gbn_channels):
        psi[f"dec{i}.weight"] = (c, c_in, 3, 3)
        psi[f"dec{i}.bias"] = (c,)
        if kind == "bn" and i < arch.n_gbn_layers:
            psi[f"dec{i}.bn.gamma"] = (c,)
            psi[f"dec{i}.bn.beta"] = (c,)
        c_in = c
    psi["head.weight"] = (1, c_in, 1, 1)
    psi["head.bias"] = (1,)

    theta: dict[str, tuple] = {}
    if kind == "gbn":
        g_in = arch.input_channels
        kernels = (7, 4, 4)
        for i, (c, k) in enumerate(zip(arch.guiding_channels, kernels)):
            theta[f"guide.conv{i}.weight"] = (c, g_in, k, k)
            theta[f"guide.conv{i}.bias"] = (c,)
            g_in = c
        theta["guide.fc.weight"] = (arch.phi_width, g_in)
        theta["guide.fc.bias"] = (arch.phi_width,)
    return psi, theta


def _init_array(name: str, shape: tuple, arch: ArchConfig, seed: int, dtype) -> np.ndarray:
    if name.endswith(".bias") and name != "guide.fc.bias":
        return np.zeros(shape, dtype=dtype)
    if name.endswith(".bn.gamma"):
        return np.ones(shape, dtype=dtype)
    if name.endswith(".bn.beta"):
        return np.zeros(shape, dtype=dtype)
    if name == "guide.fc.bias":
        # identity transform at init: gamma slots 1, beta slots 0
        bias = np.zeros(shape, dtype=dtype)
        pos = 0
        for _, d in arch.gbn_layout():
            bias[pos : pos + d] = 1.0
            pos += 2 * d
        return bias
    gen = rngmod.stream(seed, f"init/{name}")
    if name == "guide.fc.weight":
        std = GUIDE_INIT_STD
    elif name == "head.weight":
        std = HEAD_INIT_STD
    else:
        fan_in = int(np.prod(shape[1:]))
        std = np.sqrt(2.0 / fan_in)
    return (gen.standard_normal(shape) * std).astype(dtype)


def build_model(arch: ArchConfig, seed: int, kind: str = "gbn", dtype=np.float32) -> ModelState:
    """Deterministically initialise a model from ``seed``."""
    if kind not in ("gbn", "bn"):
        raise ValueError(f"unknown model kind {kind!r}")
    arch.validate()
    psi_shapes, theta_shapes = _param_shapes(arch, kind)
    psi = {n: Tensor(_init_array(n, s, arch, seed, dtype), requires_grad=True) for n, s in psi_shapes.items()}
    theta = {n: Tensor(_init_array(n, s, arch, seed, dtype), requires_grad=True) for n, s in theta_shapes.items()}
    if kind == "gbn" and theta["guide.fc.weight"].shape[0] != arch.phi_width:
        raise ValueError("guiding linear width does not match the GBN layout")
    buffers: dict[str, np.ndarray] = {}
    needs_stats = kind == "bn" or arch.stats_mode == "running"
    if needs_stats:
        tag = "bn" if kind == "bn" else "gbn"
        for p, d in arch.gbn_layout():
            buffers[f"dec{p}.{tag}.running_mean"] = np.zeros(d, dtype=dtype)
            buffers[f"dec{p}.{tag}.running_var"] = np.ones(d, dtype=dtype)
    return ModelState(psi=psi, theta=theta, arch=arch, kind=kind, buffers=buffers)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype == dtype else Tensor(x.data.astype(dtype))
    return Tensor(np.asarray(x, dtype=dtype))


def standardise(x: Tensor, arch: ArchConfig) -> Tensor:
    return (x - arch.input_offset) * arch.input_scale


def encode(x: Tensor, psi: dict[str, Tensor], arch: ArchConfig) -> Tensor:
    h = x
    for i in range(len(arch.encoder_channels)):
        h = relu(conv2d(h, psi[f"enc{i}.weight"], psi[f"enc{i}.bias"], stride=1, padding=1))
        h = maxpool2d(h, 2, 2)
    return h


def _decode(h: Tensor, psi: dict[str, Tensor], arch: ArchConfig, normalise) -> Tensor:
    for i in range(len(arch.decoder_gbn_channels)):
        h = conv2d(h, psi[f"dec{i}.weight"], psi[f"dec{i}.bias"], stride=1, padding=2, dilation=2)
        if i < arch.n_gbn_layers:
            h = normalise(i, h)
        h = relu(h)
    return conv2d(h, psi["head.weight"], psi["head.bias"])


def _check_input(x: Tensor, arch: ArchConfig) -> None:
    if x.data.ndim != 4:
        raise ValueError(f"expected [B,C,H,W] input, got shape {x.shape}")
    if x.shape[1] != arch.input_channels:
        raise ValueError(f"channel axis mismatch: input has C={x.shape[1]}, arch expects {arch.input_channels}")
    if x.shape[2] % DOWNSAMPLE or x.shape[3] % DOWNSAMPLE:
        raise ValueError(f"spatial dims {x.shape[2]}x{x.shape[3]} not divisible by {DOWNSAMPLE}")


def _finite(out: Tensor) -> Tensor:
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite values in density map")
    return out


def count_forward(x, phi: GbnParams, psi: dict[str, Tensor], arch: ArchConfig,
                  stats: dict[int, RunningStats] | None = None, training: bool = False) -> Tensor:
    """Density map for ``x`` with guided-BN parameters ``phi``; shape [B,1,H/8,W/8]."""
    dtype = next(iter(psi.values())).dtype
    x = _as_input(x, dtype)
    _check_input(x, arch)
    if phi.layout != arch.gbn_layout():
        raise ValueError(f"phi layout {phi.layout} does not match arch layout {arch.gbn_layout()}")

    def normalise(p: int, h: Tensor) -> Tensor:
        gamma, beta = slice_phi(phi, p)
        st = stats.get(p) if stats is not None else None
        return gbn_forward(h, gamma, beta, arch.layer_config(p), stats=st, training=training)

    return _finite(_decode(encode(standardise(x, arch), psi, arch), psi, arch, normalise))


def bn_count_forward(x, model: ModelState, training: bool) -> Tensor:
    """Density map from the BN baseline; training mode updates ``model.buffers``."""
    if model.kind != "bn":
        raise ValueError("bn_count_forward needs a BN baseline model")
    arch, psi = model.arch, model.psi
    x = _as_input(x, model.dtype)
    _check_input(x, arch)

    def normalise(p: int, h: Tensor) -> Tensor:
        state = bn_layer_state(model, p)
        out = bn_forward(h, state, training)
        if training:
            model.buffers[f"dec{p}.bn.running_mean"] = state.running_mean
            model.buffers[f"dec{p}.bn.running_var"] = state.running_var
        return out

    return _finite(_decode(encode(standardise(x, arch), psi, arch), psi, arch, normalise))


def bn_layer_state(model: ModelState, p: int) -> BnLayerState:
    return BnLayerState(
        channels=model.arch.decoder_gbn_channels[p],
        gamma=model.psi[f"dec{p}.bn.gamma"],
        beta=model.psi[f"dec{p}.bn.beta"],
        running_mean=model.buffers[f"dec{p}.bn.running_mean"],
        running_var=model.buffers[f"dec{p}.bn.running_var"],
        momentum=model.arch.momentum,
        epsilon=model.arch.epsilon,
    )


def gbn_running_stats(model: ModelState) -> dict[int, RunningStats] | None:
    if model.arch.stats_mode != "running":
        return None
    return {
        p: _BufferStats(model.buffers, f"dec{p}.gbn")
        for p, _ in model.arch.gbn_layout()
    }


class _BufferStats(RunningStats):
    """RunningStats that writes its updates straight back into a buffer dict."""

    def __init__(self, buffers: dict[str, np.ndarray], prefix: str):
        self._buffers, self._prefix = buffers, prefix

    @property
    def mean(self):
        return self._buffers[f"{self._prefix}.running_mean"]

    @mean.setter
    def mean(self, v):
        self._buffers[f"{self._prefix}.running_mean"] = v

    @property
    def var(self):
        return self._buffers[f"{self._prefix}.running_var"]

    @var.setter
    def var(self, v):
        self._buffers[f"{self._prefix}.running_var"] = v


def guide_batch(z: Tensor, theta: dict[str, Tensor]) -> Tensor:
    """Per-image guiding-network outputs for a [K,C,H,W] stack: [K, phi_width]."""
    h = relu(conv2d(z, theta["guide.conv0.weight"], theta["guide.conv0.bias"], stride=1, padding=3))
    h = relu(conv2d(h, theta["guide.conv1.weight"], theta["guide.conv1.bias"], stride=2, padding=1))
    h = relu(conv2d(h, theta["guide.conv2.weight"], theta["guide.conv2.bias"], stride=2, padding=1))
    return linear(global_avg_pool(h), theta["guide.fc.weight"], theta["guide.fc.bias"])


def guide(z_images: Sequence, theta: dict[str, Tensor], arch: ArchConfig) -> GbnParams:
    """phi = mean over the K images of g(z_i; theta)."""
    if len(z_images) == 0:
        raise ValueError("guide needs at least one unlabeled image (K >= 1)")
    dtype = next(iter(theta.values())).dtype
    arrays = [(_as_input(z, dtype)).data for z in z_images]
    arrays = [a[None] if a.ndim == 3 else a for a in arrays]
    channels = {a.shape[1] for a in arrays}
    if channels != {arch.input_channels}:
        raise ValueError(f"unlabeled images have channel counts {sorted(channels)}, arch expects {arch.input_channels}")
    z = standardise(Tensor(np.concatenate(arrays, axis=0)), arch)
    phi = mean_rows(guide_batch(z, theta))
    return GbnParams(phi, arch.gbn_layout())


def predict_count(density) -> float:
    data = density.data if isinstance(density, Tensor) else np.asarray(density)
    return float(np.sum(data, dtype=np.float64))


def adapt(model: ModelState, z_images: Sequence) -> GbnParams:
    """Feed-forward adaptation to a new scene; never touches the parameters."""
    if model.kind != "gbn":
        raise ValueError("model has no GBN layers")
    before = model_checksum(model)
    phi = guide(z_images, model.inference_view().theta, model.arch)
    after = model_checksum(model)
    if before != after:
        raise RuntimeError("adaptation mutated model parameters")
    return phi


def predict_density(model: ModelState, x, phi: GbnParams | None = None) -> Tensor:
    """Inference-mode density map for either model kind."""
    view = model.inference_view()
    if model.kind == "bn":
        return bn_count_forward(x, view, training=False)
    if phi is None:
        raise ValueError("the adaptive model needs phi (call adapt first)")
    return count_forward(x, phi, view.psi, model.arch, stats=gbn_running_stats(view), training=False)

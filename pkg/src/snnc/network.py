"""Model architecture, parameters, and forward passes.

Two forward flavours share one engine: the deterministic expectation pass
(means only) and the stochastic pass that injects Gaussian noise at the
first layer's pre-activation and carries (mean, variance) downstream.  The
engine always runs with a leading batch axis; single-example entry points
wrap a batch of one.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from .errors import FormatError, ShapeError
from .mathops import SeededRng, conv2d, conv_output_hw, sample_gaussian
from .moments import (GaussianTensor, VAR_FLOOR, VarianceMode,
                      _meanpool_moments, _pool_plan, _relu_moments, floor_var)


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MeanPool:
    window: int
    stride: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class FullyConnected:
    out_units: int


LayerSpec = Union[Conv, ReLU, MeanPool, Flatten, FullyConnected]


def _shape_after(spec: LayerSpec, shape: tuple, index: int) -> tuple:
    if isinstance(spec, Conv):
        if len(shape) != 3:
            raise ShapeError(f"layer {index}: Conv needs (C,H,W), got {shape}")
        c, h, w = shape
        if min(spec.out_channels, spec.kernel_h, spec.kernel_w, spec.stride) < 1 \
                or spec.padding < 0:
            raise ShapeError(f"layer {index}: invalid Conv spec {spec}")
        oh, ow = conv_output_hw(h, w, spec.kernel_h, spec.kernel_w,
                                spec.stride, spec.padding)
        if oh < 1 or ow < 1:
            raise ShapeError(f"layer {index}: Conv output collapses on {shape}")
        return (spec.out_channels, oh, ow)
    if isinstance(spec, ReLU):
        return shape
    if isinstance(spec, MeanPool):
        if len(shape) != 3:
            raise ShapeError(f"layer {index}: MeanPool needs (C,H,W), got {shape}")
        c, h, w = shape
        oh, ow = _pool_plan(h, w, spec.window, spec.stride)
        return (c, oh, ow)
    if isinstance(spec, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(spec, FullyConnected):
        if spec.out_units < 1:
            raise ShapeError(f"layer {index}: invalid FC width {spec.out_units}")
        return (spec.out_units,)
    raise ShapeError(f"layer {index}: unknown layer spec {spec!r}")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description.  Construction type-checks the whole shape
    flow; a config that builds is a config that runs."""

    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    n_classes: int
    default_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ShapeError(f"input shape must be (C,H,W), got {self.input_shape}")
        if not self.layers:
            raise ShapeError("model needs at least one layer")
        if not isinstance(self.layers[0], (Conv, FullyConnected)):
            raise ShapeError("first layer must be affine (noise injection point)")
        if self.default_sigma < 0:
            raise ValueError("default_sigma must be >= 0")
        final = self.layer_shapes()[-1]
        if final != (self.n_classes,):
            raise ShapeError(
                f"final layer emits {final}, expected ({self.n_classes},)")

    def layer_shapes(self) -> list[tuple]:
        """Shape entering each layer plus the final output shape."""
        shape = self.input_shape
        shapes = [shape]
        for i, spec in enumerate(self.layers):
            shape = _shape_after(spec, shape, i)
            shapes.append(shape)
        return shapes


@dataclass(frozen=True)
class ParameterSet:
    """Per-layer weights/biases plus the noise level sigma.

    Entries are None for layers without parameters.  Treated as immutable:
    optimizers build new instances rather than writing in place.
    """

    config: ModelConfig
    weights: tuple[Optional[np.ndarray], ...]
    biases: tuple[Optional[np.ndarray], ...]
    sigma: float
    sigma_learnable: bool = False

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if len(self.weights) != len(self.config.layers) \
                or len(self.biases) != len(self.config.layers):
            raise ShapeError("parameter lists must align with config layers")

    def with_sigma(self, sigma: float) -> "ParameterSet":
        return replace(self, sigma=float(max(sigma, 0.0)))


def init_params(config: ModelConfig, seed: int) -> ParameterSet:
    """He-initialized weights (std sqrt(2/fan_in)), zero biases,
    sigma from the config default.  Deterministic per seed."""
    root = SeededRng(seed)
    shapes = config.layer_shapes()
    weights, biases = [], []
    for i, spec in enumerate(config.layers):
        if isinstance(spec, Conv):
            ic = shapes[i][0]
            fan_in = ic * spec.kernel_h * spec.kernel_w
            wshape = (spec.out_channels, ic, spec.kernel_h, spec.kernel_w)
            w = sample_gaussian(root.substream(i), wshape, 0.0,
                                float(np.sqrt(2.0 / fan_in)))
            weights.append(w)
            biases.append(np.zeros(spec.out_channels))
        elif isinstance(spec, FullyConnected):
            fan_in = int(np.prod(shapes[i]))
            w = sample_gaussian(root.substream(i), (spec.out_units, fan_in),
                                0.0, float(np.sqrt(2.0 / fan_in)))
            weights.append(w)
            biases.append(np.zeros(spec.out_units))
        else:
            weights.append(None)
            biases.append(None)
    return ParameterSet(config, tuple(weights), tuple(biases),
                        float(config.default_sigma))


@dataclass
class LayerTrace:
    """Per-layer bookkeeping recorded by the forward engine for backprop."""

    spec: LayerSpec
    in_mean: Optional[np.ndarray] = None   # affine layers: input means
    in_var: Optional[np.ndarray] = None    # affine layers: input variances
    in_shape: Optional[tuple] = None       # pre-flatten feature shape
    mean_gate: Optional[np.ndarray] = None
    var_gate: Optional[np.ndarray] = None
    selection: Optional[np.ndarray] = None
    pool_hw: Optional[tuple[int, int]] = None


@dataclass
class ForwardCache:
    """Everything the backward pass needs from one stochastic forward."""

    traces: list[LayerTrace]
    x: np.ndarray                # network input, batched
    mode: VarianceMode
    sigma: float
    out_mean: np.ndarray         # (N, n)
    out_var: Optional[np.ndarray]


def _check_input(config: ModelConfig, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == config.input_shape:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != config.input_shape:
        raise ShapeError(
            f"input shape {x.shape} incompatible with model input "
            f"{config.input_shape}")
    return x


def _run_forward(params: ParameterSet, x4: np.ndarray, mode: VarianceMode,
                 sigma: float, want_var: bool) -> ForwardCache:
    n = x4.shape[0]
    mean = x4
    var = None
    traces: list[LayerTrace] = []
    for i, spec in enumerate(params.config.layers):
        trace = LayerTrace(spec)
        if isinstance(spec, (Conv, FullyConnected)):
            if isinstance(spec, FullyConnected) and mean.ndim != 2:
                trace.in_shape = mean.shape[1:]
                mean = mean.reshape(n, -1)
                var = None if var is None else var.reshape(n, -1)
            trace.in_mean = mean
            trace.in_var = var
            w, b = params.weights[i], params.biases[i]
            if isinstance(spec, Conv):
                new_mean = conv2d(mean, w, b, spec.stride, spec.padding)
            else:
                new_mean = mean @ w.T + b[None, :]
            if want_var:
                if i == 0:
                    # noise is injected at this pre-activation
                    var = np.full_like(new_mean, max(sigma * sigma, VAR_FLOOR))
                elif mode is VarianceMode.DIAGONAL:
                    if isinstance(spec, Conv):
                        var = floor_var(conv2d(var, w * w, None,
                                               spec.stride, spec.padding))
                    else:
                        var = floor_var(var @ (w * w).T)
                else:
                    var = np.full_like(new_mean, max(sigma * sigma, VAR_FLOOR))
            mean = new_mean
        elif isinstance(spec, ReLU):
            if want_var:
                mean, var, mg, vg = _relu_moments(mean, var)
                trace.mean_gate, trace.var_gate = mg, vg
            else:
                mg = mean >= 0.0
                mean = np.where(mg, mean, 0.0)
                trace.mean_gate = mg
        elif isinstance(spec, MeanPool):
            trace.pool_hw = mean.shape[2:]
            if want_var:
                mean, var, idx = _meanpool_moments(mean, var, spec.window,
                                                   spec.stride)
            else:
                mean, _, idx = _meanpool_moments(mean, mean, spec.window,
                                                 spec.stride)
            trace.selection = idx
        elif isinstance(spec, Flatten):
            trace.in_shape = mean.shape[1:]
            mean = mean.reshape(n, -1)
            var = None if var is None else var.reshape(n, -1)
        traces.append(trace)
    return ForwardCache(traces, x4, mode, sigma, mean, var)


def forward_expectation(params: ParameterSet, x: np.ndarray) -> np.ndarray:
    """Deterministic forward pass: the expectation model's logits."""
    x4 = _check_input(params.config, x)
    cache = _run_forward(params, x4, VarianceMode.DIAGONAL, 0.0, want_var=False)
    out = cache.out_mean
    return out[0] if np.asarray(x).ndim == 3 else out


def forward_expectation_batch(params: ParameterSet, x: np.ndarray,
                              with_cache: bool = False):
    x4 = _check_input(params.config, x)
    cache = _run_forward(params, x4, VarianceMode.DIAGONAL, 0.0, want_var=False)
    return (cache.out_mean, cache) if with_cache else cache.out_mean


def forward_stochastic(params: ParameterSet, x: np.ndarray,
                       mode: VarianceMode = VarianceMode.DIAGONAL
                       ) -> tuple[GaussianTensor, ForwardCache]:
    """Noise-aware forward pass for one example: output class moments plus
    the cache consumed by backprop."""
    x4 = _check_input(params.config, x)
    if x4.shape[0] != 1:
        raise ShapeError("forward_stochastic takes a single example; "
                         "use forward_stochastic_batch for batches")
    cache = _run_forward(params, x4, mode, params.sigma, want_var=True)
    return GaussianTensor(cache.out_mean[0], cache.out_var[0]), cache


def forward_stochastic_batch(params: ParameterSet, x: np.ndarray,
                             mode: VarianceMode = VarianceMode.DIAGONAL
                             ) -> tuple[GaussianTensor, ForwardCache]:
    x4 = _check_input(params.config, x)
    cache = _run_forward(params, x4, mode, params.sigma, want_var=True)
    return GaussianTensor(cache.out_mean, cache.out_var), cache


def _first_preactivation(params: ParameterSet, x: np.ndarray) -> np.ndarray:
    spec = params.config.layers[0]
    w, b = params.weights[0], params.biases[0]
    if isinstance(spec, Conv):
        return conv2d(x[None], w, b, spec.stride, spec.padding)[0]
    return x.reshape(-1) @ w.T + b


def _deterministic_tail(params: ParameterSet, z: np.ndarray) -> np.ndarray:
    """Run layers 1.. on realized activations: exact ReLU and value-max
    pooling, i.e. the network a noisy sample actually traverses."""
    n = z.shape[0]
    act = z
    for i, spec in enumerate(params.config.layers):
        if i == 0:
            continue
        if isinstance(spec, Conv):
            act = conv2d(act, params.weights[i], params.biases[i],
                         spec.stride, spec.padding)
        elif isinstance(spec, FullyConnected):
            if act.ndim != 2:
                act = act.reshape(n, -1)
            act = act @ params.weights[i].T + params.biases[i][None, :]
        elif isinstance(spec, ReLU):
            act = np.maximum(act, 0.0)
        elif isinstance(spec, MeanPool):
            pm, _, _ = _meanpool_moments(act, act, spec.window, spec.stride)
            act = pm
        elif isinstance(spec, Flatten):
            act = act.reshape(n, -1)
    return act


def sampled_logits(params: ParameterSet, x: np.ndarray, sigma: float,
                   n_samples: int, rng: SeededRng,
                   chunk: int = 4096):
    """Yield logits of noisy realizations in chunks of rows."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != params.config.input_shape:
        raise ShapeError(f"expected one input of shape "
                         f"{params.config.input_shape}, got {x.shape}")
    pre = _first_preactivation(params, x)
    gen = rng.generator()
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        noise = gen.normal(0.0, sigma, size=(m,) + pre.shape)
        z = pre[None] + noise
        yield _deterministic_tail(params, z)
        done += m


def sampled_output_moments(params: ParameterSet, x: np.ndarray, sigma: float,
                           n_samples: int, seed: int) -> GaussianTensor:
    """Empirical output mean and unbiased variance over noisy realizations."""
    if n_samples < 2:
        raise ValueError(f"n_samples must be >= 2, got {n_samples}")
    total = None
    total_sq = None
    for logits in sampled_logits(params, x, sigma, n_samples, SeededRng(seed)):
        s = logits.sum(axis=0)
        sq = (logits * logits).sum(axis=0)
        total = s if total is None else total + s
        total_sq = sq if total_sq is None else total_sq + sq
    mean = total / n_samples
    var = (total_sq - n_samples * mean * mean) / (n_samples - 1)
    return GaussianTensor(mean, floor_var(np.maximum(var, 0.0)))


def preset_configs() -> dict[str, ModelConfig]:
    """Reference architectures for 28x28x1 and 32x32x3 ten-class inputs."""
    mnist = ModelConfig(
        input_shape=(1, 28, 28),
        layers=(
            Conv(6, 5, 5), ReLU(), MeanPool(2, 2),
            Conv(16, 5, 5), ReLU(), MeanPool(2, 2),
            Conv(32, 3, 3), ReLU(), MeanPool(2, 2),
            Flatten(),
            FullyConnected(200), ReLU(),
            FullyConnected(200), ReLU(),
            FullyConnected(10),
        ),
        n_classes=10,
    )
    cifar = ModelConfig(
        input_shape=(3, 32, 32),
        layers=(
            Conv(32, 3, 3, padding=1), ReLU(), MeanPool(2, 2),
            Conv(64, 3, 3, padding=1), ReLU(), MeanPool(2, 2),
            Conv(128, 3, 3, padding=1), ReLU(), MeanPool(2, 2),
            Conv(128, 3, 3, padding=1), ReLU(), MeanPool(2, 2),
            Conv(128, 3, 3, padding=1), ReLU(), MeanPool(2, 2),
            Flatten(),
            FullyConnected(256), ReLU(),
            FullyConnected(128), ReLU(),
            FullyConnected(10),
        ),
        n_classes=10,
    )
    return {"mnist_lenet": mnist, "cifar_cnn": cifar}


def conv_as_matrix(weight: np.ndarray, bias, input_shape: tuple[int, int, int],
                   stride: int = 1, padding: int = 0
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Materialize a convolution as (A, b) with vect(out) = A.T vect(in) + b.

    Brute-force kernel placement; intended for validation at small sizes.
    """
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim != 4:
        raise ShapeError("conv_as_matrix expects an (OC,IC,KH,KW) kernel")
    c, h, w = input_shape
    oc, ic, kh, kw = weight.shape
    if ic != c:
        raise ShapeError(f"kernel expects {ic} channels, input has {c}")
    oh, ow = conv_output_hw(h, w, kh, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError("kernel does not fit input")
    a = np.zeros((c * h * w, oc * oh * ow))
    for o in range(oc):
        for i in range(oh):
            for j in range(ow):
                col = (o * oh + i) * ow + j
                for cc in range(ic):
                    for ki in range(kh):
                        hi = i * stride + ki - padding
                        if hi < 0 or hi >= h:
                            continue
                        for kj in range(kw):
                            wj = j * stride + kj - padding
                            if 0 <= wj < w:
                                a[(cc * h + hi) * w + wj, col] = weight[o, cc, ki, kj]
    bias = np.zeros(oc) if bias is None else np.asarray(bias, dtype=np.float64)
    b = np.repeat(bias, oh * ow)
    return a, b


# ---------------------------------------------------------------------------
# Checkpoint format: magic "SNNC", u16 version, length-prefixed config JSON,
# raw little-endian float64 parameter arrays in config order, sigma, the
# sigma-learnable flag, and a trailing 64-bit checksum (first 8 bytes of the
# SHA-256 of everything before it).
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SNNC"
CHECKPOINT_VERSION = 1

_LAYER_CODECS = {
    Conv: ("conv", ("out_channels", "kernel_h", "kernel_w", "stride", "padding")),
    ReLU: ("relu", ()),
    MeanPool: ("meanpool", ("window", "stride")),
    Flatten: ("flatten", ()),
    FullyConnected: ("fc", ("out_units",)),
}
_KIND_TO_CLS = {name: cls for cls, (name, _) in _LAYER_CODECS.items()}


def config_to_dict(config: ModelConfig) -> dict:
    layers = []
    for spec in config.layers:
        kind, fields = _LAYER_CODECS[type(spec)]
        entry = {"kind": kind}
        entry.update({f: getattr(spec, f) for f in fields})
        layers.append(entry)
    return {
        "input_shape": list(config.input_shape),
        "layers": layers,
        "n_classes": config.n_classes,
        "default_sigma": config.default_sigma,
    }


def config_from_dict(d: dict) -> ModelConfig:
    try:
        layers = []
        for entry in d["layers"]:
            cls = _KIND_TO_CLS[entry["kind"]]
            kwargs = {k: v for k, v in entry.items() if k != "kind"}
            layers.append(cls(**kwargs))
        return ModelConfig(tuple(d["input_shape"]), tuple(layers),
                           d["n_classes"], d.get("default_sigma", 0.0))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed model config: {exc}") from exc


def _config_json(config: ModelConfig) -> bytes:
    return json.dumps(config_to_dict(config), sort_keys=True,
                      separators=(",", ":")).encode()


def checkpoint_bytes(params: ParameterSet) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    cfg = _config_json(params.config)
    parts.append(struct.pack("<I", len(cfg)))
    parts.append(cfg)
    for w, b in zip(params.weights, params.biases):
        if w is None:
            continue
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    parts.append(struct.pack("<d", params.sigma))
    parts.append(struct.pack("<B", 1 if params.sigma_learnable else 0))
    payload = b"".join(parts)
    checksum = hashlib.sha256(payload).digest()[:8]
    return payload + checksum


def save_checkpoint(path, params: ParameterSet) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def load_checkpoint(path) -> ParameterSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 + 2 + 4 + 8:
        raise FormatError("checkpoint truncated: missing header")
    payload, checksum = blob[:-8], blob[-8:]
    if payload[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {payload[:4]!r}")
    if hashlib.sha256(payload).digest()[:8] != checksum:
        raise FormatError("checkpoint checksum mismatch")
    (version,) = struct.unpack("<H", payload[4:6])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", payload[6:10])
    off = 10
    if off + cfg_len > len(payload):
        raise FormatError("checkpoint truncated: config block")
    try:
        cfg_dict = json.loads(payload[off:off + cfg_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable config block: {exc}") from exc
    config = config_from_dict(cfg_dict)
    off += cfg_len

    shapes = config.layer_shapes()
    weights, biases = [], []
    for i, spec in enumerate(config.layers):
        if isinstance(spec, Conv):
            wshape = (spec.out_channels, shapes[i][0], spec.kernel_h, spec.kernel_w)
            bshape = (spec.out_channels,)
        elif isinstance(spec, FullyConnected):
            wshape = (spec.out_units, int(np.prod(shapes[i])))
            bshape = (spec.out_units,)
        else:
            weights.append(None)
            biases.append(None)
            continue
        for shape, sink in ((wshape, weights), (bshape, biases)):
            nbytes = int(np.prod(shape)) * 8
            if off + nbytes > len(payload):
                raise FormatError(f"checkpoint truncated: layer {i} tensors")
            arr = np.frombuffer(payload[off:off + nbytes], dtype="<f8")
            sink.append(arr.reshape(shape).astype(np.float64))
            off += nbytes
    if off + 9 != len(payload):
        raise FormatError("checkpoint length does not match its config")
    (sigma,) = struct.unpack("<d", payload[off:off + 8])
    learnable = payload[off + 8] != 0
    return ParameterSet(config, tuple(weights), tuple(biases), sigma,
                        bool(learnable))

"""OS-CNN model family and the FCN baseline.

Every convolution layer is conv -> BatchNorm -> ReLU. In an OS layer the
branch outputs are concatenated along channels before the shared
BatchNorm. Residual blocks add the skip path after the last BatchNorm and
before the final ReLU.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import InvalidArgumentError
from .kernel_config import (
    OSBlockSpec,
    count_block_weights,
    largest_channels,
    select_M,
    select_M_for_rf,
)
from .tensor import Parameter, Tensor

FCN_KERNELS = (8, 5, 3)
FCN_CHANNELS = (128, 256, 128)
# conv weights of the reference univariate FCN: 1*128*8 + 128*256*5 + 256*128*3
FCN_REFERENCE_WEIGHTS = 263168
FCN_SIZE_TOLERANCE = 0.02

MODEL_KINDS = ("OS_CNN", "OS_CNN_RES", "MOS_CNN", "FCN", "FCN_SCALED")
RESIDUAL_ORDER = "add-before-final-relu"
INIT_SCHEME = "fan-in-uniform"


# -- module plumbing --------------------------------------------------------

class Module:
    training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, value in getattr(self, "_buffers", {}).items():
            yield prefix + name, value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode=True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def weight_count(self) -> int:
        """Convolution and FC weights; BatchNorm and bias terms excluded."""
        return sum(p.data.size for p in self.parameters() if p.kind == "weight")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv1d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng):
        self.kernel_size = kernel_size
        self.weight = Parameter(_uniform(rng, (out_channels, in_channels, kernel_size), in_channels * kernel_size))

    def forward(self, x):
        return T.conv1d(x, self.weight, self.kernel_size)


class BatchNorm1d(Module):
    def __init__(self, channels):
        self.gamma = Parameter(np.ones(channels), kind="bn")
        self.beta = Parameter(np.zeros(channels), kind="bn")
        self._buffers = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}

    def forward(self, x):
        b = self._buffers
        return T.batchnorm1d(x, self.gamma, self.beta, b["running_mean"], b["running_var"], self.training)


class Linear(Module):
    def __init__(self, in_features, out_features, rng):
        self.weight = Parameter(_uniform(rng, (in_features, out_features), in_features))
        self.bias = Parameter(np.zeros(out_features), kind="bias")

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class ConvBlock(Module):
    """Parallel convolutions of different kernel sizes, concatenated, then BatchNorm."""

    def __init__(self, in_channels, kernel_sizes, branch_channels, rng):
        self.kernel_sizes = tuple(kernel_sizes)
        self.branches = [Conv1d(in_channels, branch_channels, k, rng) for k in self.kernel_sizes]
        self.out_channels = branch_channels * len(self.kernel_sizes)
        self.bn = BatchNorm1d(self.out_channels)

    def forward(self, x, activate=True):
        out = self.bn(T.multi_conv1d(x, [conv.weight for conv in self.branches]))
        return T.relu(out) if activate else out


class OSBlock(Module):
    def __init__(self, spec: OSBlockSpec, rng, residual=False):
        self.spec = spec
        self.layers = []
        in_ch = spec.in_channels
        for kernels in spec.layer_kernel_lists:
            layer = ConvBlock(in_ch, kernels, spec.branch_channels, rng)
            self.layers.append(layer)
            in_ch = layer.out_channels
        self.out_channels = in_ch
        self.residual = residual
        self.projection = None
        if residual and spec.in_channels != self.out_channels:
            self.projection = ConvBlock(spec.in_channels, (1,), self.out_channels, rng)

    def forward(self, x):
        h = x
        for layer in self.layers[:-1]:
            h = layer(h)
        if not self.residual:
            return self.layers[-1](h)
        h = self.layers[-1](h, activate=False)
        skip = x if self.projection is None else self.projection(x, activate=False)
        return T.relu(T.add(h, skip))


class Classifier(Module):
    """Feature extractor stages followed by GAP and one FC layer."""

    def __init__(self, stages, n_features, n_classes, rng, spec=None):
        self.stages = list(stages)
        self.head = Linear(n_features, n_classes, rng)
        self.n_classes = n_classes
        self.spec = spec

    def features(self, x):
        h = x
        for stage in self.stages:
            h = stage(h)
        return h

    def forward(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim != 3:
            raise InvalidArgumentError(f"expected (batch, variates, length) input, got {x.shape}")
        return self.head(T.global_average_pool(self.features(x)))

    def predict_proba(self, x, batch_size=64) -> np.ndarray:
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                x = np.asarray(x, dtype=np.float64)
                return np.concatenate(
                    [T.softmax(self(x[i : i + batch_size])) for i in range(0, len(x), batch_size)]
                )
        finally:
            self.train(was_training)


class PerVariate(Module):
    """Independent OS blocks, one per input variate, channel-concatenated."""

    def __init__(self, blocks):
        self.blocks = list(blocks)
        self.out_channels = sum(b.out_channels for b in self.blocks)

    def forward(self, x):
        return T.concat_channels([block(_slice_channel(x, i)) for i, block in enumerate(self.blocks)])


def _slice_channel(x, i):
    def backward(g):
        full = np.zeros_like(x.data)
        full[:, i : i + 1, :] = g
        x._accumulate(full)

    return T._result(x.data[:, i : i + 1, :].copy(), (x,), backward, "slice")


# -- model specs ------------------------------------------------------------

@dataclass
class ModelSpec:
    kind: str
    n_classes: int
    n_variates: int = 1
    series_length: int | None = None
    depth: int = 1
    rf_override: int | None = None
    branch_channels: int | None = None
    weight_budget: int = FCN_REFERENCE_WEIGHTS
    fcn_mode: str = "reference"
    rf_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise InvalidArgumentError(f"unknown model kind {self.kind!r}")
        if self.n_classes < 2:
            raise InvalidArgumentError(f"a classifier needs at least 2 classes, got {self.n_classes}")
        if self.n_variates < 1:
            raise InvalidArgumentError("n_variates must be >= 1")
        if self.kind == "OS_CNN_RES" and self.depth < 1:
            raise InvalidArgumentError("residual depth must be >= 1")
        if self.kind == "FCN_SCALED" and self.fcn_mode not in ("fixed_channels", "fixed_size"):
            raise InvalidArgumentError("FCN_SCALED needs fcn_mode fixed_channels or fixed_size")
        if self.kind == "MOS_CNN" and self.n_variates < 2:
            raise InvalidArgumentError("MOS-CNN needs at least 2 variates; use OS-CNN for univariate data")

    def kernel_lists(self):
        if self.rf_override is not None:
            M = select_M_for_rf(self.rf_override)
        elif self.series_length is not None:
            M = select_M(self.series_length)
        else:
            raise InvalidArgumentError("an OS model needs series_length or rf_override")
        return OSBlockSpec.canonical(M).layer_kernel_lists

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "ModelSpec":
        return cls(**d)


def _os_stage_specs(spec: ModelSpec, c: int) -> list[list[OSBlockSpec]]:
    """Block specs per stage for branch channel count ``c``."""
    lists = spec.kernel_lists()
    if spec.kind == "MOS_CNN":
        per_variate = [OSBlockSpec(lists, c, 1) for _ in range(spec.n_variates)]
        merged_in = sum(b.out_channels for b in per_variate)
        return [per_variate, [OSBlockSpec(lists, c, merged_in)]]
    depth = spec.depth if spec.kind == "OS_CNN_RES" else 1
    blocks, in_ch = [], spec.n_variates
    for _ in range(depth):
        block = OSBlockSpec(lists, c, in_ch)
        blocks.append(block)
        in_ch = block.out_channels
    return [blocks]


def os_conv_weights(spec: ModelSpec, c: int) -> int:
    """Analytic convolution weight count of an OS model, including residual projections."""
    total = 0
    for stage in _os_stage_specs(spec, c):
        for i, block in enumerate(stage):
            total += count_block_weights(block).total_weights
            residual = spec.kind == "OS_CNN_RES" and i > 0
            if residual and block.in_channels != block.out_channels:
                total += block.in_channels * block.out_channels
    return total


def resolve_branch_channels(spec: ModelSpec) -> int:
    if spec.branch_channels is not None:
        if spec.branch_channels < 1:
            raise InvalidArgumentError("branch_channels must be >= 1")
        return spec.branch_channels
    return largest_channels(spec.weight_budget, lambda c: os_conv_weights(spec, c))


def analytic_weight_count(spec: ModelSpec) -> int:
    """Exact weight count a built model should report (conv + FC, no bias/BN)."""
    if spec.kind in ("FCN", "FCN_SCALED"):
        kernels, channels = fcn_architecture(spec)
        in_ch, total = spec.n_variates, 0
        for k, ch in zip(kernels, channels):
            total += in_ch * ch * k
            in_ch = ch
        return total + channels[-1] * spec.n_classes
    c = resolve_branch_channels(spec)
    final = _os_stage_specs(spec, c)[-1][-1]
    return os_conv_weights(spec, c) + final.out_channels * spec.n_classes


# -- builders ---------------------------------------------------------------

def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def build_os_cnn(spec: ModelSpec, seed=0) -> Classifier:
    if spec.kind not in ("OS_CNN", "OS_CNN_RES"):
        raise InvalidArgumentError(f"build_os_cnn cannot build {spec.kind}")
    rng = _rng(seed)
    c = resolve_branch_channels(spec)
    blocks = [OSBlock(b, rng, residual=i > 0) for i, b in enumerate(_os_stage_specs(spec, c)[0])]
    return Classifier(blocks, blocks[-1].out_channels, spec.n_classes, rng, spec)


def build_os_cnn_res(depth: int, spec: ModelSpec, seed=0) -> Classifier:
    if depth < 1:
        raise InvalidArgumentError("residual depth must be >= 1")
    d = spec.to_dict()
    d.update(kind="OS_CNN_RES", depth=depth)
    return build_os_cnn(ModelSpec.from_dict(d), seed)


def build_mos_cnn(spec: ModelSpec, seed=0) -> Classifier:
    if spec.n_variates < 2:
        raise InvalidArgumentError("MOS-CNN needs at least 2 variates")
    rng = _rng(seed)
    c = resolve_branch_channels(spec)
    per_variate_specs, (merged_spec,) = _os_stage_specs(spec, c)
    front = PerVariate(OSBlock(b, rng) for b in per_variate_specs)
    back = OSBlock(merged_spec, rng)
    return Classifier([front, back], back.out_channels, spec.n_classes, rng, spec)


def fcn_architecture(spec: ModelSpec) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Kernel sizes and channel counts of the (possibly scaled) FCN."""
    if spec.kind == "FCN" or spec.fcn_mode == "reference":
        return FCN_KERNELS, FCN_CHANNELS
    kernels = tuple(int(round(k * spec.rf_scale)) for k in FCN_KERNELS)
    if min(kernels) < 1:
        raise InvalidArgumentError(f"rf_scale {spec.rf_scale} shrinks a kernel below size 1")
    if spec.fcn_mode == "fixed_channels":
        return kernels, FCN_CHANNELS
    return kernels, _fixed_size_channels(kernels, spec.n_variates)


def _fixed_size_channels(kernels, n_variates):
    """Channels (w, c2, w) whose weight count is closest to the reference FCN's."""
    k1, k2, k3 = kernels
    target = n_variates * FCN_CHANNELS[0] * FCN_KERNELS[0] + FCN_CHANNELS[0] * FCN_CHANNELS[1] * (FCN_KERNELS[1] + FCN_KERNELS[2])
    # shrink the 128/256/128 widths uniformly, then re-solve the middle width for the remainder
    best = None
    w0 = 128 * math.sqrt((FCN_KERNELS[1] + FCN_KERNELS[2]) / (k2 + k3))
    for w in range(max(1, int(w0) - 2), int(w0) + 3):
        c2 = max(1, round((target - n_variates * w * k1) / (w * (k2 + k3))))
        weights = n_variates * w * k1 + w * c2 * (k2 + k3)
        if best is None or abs(weights - target) < best[0]:
            best = (abs(weights - target), (w, c2, w))
    return best[1]


def build_fcn_baseline(rf_scale=1.0, mode="reference", n_classes=2, n_variates=1, seed=0) -> Classifier:
    if mode not in ("reference", "fixed_channels", "fixed_size"):
        raise InvalidArgumentError(f"unknown FCN mode {mode!r}")
    kind = "FCN" if mode == "reference" else "FCN_SCALED"
    spec = ModelSpec(kind, n_classes, n_variates, fcn_mode=mode, rf_scale=rf_scale)
    return _build_fcn(spec, seed)


def _build_fcn(spec: ModelSpec, seed=0) -> Classifier:
    rng = _rng(seed)
    kernels, channels = fcn_architecture(spec)
    layers, in_ch = [], spec.n_variates
    for k, ch in zip(kernels, channels):
        layers.append(ConvBlock(in_ch, (k,), ch, rng))
        in_ch = ch
    return Classifier(layers, in_ch, spec.n_classes, rng, spec)


def fcn_receptive_field(spec: ModelSpec) -> int:
    kernels, _ = fcn_architecture(spec)
    return 1 + sum(k - 1 for k in kernels)


def build_model(spec: ModelSpec, seed=0) -> Classifier:
    if spec.kind in ("OS_CNN", "OS_CNN_RES"):
        return build_os_cnn(spec, seed)
    if spec.kind == "MOS_CNN":
        return build_mos_cnn(spec, seed)
    return _build_fcn(spec, seed)


# -- ensembles --------------------------------------------------------------

def ensemble_average(probabilities) -> np.ndarray:
    probs = [np.asarray(p, dtype=np.float64) for p in probabilities]
    if not probs:
        raise InvalidArgumentError("an ensemble needs at least one member")
    if any(p.shape[-1] != probs[0].shape[-1] for p in probs):
        raise InvalidArgumentError("ensemble members disagree on the number of classes")
    if len(probs) == 1:
        return probs[0].copy()
    return np.mean(probs, axis=0)


def ensemble_predict(models, x) -> np.ndarray:
    """Mean of the members' softmax outputs; ``argmax`` of the result is the prediction."""
    if not models:
        raise InvalidArgumentError("an ensemble needs at least one member")
    if len({m.n_classes for m in models}) != 1:
        raise InvalidArgumentError("ensemble members disagree on the number of classes")
    return ensemble_average([m.predict_proba(x) for m in models])


def build_uos_cnn(spec: ModelSpec, seeds=(0, 1, 2, 3, 4)) -> list[Classifier]:
    """Five OS-CNN-RES(2) members; combine with :func:`ensemble_predict`."""
    return [build_os_cnn_res(2, spec, seed) for seed in seeds]


# -- checkpoints ------------------------------------------------------------

def state_dict(model: Module) -> dict:
    params = {name: p.data for name, p in model.named_parameters()}
    params.update({name: b for name, b in model.named_buffers()})
    return params


def save_checkpoint(model: Classifier, path) -> None:
    """JSON checkpoint: name -> {shape, row-major values}, plus the model spec."""
    doc = {
        "format": "omniscale-checkpoint/1",
        "spec": model.spec.to_dict() if model.spec is not None else None,
        "tensors": {
            name: {"shape": list(arr.shape), "values": arr.ravel().tolist()}
            for name, arr in state_dict(model).items()
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path, model: Classifier | None = None) -> Classifier:
    doc = json.loads(Path(path).read_text())
    if model is None:
        model = build_model(ModelSpec.from_dict(doc["spec"]))
    target = state_dict(model)
    if set(target) != set(doc["tensors"]):
        raise InvalidArgumentError("checkpoint tensors do not match the model")
    for name, entry in doc["tensors"].items():
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != target[name].shape:
            raise InvalidArgumentError(f"shape mismatch for {name}: {arr.shape} vs {target[name].shape}")
        target[name][...] = arr
    return model

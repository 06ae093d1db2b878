"""Landmark regression networks.

``LanNetwork`` runs one independent convolutional feature extractor per
landmark patch, concatenates the features landmark-major and regresses the
2M-dimensional increment with two fully connected layers. ``StackNetwork``
is the ablation that stacks all patches along the channel axis and feeds
them through a single convolutional stack with a matched parameter budget.

Both take patches shaped ``(batch, M, p, p, C)`` and return ``(batch, 2M)``.
Pixel values are shifted by ``input_center`` (mid-grey) before the first
convolution so the inputs are roughly zero-mean.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from .errors import DataError, ShapeError
from .tensor import DTYPE, LayerSpec, Sequential

CONV_WIDTHS = (16, 32, 64)
CONV_KERNELS = (3, 2, 2)
STACK_WIDTHS = (32, 64, 96)


def _same_padding(k: int) -> tuple[int, int, int, int]:
    # even kernels pad only bottom/right so stride-1 output keeps the input size
    lo = (k - 1) // 2
    hi = k - 1 - lo
    return (lo, hi, lo, hi)


def conv_stack_specs(patch_size: int, in_channels: int, widths, kernels=CONV_KERNELS):
    """conv -> 2x2/2 ceil-mode pool -> relu, once per width, then flatten.

    ReLU commutes with max pooling, so applying it after the pool gives the
    same values and gradients as conv -> relu -> pool on a quarter of the data.
    """
    specs = []
    shape = (patch_size, patch_size, in_channels)
    c = in_channels
    for width, k in zip(widths, kernels):
        for spec in (LayerSpec("conv2d", (k, k, c, width), _same_padding(k), 1),
                     LayerSpec("maxpool2d", (2, 2), stride=2),
                     LayerSpec("relu")):
            specs.append(spec)
            shape = spec.output_shape(shape)
        c = width
    specs.append(LayerSpec("flatten"))
    return specs, shape


def spec_shapes(specs, in_shape):
    """Per-layer output shapes (single example) for a list of LayerSpecs."""
    shapes = []
    shape = tuple(in_shape)
    for spec in specs:
        shape = spec.output_shape(shape)
        shapes.append(shape)
    return shapes


def count_params(specs) -> int:
    total = 0
    for s in specs:
        if s.kind == "conv2d":
            kh, kw, cin, cout = s.kernel
            total += kh * kw * cin * cout + cout
        elif s.kind == "fc":
            n, m = s.kernel
            total += n * m + m
    return total


@dataclass(frozen=True)
class LanSpec:
    landmark_count: int
    patch_size: int = 57
    channels: int = 3
    feature_dim: int = 10
    hidden_dim: int = 256
    input_center: float = 0.5

    @property
    def output_dim(self) -> int:
        return 2 * self.landmark_count

    def subnet_specs(self) -> list[LayerSpec]:
        specs, shape = conv_stack_specs(self.patch_size, self.channels, CONV_WIDTHS)
        specs.append(LayerSpec("fc", (int(np.prod(shape)), self.feature_dim)))
        return specs

    def head_specs(self) -> list[LayerSpec]:
        return [LayerSpec("fc", (self.landmark_count * self.feature_dim, self.hidden_dim)),
                LayerSpec("relu"),
                LayerSpec("fc", (self.hidden_dim, self.output_dim))]


@dataclass(frozen=True)
class StackSpec:
    landmark_count: int
    patch_size: int = 57
    channels: int = 3
    hidden_dim: int = 579
    input_center: float = 0.5

    @property
    def output_dim(self) -> int:
        return 2 * self.landmark_count

    def layer_specs(self) -> list[LayerSpec]:
        specs, shape = conv_stack_specs(self.patch_size, self.channels * self.landmark_count,
                                        STACK_WIDTHS)
        return specs + [LayerSpec("fc", (int(np.prod(shape)), self.hidden_dim)),
                        LayerSpec("relu"),
                        LayerSpec("fc", (self.hidden_dim, self.output_dim))]

    @classmethod
    def matched_to(cls, lan: LanSpec) -> "StackSpec":
        """Pick the hidden width whose total parameter count is closest to ``lan``'s."""
        budget = parameter_count(lan)
        def make(h):
            return cls(lan.landmark_count, lan.patch_size, lan.channels, h, lan.input_center)

        base = parameter_count(make(1))
        per_unit = parameter_count(make(2)) - base
        h = max(1, int(round((budget - base) / per_unit)) + 1)
        spec = make(h)
        if abs(parameter_count(spec) - budget) > 0.01 * budget:
            raise ShapeError(
                f"cannot match a {budget}-parameter budget with the stack network "
                f"(closest is {parameter_count(spec)})")
        return spec


def parameter_count(spec) -> int:
    if isinstance(spec, LanSpec):
        return (spec.landmark_count * count_params(spec.subnet_specs())
                + count_params(spec.head_specs()))
    return count_params(spec.layer_specs())


def _init_head(head: Sequential, zero_output: bool):
    if zero_output:
        out = head.layers[-1]
        out.params["weight"][...] = 0.0


class _Network:
    spec = None
    name = ""

    def named_params(self):
        raise NotImplementedError

    def n_params(self) -> int:
        return sum(layer.params[name].size for _, layer, name in self.named_params())

    def optimizer_entries(self):
        """``(path, param, grad, decay)`` tuples for :class:`Adadelta`."""
        for path, layer, name in self.named_params():
            yield path, layer.params[name], layer.grads[name], name == "weight"

    def zero_weights(self):
        for _, layer, name in self.named_params():
            layer.params[name][...] = 0.0

    def tensors(self, prefix=""):
        for path, layer, name in self.named_params():
            yield prefix + path, layer.kind, layer.params[name]

    def load_tensors(self, tensors):
        own = {path: (layer, name) for path, layer, name in self.named_params()}
        seen = set()
        for path, _, arr in tensors:
            if path not in own:
                raise DataError(f"unexpected tensor {path} in checkpoint")
            layer, name = own[path]
            if layer.params[name].shape != arr.shape:
                raise DataError(f"{path}: checkpoint shape {arr.shape} "
                                f"vs network {layer.params[name].shape}")
            layer.params[name] = np.array(arr, dtype=DTYPE)
            seen.add(path)
        missing = set(own) - seen
        if missing:
            raise DataError(f"checkpoint lacks {sorted(missing)[:3]}...")

    def _check_patches(self, patches):
        s = self.spec
        expect = (s.landmark_count, s.patch_size, s.patch_size, s.channels)
        if patches.ndim != 5 or patches.shape[1:] != expect:
            raise ShapeError(f"patches {patches.shape} do not match (batch, {expect})")


class LanNetwork(_Network):
    name = "lan"

    def __init__(self, spec: LanSpec, rng: np.random.Generator | None = None,
                 zero_output: bool = True):
        self.spec = spec
        sub = spec.subnet_specs()
        self.subnets = [Sequential.from_specs(sub, rng) for _ in range(spec.landmark_count)]
        for net in self.subnets:
            net.layers[0].input_grad = False   # patches are data, not parameters
        self.head = Sequential.from_specs(spec.head_specs(), rng)
        _init_head(self.head, zero_output and rng is not None)

    def named_params(self):
        for j, net in enumerate(self.subnets):
            yield from net.named_params(f"sub{j}/")
        yield from self.head.named_params("head/")

    def features(self, patches: np.ndarray) -> np.ndarray:
        """Per-landmark feature vectors, shape ``(batch, M, feature_dim)``."""
        patches = np.asarray(patches, dtype=DTYPE)
        self._check_patches(patches)
        patches = patches - self.spec.input_center
        return np.stack([net.forward(patches[:, j]) for j, net in enumerate(self.subnets)],
                        axis=1)

    def forward(self, patches: np.ndarray) -> np.ndarray:
        feats = self.features(patches)
        return self.head.forward(feats.reshape(feats.shape[0], -1))

    def backward(self, dout: np.ndarray) -> None:
        dfeat = self.head.backward(dout).reshape(dout.shape[0], self.spec.landmark_count, -1)
        for j, net in enumerate(self.subnets):
            net.backward(dfeat[:, j])


def stack_patches(patches: np.ndarray) -> np.ndarray:
    """(batch, M, p, p, C) -> (batch, p, p, M*C), landmark-major channels."""
    b, m, p, _, c = patches.shape
    return patches.transpose(0, 2, 3, 1, 4).reshape(b, p, p, m * c)


class StackNetwork(_Network):
    name = "stack"

    def __init__(self, spec: StackSpec, rng: np.random.Generator | None = None,
                 zero_output: bool = True):
        self.spec = spec
        self.net = Sequential.from_specs(spec.layer_specs(), rng)
        self.net.layers[0].input_grad = False
        _init_head(self.net, zero_output and rng is not None)

    def named_params(self):
        yield from self.net.named_params("stack/")

    def forward(self, patches: np.ndarray) -> np.ndarray:
        patches = np.asarray(patches, dtype=DTYPE)
        self._check_patches(patches)
        return self.net.forward(stack_patches(patches - self.spec.input_center))

    def backward(self, dout: np.ndarray) -> None:
        self.net.backward(dout)


def stack_forward(stacked: np.ndarray, net: StackNetwork) -> np.ndarray:
    """Single-example forward on an already channel-stacked ``(p, p, C*M)`` tensor."""
    s = net.spec
    if stacked.shape != (s.patch_size, s.patch_size, s.channels * s.landmark_count):
        raise ShapeError(f"stacked input {stacked.shape} does not match {s}")
    return net.net.forward(np.asarray(stacked, dtype=DTYPE)[None] - s.input_center)[0]


def lan_forward(patches: np.ndarray, net: LanNetwork) -> np.ndarray:
    """Single-example forward: ``patches`` is ``(M, p, p, C)``."""
    patches = np.asarray(patches)
    if patches.ndim != 4 or patches.shape[0] != net.spec.landmark_count:
        raise ShapeError(f"expected {net.spec.landmark_count} patches, got {patches.shape}")
    return net.forward(patches[None])[0]


def build_network(spec, rng=None, zero_output=True):
    if isinstance(spec, LanSpec):
        return LanNetwork(spec, rng, zero_output)
    return StackNetwork(spec, rng, zero_output)


def save_networks(path, nets, extra_meta: dict | None = None) -> int:
    """Save one network or a cascade (list) into a single checkpoint file."""
    if not isinstance(nets, (list, tuple)):
        nets = [nets]
    first = nets[0]
    meta = {"network": first.name, "spec": asdict(first.spec), "stages": len(nets)}
    meta.update(extra_meta or {})
    tensors = []
    for k, net in enumerate(nets):
        prefix = f"stage{k}/" if len(nets) > 1 else ""
        tensors.extend(net.tensors(prefix))
    return checkpoint.save_tensors(path, tensors, meta)


def load_networks(path) -> tuple[list[_Network], dict]:
    meta, tensors = checkpoint.load_tensors(path)
    kind = meta.get("network")
    if kind == "lan":
        spec = LanSpec(**meta["spec"])
    elif kind == "stack":
        spec = StackSpec(**meta["spec"])
    else:
        raise DataError(f"{path}: not a network checkpoint")
    stages = int(meta.get("stages", 1))
    nets = []
    for k in range(stages):
        net = build_network(spec)
        prefix = f"stage{k}/" if stages > 1 else ""
        net.load_tensors([(n[len(prefix):], kd, a) for n, kd, a in tensors if n.startswith(prefix)]
                         if prefix else tensors)
        nets.append(net)
    return nets, meta

"""The three CNNs: residual enhancement generator, texture discriminator,
and the frozen VGG-19 feature stack used by the content loss.

All forward code runs on CPU tensors; weights ship in the binary
container format (see `container`).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import container
from .errors import SchemaError, ShapeError, UnknownLayer

TANH_SCALE = 0.58
TANH_OFFSET = 0.5
LEAKY_SLOPE = 0.2

# VGG-19 feature stack: (name, in_channels, out_channels); "pool" between blocks
VGG19_LAYOUT = [
    ("conv1_1", 3, 64), ("conv1_2", 64, 64), "pool",
    ("conv2_1", 64, 128), ("conv2_2", 128, 128), "pool",
    ("conv3_1", 128, 256), ("conv3_2", 256, 256), ("conv3_3", 256, 256), ("conv3_4", 256, 256), "pool",
    ("conv4_1", 256, 512), ("conv4_2", 512, 512), ("conv4_3", 512, 512), ("conv4_4", 512, 512), "pool",
    ("conv5_1", 512, 512), ("conv5_2", 512, 512), ("conv5_3", 512, 512), ("conv5_4", 512, 512),
]
VGG_MEAN_RGB = (123.68, 116.779, 103.939)


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) truncated at 2 std, via rejection resampling."""
    out = rng.standard_normal(shape)
    mask = np.abs(out) > 2.0
    while mask.any():
        out[mask] = rng.standard_normal(int(mask.sum()))
        mask = np.abs(out) > 2.0
    return (out * std).astype(np.float64)


def _init_module(module: nn.Module, seed: int) -> None:
    """Fan-in-scaled truncated-normal conv/linear init, deterministic per seed."""
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                w = _truncated_normal(rng, tuple(m.weight.shape), np.sqrt(2.0 / fan_in))
                m.weight.copy_(torch.from_numpy(w))
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.running_mean.zero_()
                m.running_var.fill_(1.0)


def _reflect_conv(x: torch.Tensor, conv: nn.Conv2d) -> torch.Tensor:
    p = conv.kernel_size[0] // 2
    if p:
        x = F.pad(x, (p, p, p, p), mode="reflect")
    return conv(x)


class ResidualBlock(nn.Module):
    """x + relu(bn(conv(relu(bn(conv(x)))))), 3x3 convs, reflect padding."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv_a = nn.Conv2d(channels, channels, 3)
        self.bn_a = nn.BatchNorm2d(channels)
        self.conv_b = nn.Conv2d(channels, channels, 3)
        self.bn_b = nn.BatchNorm2d(channels)

    def forward(self, x):
        y = F.relu(self.bn_a(_reflect_conv(x, self.conv_a)))
        y = F.relu(self.bn_b(_reflect_conv(y, self.conv_b)))
        return x + y


class Generator(nn.Module):
    """Fully-convolutional residual enhancement network.

    9x9 input conv, four residual blocks, two 3x3 convs, 9x9 output conv;
    ReLU everywhere except the output, which gets a scaled tanh mapped to
    [0, 1] and clamped. Reflect padding keeps output size equal to input.
    """

    def __init__(self, channels: int = 64):
        super().__init__()
        self.channels = channels
        self.conv_in = nn.Conv2d(3, channels, 9)
        self.blocks = nn.ModuleList(ResidualBlock(channels) for _ in range(4))
        self.conv_p1 = nn.Conv2d(channels, channels, 3)
        self.conv_p2 = nn.Conv2d(channels, channels, 3)
        self.conv_out = nn.Conv2d(channels, 3, 9)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W) batch, got {tuple(x.shape)}")
        if x.shape[2] < 16 or x.shape[3] < 16:
            raise ShapeError("generator input must be at least 16x16")
        y = F.relu(_reflect_conv(x, self.conv_in))
        for block in self.blocks:
            y = block(y)
        y = F.relu(_reflect_conv(y, self.conv_p1))
        y = F.relu(_reflect_conv(y, self.conv_p2))
        y = _reflect_conv(y, self.conv_out)
        return torch.clamp(torch.tanh(y) * TANH_SCALE + TANH_OFFSET, 0.0, 1.0)


@dataclass(frozen=True)
class DiscriminatorConfig:
    """Conv channels/kernels are configuration; strides 4,2,1,1,2 are fixed."""

    channels: tuple[int, ...] = (48, 128, 192, 192, 128)
    kernels: tuple[int, ...] = (11, 5, 3, 3, 3)
    fc_width: int = 1024
    input_size: int = 100


STRIDES = (4, 2, 1, 1, 2)


class Discriminator(nn.Module):
    """Five-conv texture classifier on grayscale 100x100 inputs.

    LeakyReLU(0.2) after every conv; batch-norm on convs 2-5; flatten into
    a 1024-wide FC layer, then a single logit with sigmoid.
    """

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        convs, bns = [], []
        c_in = 1
        size = cfg.input_size
        for i, (c_out, k, s) in enumerate(zip(cfg.channels, cfg.kernels, STRIDES)):
            convs.append(nn.Conv2d(c_in, c_out, k, stride=s, padding=k // 2))
            bns.append(nn.BatchNorm2d(c_out) if i > 0 else nn.Identity())
            size = (size + 2 * (k // 2) - k) // s + 1
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.bns = nn.ModuleList(bns)
        self.final_size = size
        self.fc1 = nn.Linear(c_in * size * size, cfg.fc_width)
        self.fc2 = nn.Linear(cfg.fc_width, 1)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected (N, 1, H, W) batch, got {tuple(x.shape)}")
        if x.shape[2] != self.cfg.input_size or x.shape[3] != self.cfg.input_size:
            raise ShapeError(
                f"discriminator input must be {self.cfg.input_size}x{self.cfg.input_size}"
            )
        for conv, bn in zip(self.convs, self.bns):
            x = F.leaky_relu(bn(conv(x)), LEAKY_SLOPE)
        x = F.leaky_relu(self.fc1(x.flatten(1)), LEAKY_SLOPE)
        return torch.sigmoid(self.fc2(x)).squeeze(1)


class Vgg19Features(nn.Module):
    """Frozen VGG-19 conv stack through conv5_4, for the content loss.

    Input is RGB in [0, 1]; preprocessing scales to [0, 255] and subtracts
    the ImageNet mean, no std division. `forward` returns the activations
    after the ReLU of the requested conv layer.
    """

    def __init__(self, weights: dict[str, np.ndarray], checksum: str = ""):
        super().__init__()
        self.checksum = checksum
        self.convs = nn.ModuleDict()
        for entry in VGG19_LAYOUT:
            if entry == "pool":
                continue
            name, c_in, c_out = entry
            conv = nn.Conv2d(c_in, c_out, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.from_numpy(weights[f"{name}.weight"]))
                conv.bias.copy_(torch.from_numpy(weights[f"{name}.bias"]))
            self.convs[name] = conv
        for p in self.parameters():
            p.requires_grad_(False)

    @staticmethod
    def layer_names() -> list[str]:
        return [f"relu{e[0][4:]}" for e in VGG19_LAYOUT if e != "pool"]

    def forward(self, x: torch.Tensor, layer: str = "relu5_4") -> torch.Tensor:
        if layer not in self.layer_names():
            raise UnknownLayer(f"unknown VGG layer {layer!r}")
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W) batch, got {tuple(x.shape)}")
        if x.shape[2] < 32 or x.shape[3] < 32:
            raise ShapeError("VGG input must be at least 32x32")
        mean = torch.tensor(VGG_MEAN_RGB, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
        x = x * 255.0 - mean
        target = "conv" + layer[4:]
        for entry in VGG19_LAYOUT:
            if entry == "pool":
                x = F.max_pool2d(x, 2, 2)
                continue
            name = entry[0]
            x = F.relu(self.convs[name](x))
            if name == target:
                return x
        raise UnknownLayer(f"unknown VGG layer {layer!r}")  # pragma: no cover


def generator_init(seed: int, channels: int = 64) -> Generator:
    gen = Generator(channels)
    _init_module(gen, seed)
    return gen


def discriminator_init(seed: int, cfg: DiscriminatorConfig = DiscriminatorConfig()) -> Discriminator:
    disc = Discriminator(cfg)
    _init_module(disc, seed)
    return disc


def generator_forward(gen: Generator, batch: torch.Tensor, mode: str = "infer") -> torch.Tensor:
    """Run the generator in `train` (batch stats) or `infer` (running stats) mode."""
    gen.train(mode == "train")
    if mode == "infer":
        with torch.no_grad():
            return gen(batch)
    return gen(batch)


def discriminator_forward(disc: Discriminator, batch: torch.Tensor, mode: str = "infer") -> torch.Tensor:
    disc.train(mode == "train")
    if mode == "infer":
        with torch.no_grad():
            return disc(batch)
    return disc(batch)


def vgg_load(path) -> Vgg19Features:
    """Load VGG-19 weights from a container file, validating the layer table."""
    kind, tensors = container.load_tensors(path, expect_kind="vgg19")
    for entry in VGG19_LAYOUT:
        if entry == "pool":
            continue
        name, c_in, c_out = entry
        for suffix, shape in ((".weight", (c_out, c_in, 3, 3)), (".bias", (c_out,))):
            t = tensors.get(name + suffix)
            if t is None:
                raise SchemaError(f"VGG container missing tensor {name + suffix!r}")
            if tuple(t.shape) != shape:
                raise SchemaError(
                    f"VGG tensor {name + suffix!r} has shape {tuple(t.shape)}, expected {shape}"
                )
    digest = hashlib.sha256()
    for name in sorted(tensors):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(tensors[name]).tobytes())
    return Vgg19Features(tensors, checksum=digest.hexdigest())


def vgg_features(vgg: Vgg19Features, batch: torch.Tensor, layer: str = "relu5_4") -> torch.Tensor:
    return vgg(batch, layer)


def _state_tensors(module: nn.Module) -> dict[str, np.ndarray]:
    out = {}
    for name, t in module.state_dict().items():
        arr = t.detach().cpu().numpy()
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)  # num_batches_tracked counters
        out[name] = arr
    return out


def weights_save(net: nn.Module, path) -> None:
    """Serialize a generator or discriminator (params + BN stats) to a container."""
    if isinstance(net, Generator):
        kind = "generator"
    elif isinstance(net, Discriminator):
        kind = "discriminator"
    else:
        raise SchemaError(f"cannot serialize {type(net).__name__}")
    tensors = _state_tensors(net)
    if kind == "discriminator":
        # the conv schedule maps several input sizes to the same final size,
        # so the input size must travel with the weights
        tensors["meta.input_size"] = np.array(float(net.cfg.input_size), dtype=np.float32)
    container.save_tensors(path, kind, tensors)


def _load_state(net: nn.Module, tensors: dict[str, np.ndarray], path) -> None:
    state = net.state_dict()
    if set(state) != set(tensors):
        missing = set(state) ^ set(tensors)
        raise SchemaError(f"tensor name mismatch in {path}: {sorted(missing)[:4]}")
    for name, arr in tensors.items():
        if tuple(state[name].shape) != tuple(arr.shape):
            raise SchemaError(f"tensor {name!r} has wrong shape in {path}")
        state[name] = torch.from_numpy(arr).to(state[name].dtype)
    net.load_state_dict(state)


def weights_load(path, expect_kind: str | None = None) -> nn.Module:
    """Rebuild a generator/discriminator from a container; config is inferred
    from tensor shapes."""
    kind, tensors = container.load_tensors(path, expect_kind=expect_kind)
    if kind == "generator":
        if "conv_in.weight" not in tensors:
            raise SchemaError(f"not a generator container: {path}")
        net: nn.Module = Generator(channels=tensors["conv_in.weight"].shape[0])
    elif kind == "discriminator":
        if "convs.0.weight" not in tensors:
            raise SchemaError(f"not a discriminator container: {path}")
        channels = tuple(tensors[f"convs.{i}.weight"].shape[0] for i in range(5))
        kernels = tuple(tensors[f"convs.{i}.weight"].shape[2] for i in range(5))
        fc_width = tensors["fc1.weight"].shape[0]
        flat = tensors["fc1.weight"].shape[1]
        size = int(round(np.sqrt(flat / channels[-1])))

        def _final_size(n: int) -> int:
            for k, s in zip(kernels, STRIDES):
                n = (n + 2 * (k // 2) - k) // s + 1
            return n

        meta = tensors.pop("meta.input_size", None)
        if meta is not None:
            input_size = int(meta)
        else:
            # older containers lack the meta entry; search the conv schedule
            input_size = next((n for n in range(16, 1025) if _final_size(n) == size), None)
        if input_size is None or _final_size(input_size) != size:
            raise SchemaError(f"inconsistent discriminator geometry in {path}")
        net = Discriminator(
            DiscriminatorConfig(channels=channels, kernels=kernels, fc_width=fc_width, input_size=input_size)
        )
    else:
        raise SchemaError(f"unknown network_kind {kind!r} in {path}")
    _load_state(net, tensors, path)
    return net

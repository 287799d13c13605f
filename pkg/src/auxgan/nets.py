"""U-Net generators and PatchGAN discriminators (instance-normalized)."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .errors import InvalidArgumentError, InvalidConfigError

KERNEL = 4
CHECKPOINT_FORMAT = "auxgan-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 1
    out_channels: int = 1
    base_width: int = 32
    depth: int = 5
    norm: str = "instance"

    def __post_init__(self):
        if self.depth < 1 or self.base_width < 1:
            raise InvalidConfigError("depth and base_width must be >= 1")
        if self.norm != "instance":
            raise InvalidConfigError(f"unsupported norm {self.norm!r}")


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 1
    base_width: int = 64
    n_strided_layers: int = 3
    conditional: bool = False
    condition_channels: int = 0
    norm: str = "instance"

    def __post_init__(self):
        if self.n_strided_layers < 1:
            raise InvalidConfigError("n_strided_layers must be >= 1")
        if self.conditional and self.condition_channels < 1:
            raise InvalidConfigError("a conditional discriminator needs condition_channels >= 1")
        if not self.conditional and self.condition_channels:
            raise InvalidConfigError("condition_channels set on an unconditional discriminator")
        if self.norm != "instance":
            raise InvalidConfigError(f"unsupported norm {self.norm!r}")

    @property
    def total_in_channels(self):
        return self.in_channels + self.condition_channels


def _norm(ch):
    return nn.InstanceNorm2d(ch, affine=False, track_running_stats=False)


class UnetGenerator(nn.Module):
    """pix2pix-style U-Net: ``depth`` stride-2 4x4 convolutions down, mirrored
    transposed convolutions up, skip connections at every level, tanh out."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w, d = spec.base_width, spec.depth
        chans = [min(w * 2**i, w * 8) for i in range(d)]

        self.down = nn.ModuleList()
        for i in range(d):
            cin = spec.in_channels if i == 0 else chans[i - 1]
            layers = [] if i == 0 else [nn.LeakyReLU(0.2, True)]
            layers.append(nn.Conv2d(cin, chans[i], KERNEL, 2, 1))
            if 0 < i < d - 1:
                layers.append(_norm(chans[i]))
            self.down.append(nn.Sequential(*layers))

        self.up = nn.ModuleList()
        for i in reversed(range(d)):
            cin = chans[i] if i == d - 1 else chans[i] * 2
            if i == 0:
                layers = [nn.ReLU(True), nn.ConvTranspose2d(cin, spec.out_channels, KERNEL, 2, 1), nn.Tanh()]
            else:
                layers = [nn.ReLU(True), nn.ConvTranspose2d(cin, chans[i - 1], KERNEL, 2, 1), _norm(chans[i - 1])]
            self.up.append(nn.Sequential(*layers))

    def forward(self, x):
        step = 2**self.spec.depth
        if x.shape[-1] % step or x.shape[-2] % step:
            raise InvalidConfigError(f"input {tuple(x.shape[-2:])} not divisible by 2**depth = {step}")
        skips = []
        for layer in self.down:
            x = layer(x)
            skips.append(x)
        skips.pop()
        for layer in self.up:
            x = layer(x)
            if skips:
                x = torch.cat([x, skips.pop()], dim=1)
        return x


class PatchDiscriminator(nn.Module):
    """PatchGAN: n stride-2 4x4 convs, one stride-1 conv, then a 1-channel
    stride-1 conv emitting one logit per receptive-field patch."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        w, n = spec.base_width, spec.n_strided_layers
        layers = [nn.Conv2d(spec.total_in_channels, w, KERNEL, 2, 1), nn.LeakyReLU(0.2, True)]
        c = w
        for i in range(1, n):
            o = min(w * 2**i, w * 8)
            layers += [nn.Conv2d(c, o, KERNEL, 2, 1), _norm(o), nn.LeakyReLU(0.2, True)]
            c = o
        o = min(w * 2**n, w * 8)
        layers += [nn.Conv2d(c, o, KERNEL, 1, 1), _norm(o), nn.LeakyReLU(0.2, True)]
        layers += [nn.Conv2d(o, 1, KERNEL, 1, 1)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


def init_weights(net: nn.Module, seed: int, std: float = 0.02):
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.normal_(0.0, std, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
    return net


def build_generator(spec: GeneratorSpec, init_seed: int = 0) -> UnetGenerator:
    return init_weights(UnetGenerator(spec), init_seed)


def build_discriminator(spec: DiscriminatorSpec, init_seed: int = 0) -> PatchDiscriminator:
    return init_weights(PatchDiscriminator(spec), init_seed)


def receptive_field(n_strided_layers: int) -> int:
    """Receptive field of one output logit of a PatchGAN with ``n`` stride-2
    layers, by the backward recurrence ``r <- (r - 1) * stride + kernel``."""
    if n_strided_layers < 1:
        raise InvalidArgumentError("n_strided_layers must be >= 1")
    strides = [2] * n_strided_layers + [1, 1]
    r = 1
    for s in reversed(strides):
        r = (r - 1) * s + KERNEL
    return r


def patch_map_size(size: int, n_strided_layers: int) -> int:
    """Spatial size of the logit map for a ``size``-pixel input."""
    for s in [2] * n_strided_layers + [1, 1]:
        size = (size + 2 - KERNEL) // s + 1
    return size


def flat_parameters(net: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in net.parameters()])


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, *, nets: dict, optimizers: dict, state: dict, config: dict):
    """Write a versioned checkpoint atomically (temp file, then rename).

    ``nets`` maps a role name (``G``, ``D``, ``D_u``, ``D_c``) to a module whose
    ``spec`` attribute is a generator or discriminator spec.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "nets": {
            name: {"kind": type(net.spec).__name__, "spec": asdict(net.spec), "params": net.state_dict()}
            for name, net in nets.items()
        },
        "optimizers": {name: opt.state_dict() for name, opt in optimizers.items()},
        "state": state,
        "config": config,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise InvalidArgumentError(f"{path} is not an {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise InvalidArgumentError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


def restore_net(entry: dict) -> nn.Module:
    if entry["kind"] == "GeneratorSpec":
        net = UnetGenerator(GeneratorSpec(**entry["spec"]))
    elif entry["kind"] == "DiscriminatorSpec":
        net = PatchDiscriminator(DiscriminatorSpec(**entry["spec"]))
    else:
        raise InvalidArgumentError(f"unknown network kind {entry['kind']!r}")
    net.load_state_dict(entry["params"])
    return net

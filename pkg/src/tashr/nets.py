"""Highlight detection net, highlight removal net and the spectrally normalised patch discriminator.

All networks take NCHW float tensors in ``[0, 1]``.
"""

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatchError

SKIP_EPS = 1e-3


@dataclass
class DetectionNetConfig:
    base_channels: int = 32
    levels: int = 3


@dataclass
class RemovalNetConfig:
    base_channels: int = 64
    residual_blocks: int = 4
    # head predicts a logit offset added to logit(I_t), so a zero head reproduces the input
    input_skip: bool = True


@dataclass
class DiscriminatorConfig:
    base_channels: int = 64


def _check_divisible(x, k, what):
    h, w = x.shape[-2:]
    if h % k or w % k or h < k or w < k:
        raise ShapeMismatchError(f"{what}: spatial size {h}x{w} must be a positive multiple of {k}")


def _check_finite(module):
    for name, p in module.named_parameters():
        if not torch.isfinite(p).all():
            raise FloatingPointError(f"non-finite parameter {name}")


def conv_block(cin, cout, k=3, stride=1):
    # no conv bias: instance norm subtracts it straight back out
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride, k // 2, bias=False),
        nn.InstanceNorm2d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


class Upsample(nn.Module):
    """Nearest-neighbour x2 followed by a convolution."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv = conv_block(cin, cout)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class DetectionNet(nn.Module):
    """Fully convolutional mask predictor: three stride-2 stages (each followed by
    two convolutions) and three upsampling stages (each followed by three)."""

    def __init__(self, config=None):
        super().__init__()
        self.config = config or DetectionNetConfig()
        if self.config.levels != 3:
            raise ValueError("detection net has exactly 3 levels")
        b = self.config.base_channels
        widths = [b, 2 * b, 4 * b]
        self.stem = conv_block(3, b)
        self.down = nn.ModuleList()
        cin = b
        for cout in widths:
            self.down.append(nn.Sequential(conv_block(cin, cout, stride=2),
                                           conv_block(cout, cout), conv_block(cout, cout)))
            cin = cout
        # decoder widths mirror the encoder; skips come from the stem and the first two stages
        skips = [2 * b, b, b]
        outs = [2 * b, b, b]
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        for skip, cout in zip(skips, outs):
            self.up.append(Upsample(cin, cout))
            self.fuse.append(nn.Sequential(conv_block(cout + skip, cout), conv_block(cout, cout),
                                           conv_block(cout, cout)))
            cin = cout
        self.head = nn.Conv2d(cin, 1, 3, 1, 1)

    def forward(self, x):
        _check_divisible(x, 8, "detect")
        feats = [self.stem(x)]
        for stage in self.down:
            feats.append(stage(feats[-1]))
        y = feats.pop()
        for up, fuse in zip(self.up, self.fuse):
            y = fuse(torch.cat([up(y), feats.pop()], dim=1))
        return torch.sigmoid(self.head(y))


class ResidualBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, 1, 1, bias=False), nn.InstanceNorm2d(ch, affine=True), nn.ReLU(inplace=True),
            nn.Conv2d(ch, ch, 3, 1, 1, bias=False), nn.InstanceNorm2d(ch, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class RemovalNet(nn.Module):
    """Encoder-decoder over ``[image || mask]`` with concatenation skips.

    With ``input_skip`` the output is ``sigmoid(logit(I_t) + head)``: still a
    sigmoid in [0,1], but the net only has to learn the correction.
    """

    def __init__(self, config=None):
        super().__init__()
        self.config = config or RemovalNetConfig()
        if self.config.residual_blocks != 4:
            raise ValueError("removal net has exactly 4 residual blocks")
        b = self.config.base_channels
        self.stem = conv_block(4, b, k=7)
        self.down1 = conv_block(b, 2 * b, stride=2)
        self.down2 = conv_block(2 * b, 4 * b, stride=2)
        self.res = nn.Sequential(*[ResidualBlock(4 * b) for _ in range(4)])
        self.up1 = Upsample(4 * b, 2 * b)
        self.fuse1 = conv_block(4 * b, 2 * b)
        self.up2 = Upsample(2 * b, b)
        self.fuse2 = conv_block(2 * b, b)
        self.head = nn.Conv2d(b, 3, 3, 1, 1)

    @property
    def in_channels(self):
        return self.stem[0].in_channels

    def forward(self, image, mask):
        if image.shape[-2:] != mask.shape[-2:] or image.shape[0] != mask.shape[0]:
            raise ShapeMismatchError(f"image {tuple(image.shape)} vs mask {tuple(mask.shape)}")
        _check_divisible(image, 4, "remove")
        e0 = self.stem(torch.cat([image, mask], dim=1))
        e1 = self.down1(e0)
        y = self.res(self.down2(e1))
        y = self.fuse1(torch.cat([self.up1(y), e1], dim=1))
        y = self.fuse2(torch.cat([self.up2(y), e0], dim=1))
        y = self.head(y)
        if self.config.input_skip:
            y = y + torch.logit(image.clamp(SKIP_EPS, 1 - SKIP_EPS))
        return torch.sigmoid(y)


def spectral_normalize(weight, u, n_power_iterations=1, eps=1e-12):
    """Divide ``weight`` by a power-iteration estimate of its largest singular value.

    ``weight`` is viewed as ``(out_features, -1)``. ``u`` is the persistent left
    singular vector estimate and is updated in place. Returns
    ``(normalized_weight, sigma, v)``. An all-zero weight is returned unchanged.
    """
    mat = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        v = None
        for _ in range(max(1, n_power_iterations)):
            v = F.normalize(mat.t() @ u, dim=0, eps=eps)
            u.copy_(F.normalize(mat @ v, dim=0, eps=eps))
        # u is updated in place on every call; the graph must hold a snapshot
        u_now, v = u.clone(), v.clone()
    sigma = torch.dot(u_now, mat @ v)
    if float(sigma.detach().abs()) < eps:
        return weight, torch.ones_like(sigma), v
    return weight / sigma, sigma, v


class SNConv2d(nn.Conv2d):
    """Conv2d whose weight is spectrally normalised on every forward pass.

    The power iteration advances only in training mode; in eval mode the stored
    vector is reused, so inference is read-only.
    """

    def __init__(self, *args, n_power_iterations=1, **kwargs):
        super().__init__(*args, **kwargs)
        self.n_power_iterations = n_power_iterations
        g = torch.Generator().manual_seed(0)
        u = torch.randn(self.out_channels, generator=g)
        self.register_buffer("sn_u", F.normalize(u, dim=0))

    def normalized_weight(self):
        if self.training:
            w, _, _ = spectral_normalize(self.weight, self.sn_u, self.n_power_iterations)
            return w
        mat = self.weight.reshape(self.out_channels, -1)
        v = F.normalize(mat.t() @ self.sn_u, dim=0, eps=1e-12)
        sigma = torch.dot(self.sn_u.clone(), mat @ v)
        if float(sigma.detach().abs()) < 1e-12:
            return self.weight
        return self.weight / sigma

    def forward(self, x):
        return self._conv_forward(x, self.normalized_weight(), self.bias)


class PatchDiscriminator(nn.Module):
    """Stride-1 conv, five stride-2 convs (all kernel 5), then a 1x1 score head.

    Output is an unbounded ``(N, 1, H/32, W/32)`` patch score map.
    """

    def __init__(self, config=None):
        super().__init__()
        self.config = config or DiscriminatorConfig()
        b = self.config.base_channels
        widths = [b, 2 * b, 4 * b, 8 * b, 8 * b, 8 * b]
        layers = [SNConv2d(3, widths[0], 5, 1, 2), nn.LeakyReLU(0.2, inplace=True)]
        for cin, cout in zip(widths[:-1], widths[1:]):
            layers += [SNConv2d(cin, cout, 5, 2, 2), nn.LeakyReLU(0.2, inplace=True)]
        layers.append(SNConv2d(widths[-1], 1, 1, 1, 0))
        self.body = nn.Sequential(*layers)

    def sn_layers(self):
        return [m for m in self.modules() if isinstance(m, SNConv2d)]

    def forward(self, x):
        _check_divisible(x, 32, "discriminate")
        return self.body(x)


def detect(net, images):
    _check_finite(net)
    return net(images)


def remove(net, images, masks):
    return net(images, masks)


def discriminate(net, images):
    return net(images)


def init_weights(module, generator):
    """Fan-in scaled normal init driven by an explicit ``torch.Generator``."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1] // m.groups
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * (2.0 / fan_in) ** 0.5)
                if m.bias is not None:
                    m.bias.zero_()
        if isinstance(m, SNConv2d):
            with torch.no_grad():
                m.sn_u.copy_(F.normalize(torch.randn(m.out_channels, generator=generator), dim=0))
    if isinstance(module, RemovalNet) and module.config.input_skip:
        with torch.no_grad():
            module.head.weight.zero_()


@dataclass
class NetsConfig:
    detection: DetectionNetConfig
    removal: RemovalNetConfig
    discriminator: DiscriminatorConfig

    @classmethod
    def with_base(cls, base_channels):
        return cls(DetectionNetConfig(base_channels), RemovalNetConfig(base_channels),
                   DiscriminatorConfig(base_channels))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(DetectionNetConfig(**d["detection"]), RemovalNetConfig(**d["removal"]),
                   DiscriminatorConfig(**d["discriminator"]))


def build_nets(config, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    nets = (DetectionNet(config.detection), RemovalNet(config.removal),
            PatchDiscriminator(config.discriminator))
    for n in nets:
        init_weights(n, g)
        n.to(dtype)
    return nets

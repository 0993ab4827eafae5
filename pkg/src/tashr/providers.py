"""Frozen feature extractors used by the feature-aware and text-related losses.

A provider maps an NCHW image batch in ``[0, 1]`` to a list of feature maps,
one per configured layer. Parameters are frozen at construction.
"""

import re
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from .errors import ConfigError


class FeatureProvider(nn.Module):
    """Base class: subclasses fill ``self.layer_ids`` and implement ``features``."""

    name = "provider"

    def __init__(self):
        super().__init__()
        self.layer_ids = []

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode=True):
        # always stays in eval mode
        return super().train(False)

    def features(self, x):
        raise NotImplementedError

    def extract(self, x):
        return self.features(x)

    def forward(self, x):
        return self.features(x)


class RandomConvProvider(FeatureProvider):
    """Seeded random conv stack, the stand-in backbone for tests and desk-scale runs.

    Layer ``i`` is ``conv3x3 -> relu`` followed by 2x average pooling (except
    after the last layer). With ``kernel_size=1`` and ``pool=False`` it is
    equivariant to pixel permutations.
    """

    def __init__(self, name="random", num_layers=3, channels=8, seed=0, kernel_size=3, pool=True):
        super().__init__()
        self.name = name
        g = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        cin = 3
        for i in range(num_layers):
            conv = nn.Conv2d(cin, channels, kernel_size, 1, kernel_size // 2)
            fan_in = cin * kernel_size * kernel_size
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                conv.bias.copy_(torch.randn(channels, generator=g) * 0.1)
            self.convs.append(conv)
            cin = channels
        self.pool = pool
        self.layer_ids = [f"relu{i + 1}" for i in range(num_layers)]
        self.freeze()

    def features(self, x):
        out = []
        for i, conv in enumerate(self.convs):
            x = torch.relu(conv(x))
            out.append(x)
            if self.pool and i < len(self.convs) - 1:
                x = nn.functional.avg_pool2d(x, 2)
        return out


_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)

# indices into torchvision's vgg16().features after which each named activation is taken
VGG16_LAYERS = {
    "relu1_2": 3, "relu2_2": 8, "relu3_3": 15, "relu4_3": 22, "relu5_3": 29,
}


def _load_state(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"provider weights not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    return state


class VGG16Provider(FeatureProvider):
    """Pretrained VGG-16 activations (ImageNet-normalised input).

    ``weights`` is a local state-dict file for torchvision's ``vgg16`` (full
    model or ``features`` only); no download is ever attempted.
    """

    def __init__(self, weights, layers=("relu2_2", "relu3_3", "relu4_3"), name="vgg16"):
        super().__init__()
        from torchvision.models import vgg16

        unknown = [l for l in layers if l not in VGG16_LAYERS]
        if unknown:
            raise ConfigError(f"unknown VGG16 layers {unknown}; choose from {sorted(VGG16_LAYERS)}")
        self.name = name
        self.layer_ids = list(layers)
        last = max(VGG16_LAYERS[l] for l in layers)
        body = vgg16(weights=None).features
        if weights is not None:
            state = _load_state(weights)
            state = {k[len("features."):] if k.startswith("features.") else k: v
                     for k, v in state.items() if not k.startswith("classifier.")}
            try:
                body.load_state_dict(state)
            except RuntimeError as e:
                raise ConfigError(f"VGG16 weights {weights} do not fit: {str(e)[:300]}") from e
        self.body = body[: last + 1]
        self._taps = {VGG16_LAYERS[l]: l for l in layers}
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
        self.freeze()

    def features(self, x):
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        found = {}
        for i, layer in enumerate(self.body):
            x = layer(x)
            if i in self._taps:
                found[self._taps[i]] = x
        return [found[l] for l in self.layer_ids]


# checkpoints from older torchvision releases name e.g. "norm.1" where current code has "norm1"
_LEGACY_DENSE_KEY = re.compile(
    r"^(.*denselayer\d+\.(?:norm|relu|conv))\.((?:[12])\.(?:weight|bias|running_mean|running_var))$")


def _load_densenet_features(net, state):
    fixed = {}
    for k, v in state.items():
        m = _LEGACY_DENSE_KEY.match(k)
        fixed[m.group(1) + m.group(2) if m else k] = v
    feats = {k[len("features."):]: v for k, v in fixed.items() if k.startswith("features.")}
    # old checkpoints predate the num_batches_tracked buffer, which is unused in eval mode
    missing = sorted(k for k in set(net.features.state_dict()) - set(feats)
                     if not k.endswith("num_batches_tracked"))
    if missing:
        raise ConfigError(f"DenseNet weights lack {len(missing)} feature tensors, e.g. {missing[:3]}")
    try:
        net.features.load_state_dict(feats, strict=False)
    except RuntimeError as e:
        raise ConfigError(f"DenseNet weights do not fit: {str(e)[:300]}") from e


class DenseNetProvider(FeatureProvider):
    """Pretrained DenseNet-121 block outputs, the recognition-side backbone."""

    def __init__(self, weights, layers=("denseblock3",), name="densenet121"):
        super().__init__()
        from torchvision.models import densenet121

        self.name = name
        self.layer_ids = list(layers)
        net = densenet121(weights=None)
        if weights is not None:
            _load_densenet_features(net, _load_state(weights))
        names = [n for n, _ in net.features.named_children()]
        unknown = [l for l in layers if l not in names]
        if unknown:
            raise ConfigError(f"unknown DenseNet layers {unknown}; choose from {names}")
        last = max(names.index(l) for l in layers)
        self.body = nn.Sequential(*list(net.features.children())[: last + 1])
        self._names = names[: last + 1]
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
        self.freeze()

    def features(self, x):
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        found = {}
        for n, layer in zip(self._names, self.body):
            x = layer(x)
            if n in self.layer_ids:
                found[n] = x
        return [found[l] for l in self.layer_ids]


@dataclass
class ProviderConfig:
    """``kind`` is one of ``random``, ``vgg16``, ``densenet121``."""

    kind: str = "random"
    weights: str = None
    layers: list = field(default_factory=list)
    seed: int = 0
    channels: int = 8


def build_provider(cfg, default_layers, name):
    layers = list(cfg.layers) or list(default_layers)
    if cfg.kind == "random":
        return RandomConvProvider(name, len(layers), cfg.channels, cfg.seed)
    if cfg.weights is None:
        raise ConfigError(f"{name}: provider kind {cfg.kind!r} needs a weights file")
    if cfg.kind == "vgg16":
        return VGG16Provider(cfg.weights, layers, name)
    if cfg.kind == "densenet121":
        return DenseNetProvider(cfg.weights, layers, name)
    raise ConfigError(f"{name}: unknown provider kind {cfg.kind!r}")

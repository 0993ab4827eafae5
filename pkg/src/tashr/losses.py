"""Training objectives for the detection/removal generator pair and the discriminator.

All L1 norms are mean-reduced.
"""

import math
from dataclasses import dataclass, fields

import torch

from .errors import NonFiniteLossError, ShapeMismatchError, ConfigError

LAMBDA_DETECTION = 10.0
LAMBDA_GAN = 0.01
PIXEL_WEIGHT = 5.0
TV_WEIGHT = 0.1
PERCEPTUAL_WEIGHT = 0.05
STYLE_WEIGHT = 120.0
TV_MODES = ("as_printed", "self_shift")


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{tuple(a.shape)} vs {tuple(b.shape)}")


def l1(a, b):
    return (a - b).abs().mean()


def detection_loss(m_out, m_gt):
    _same_shape(m_out, m_gt)
    return l1(m_out, m_gt)


def pixel_loss(i_out, i_gt, tv_mode="as_printed"):
    """``5*|out - gt| + 0.1*(|out(i,j) - ref(i-1,j)| + |out(i,j) - ref(i,j-1)|)``.

    ``ref`` is the ground truth for ``tv_mode="as_printed"`` and the output
    itself for ``"self_shift"`` (a conventional total-variation term). The
    first row/column has no shifted partner and is left out of those terms.
    """
    _same_shape(i_out, i_gt)
    if tv_mode not in TV_MODES:
        raise ConfigError(f"tv_mode must be one of {TV_MODES}")
    ref = i_gt if tv_mode == "as_printed" else i_out
    vert = (i_out[..., 1:, :] - ref[..., :-1, :]).abs().mean()
    horiz = (i_out[..., :, 1:] - ref[..., :, :-1]).abs().mean()
    return PIXEL_WEIGHT * l1(i_out, i_gt) + TV_WEIGHT * (vert + horiz)


def gram(features):
    """``F F^T / (C * H * W)`` per image; accepts ``(C,H,W)`` or ``(N,C,H,W)``."""
    squeeze = features.dim() == 3
    if squeeze:
        features = features.unsqueeze(0)
    n, c, h, w = features.shape
    f = features.reshape(n, c, h * w)
    g = f @ f.transpose(1, 2) / (c * h * w)
    return g[0] if squeeze else g


def _provider_features(provider, i_out, i_gt, expected=None):
    fo = provider.extract(i_out)
    with torch.no_grad():
        fg = provider.extract(i_gt)
    if expected is not None and len(fo) != expected:
        raise ConfigError(f"provider {provider.name!r} exposes {len(fo)} layers, expected {expected}")
    return fo, fg


def feature_loss(i_out, i_gt, provider):
    """Perceptual (0.05) plus Gram-matrix style (120) L1 terms summed over the provider's layers."""
    _same_shape(i_out, i_gt)
    fo, fg = _provider_features(provider, i_out, i_gt)
    if len(fo) == 0:
        raise ConfigError(f"provider {provider.name!r} exposes no layers")
    perceptual = sum(l1(a, b) for a, b in zip(fo, fg))
    style = sum(l1(gram(a), gram(b)) for a, b in zip(fo, fg))
    return PERCEPTUAL_WEIGHT * perceptual + STYLE_WEIGHT * style


def gan_losses(real_scores, fake_scores):
    """Hinge objectives; returns ``(generator_loss, discriminator_loss)``."""
    return generator_gan_loss(fake_scores), discriminator_loss(real_scores, fake_scores)


def generator_gan_loss(fake_scores):
    return -fake_scores.mean()


def discriminator_loss(real_scores, fake_scores):
    return torch.relu(1.0 - real_scores).mean() + torch.relu(1.0 + fake_scores).mean()


def text_loss(i_out, i_gt, det_provider, rec_provider):
    """Feature consistency through three detection-backbone layers and one recognition layer."""
    _same_shape(i_out, i_gt)
    do, dg = _provider_features(det_provider, i_out, i_gt, expected=3)
    ro, rg = _provider_features(rec_provider, i_out, i_gt, expected=1)
    return sum(l1(a, b) for a, b in zip(do, dg)) + l1(ro[0], rg[0])


@dataclass
class LossBreakdown:
    l_netd: object = 0.0
    l_pixel: object = 0.0
    l_feature: object = 0.0
    l_gan_g: object = 0.0
    l_text: object = 0.0
    total: object = 0.0
    l_gan_d: object = 0.0

    FIELDS = ("l_netd", "l_pixel", "l_feature", "l_gan_g", "l_text", "total", "l_gan_d")

    def as_floats(self):
        return {f.name: _value(getattr(self, f.name)) for f in fields(self)}


def _value(x):
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def total_loss(l_netd, l_pixel, l_feature, l_gan_g, l_text, l_gan_d=0.0):
    """Weighted generator objective ``10*netd + pixel + feature + 0.01*gan_g + text``.

    Raises :class:`NonFiniteLossError` naming the first non-finite term.
    """
    parts = {"l_netd": l_netd, "l_pixel": l_pixel, "l_feature": l_feature,
             "l_gan_g": l_gan_g, "l_text": l_text, "l_gan_d": l_gan_d}
    for name, v in parts.items():
        if not math.isfinite(_value(v)):
            raise NonFiniteLossError(name, _value(v))
    total = LAMBDA_DETECTION * l_netd + l_pixel + l_feature + LAMBDA_GAN * l_gan_g + l_text
    return LossBreakdown(total=total, **parts)

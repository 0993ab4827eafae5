"""Joint training of the detection and removal nets against the patch discriminator.

Each step performs one discriminator update followed by one generator update.
Batch composition is a pure function of ``(seed, step)``: positions are laid
out over consecutive epochs, each epoch a seeded permutation of the data, so
resuming from a checkpoint reproduces the uninterrupted run exactly.
"""

import csv
import json
import logging
import os
import shutil
import time
from dataclasses import dataclass, asdict, field, fields
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .errors import CheckpointError, ConfigError, NonFiniteLossError
from .nets import NetsConfig, DetectionNetConfig, RemovalNetConfig, DiscriminatorConfig, build_nets

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "1"
NET_FILES = ("detection.pt", "removal.pt", "discriminator.pt")
META_FILE = "meta.json"
CSV_FIELDS = ("step",) + L.LossBreakdown.FIELDS + ("wall_time",)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    batch_size: int = 4
    image_size: int = 512
    max_steps: int = 10000
    checkpoint_every: int = 1000
    seed: int = 0
    tv_mode: str = "as_printed"
    detach_mask: bool = True
    text_loss_enabled: bool = True
    detection_channels: int = 32
    removal_channels: int = 64
    discriminator_channels: int = 64
    removal_input_skip: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.image_size <= 0 or self.image_size % 64:
            raise ConfigError(f"image_size must be a positive multiple of 64, got {self.image_size}")
        if self.tv_mode not in L.TV_MODES:
            raise ConfigError(f"tv_mode must be one of {L.TV_MODES}")
        if self.max_steps < 0 or self.checkpoint_every < 1:
            raise ConfigError("max_steps must be >= 0 and checkpoint_every >= 1")

    def nets_config(self):
        return NetsConfig(DetectionNetConfig(self.detection_channels),
                          RemovalNetConfig(self.removal_channels, input_skip=self.removal_input_skip),
                          DiscriminatorConfig(self.discriminator_channels))

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Providers:
    """Frozen feature extractors: classification backbone, text detection, text recognition."""

    feature: object
    text_det: object
    text_rec: object

    def parameters(self):
        for p in (self.feature, self.text_det, self.text_rec):
            yield from p.parameters()


def default_providers(seed=0):
    from .providers import RandomConvProvider

    return Providers(
        RandomConvProvider("feature", 3, 8, seed),
        RandomConvProvider("text_det", 3, 8, seed + 1),
        RandomConvProvider("text_rec", 1, 8, seed + 2),
    )


def _adam(params, cfg):
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))


@dataclass
class TrainState:
    config: TrainConfig
    detection: torch.nn.Module
    removal: torch.nn.Module
    discriminator: torch.nn.Module
    opt_detection: torch.optim.Optimizer
    opt_removal: torch.optim.Optimizer
    opt_discriminator: torch.optim.Optimizer
    step: int = 0
    running: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config, dtype=torch.float32):
        det, rem, disc = build_nets(config.nets_config(), seed=config.seed, dtype=dtype)
        return cls(config, det, rem, disc, _adam(det.parameters(), config),
                   _adam(rem.parameters(), config), _adam(disc.parameters(), config))

    @property
    def nets(self):
        return {"detection": self.detection, "removal": self.removal,
                "discriminator": self.discriminator}

    @property
    def optimizers(self):
        return {"detection": self.opt_detection, "removal": self.opt_removal,
                "discriminator": self.opt_discriminator}


def batch_indices(seed, step, n, batch_size):
    """Sample indices used at ``step``: consecutive slots over seeded per-epoch permutations."""
    out = []
    perms = {}
    for pos in range(step * batch_size, (step + 1) * batch_size):
        epoch, k = divmod(pos, n)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, epoch]).permutation(n)
        out.append(int(perms[epoch][k]))
    return out


def to_tensor(img, dtype=torch.float32):
    """HWC (or HW) numpy image -> CHW tensor."""
    a = np.asarray(img, dtype=np.float32)
    if a.ndim == 2:
        a = a[None]
    else:
        a = a.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(a)).to(dtype)


def to_image(t):
    """CHW tensor -> HWC (or HW for one channel) float32 numpy image."""
    a = t.detach().cpu().float().numpy()
    return a[0] if a.shape[0] == 1 else a.transpose(1, 2, 0)


def collate(triplets, dtype=torch.float32):
    return {
        "highlight": torch.stack([to_tensor(t.highlight, dtype) for t in triplets]),
        "clean": torch.stack([to_tensor(t.clean, dtype) for t in triplets]),
        "mask": torch.stack([to_tensor(t.mask, dtype) for t in triplets]),
    }


def _set_requires_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


def compute_generator_losses(state, batch, providers, i_out, m_out, fake_scores):
    cfg = state.config
    i_gt = batch["clean"]
    l_netd = L.detection_loss(m_out, batch["mask"])
    l_pixel = L.pixel_loss(i_out, i_gt, cfg.tv_mode)
    l_feature = L.feature_loss(i_out, i_gt, providers.feature)
    l_gan_g = L.generator_gan_loss(fake_scores)
    if cfg.text_loss_enabled:
        l_text = L.text_loss(i_out, i_gt, providers.text_det, providers.text_rec)
    else:
        l_text = torch.zeros((), dtype=i_out.dtype)
    return l_netd, l_pixel, l_feature, l_gan_g, l_text


def train_step(state, batch, providers):
    """One discriminator update then one generator update; returns float LossBreakdown."""
    cfg = state.config
    det, rem, disc = state.detection, state.removal, state.discriminator
    for n in (det, rem, disc):
        n.train()
    i_t, i_gt = batch["highlight"], batch["clean"]

    m_out = det(i_t)
    m_in = m_out.detach() if cfg.detach_mask else m_out
    i_out = rem(i_t, m_in)

    _set_requires_grad(disc, True)
    state.opt_discriminator.zero_grad(set_to_none=True)
    l_gan_d = L.discriminator_loss(disc(i_gt), disc(i_out.detach()))
    if not torch.isfinite(l_gan_d):
        raise NonFiniteLossError("l_gan_d", float(l_gan_d))
    l_gan_d.backward()
    state.opt_discriminator.step()

    _set_requires_grad(disc, False)
    try:
        parts = compute_generator_losses(state, batch, providers, i_out, m_out, disc(i_out))
        bd = L.total_loss(*parts, l_gan_d=l_gan_d.detach())
        state.opt_detection.zero_grad(set_to_none=True)
        state.opt_removal.zero_grad(set_to_none=True)
        bd.total.backward()
        state.opt_detection.step()
        state.opt_removal.step()
    finally:
        _set_requires_grad(disc, True)

    state.step += 1
    out = L.LossBreakdown(**bd.as_floats())
    for k, v in out.as_floats().items():
        state.running[k] = v if k not in state.running else 0.99 * state.running[k] + 0.01 * v
    return out


def save_checkpoint(state, directory):
    """Write ``detection.pt``, ``removal.pt``, ``discriminator.pt`` and ``meta.json`` atomically."""
    directory = Path(directory)
    tmp = directory.with_name(directory.name + ".tmp")
    shutil.rmtree(tmp, ignore_errors=True)
    tmp.mkdir(parents=True)
    for (name, net), fname in zip(state.nets.items(), NET_FILES):
        torch.save({"params": net.state_dict(), "optim": state.optimizers[name].state_dict()},
                   tmp / fname)
    meta = {
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "train_config": asdict(state.config),
        "nets_config": state.config.nets_config().to_dict(),
        "running": state.running,
        "dtype": str(next(state.detection.parameters()).dtype).replace("torch.", ""),
    }
    (tmp / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if directory.exists():
        shutil.rmtree(directory)
    os.replace(tmp, directory)
    return directory


def load_checkpoint(directory, expected_config=None):
    """Rebuild a :class:`TrainState` from a checkpoint directory.

    With ``expected_config`` the networks are instantiated from it instead of
    the stored snapshot; any tensor shape disagreement raises
    :class:`CheckpointError` before anything is loaded.
    """
    directory = Path(directory)
    meta_path = directory / META_FILE
    if not meta_path.is_file():
        raise CheckpointError(f"{directory} is not a checkpoint (no {META_FILE})")
    meta = json.loads(meta_path.read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')!r} != {CHECKPOINT_VERSION}")
    config = expected_config or TrainConfig.from_dict(meta["train_config"])
    dtype = getattr(torch, meta.get("dtype", "float32"))
    state = TrainState.create(config, dtype=dtype)

    blobs = {}
    problems = []
    for (name, net), fname in zip(state.nets.items(), NET_FILES):
        path = directory / fname
        if not path.is_file():
            raise CheckpointError(f"missing {fname} in {directory}")
        blob = torch.load(path, map_location="cpu", weights_only=True)
        own = net.state_dict()
        saved = blob["params"]
        if set(own) != set(saved):
            problems.append(f"{name}: parameter names differ "
                            f"(missing {sorted(set(own) - set(saved))[:3]}, "
                            f"unexpected {sorted(set(saved) - set(own))[:3]})")
        for k in set(own) & set(saved):
            if own[k].shape != saved[k].shape:
                problems.append(f"{name}.{k}: checkpoint {tuple(saved[k].shape)} vs model {tuple(own[k].shape)}")
        blobs[name] = blob
    if problems:
        raise CheckpointError("checkpoint incompatible with configuration:\n  " + "\n  ".join(problems))

    for name, net in state.nets.items():
        net.load_state_dict(blobs[name]["params"])
        state.optimizers[name].load_state_dict(blobs[name]["optim"])
    state.step = int(meta["step"])
    state.running = dict(meta.get("running", {}))
    return state


def checkpoint_dirs(run_dir):
    root = Path(run_dir) / "checkpoints"
    if not root.is_dir():
        return []
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / META_FILE).is_file())


def resolve_checkpoint(path):
    """Accept a checkpoint directory or a run directory (latest checkpoint wins)."""
    path = Path(path)
    if (path / META_FILE).is_file():
        return path
    dirs = checkpoint_dirs(path)
    if not dirs:
        raise CheckpointError(f"no checkpoint found under {path}")
    return dirs[-1]


class LossLog:
    """Append-only CSV of per-step losses."""

    def __init__(self, path):
        self.path = Path(path)

    def truncate_after(self, step):
        """Drop rows beyond ``step`` (left behind by a run that died after its last checkpoint)."""
        if not self.path.exists():
            return
        with self.path.open(newline="") as f:
            rows = [r for r in csv.DictReader(f) if int(r["step"]) <= step]
        self._write(rows)

    def _write(self, rows):
        with self.path.open("w", newline="") as f:
            w = csv.DictWriter(f, CSV_FIELDS)
            w.writeheader()
            w.writerows(rows)

    def append(self, step, breakdown, wall_time):
        new = not self.path.exists()
        with self.path.open("a", newline="") as f:
            w = csv.DictWriter(f, CSV_FIELDS)
            if new:
                w.writeheader()
            row = {"step": step, "wall_time": f"{wall_time:.3f}"}
            row.update({k: repr(v) for k, v in breakdown.as_floats().items()})
            w.writerow(row)

    def read(self):
        with self.path.open(newline="") as f:
            return list(csv.DictReader(f))


class TripletSource:
    """Indexable triplet access with a small cache; wraps a manifest or an in-memory list."""

    def __init__(self, items, cache_size=64):
        self._manifest = None
        if hasattr(items, "entries"):
            self._manifest = items
            self._n = len(items.entries)
        else:
            self._items = list(items)
            self._n = len(self._items)
        self._cache = {}
        self._cache_size = cache_size

    def __len__(self):
        return self._n

    def __getitem__(self, i):
        if self._manifest is None:
            return self._items[i]
        if i not in self._cache:
            if len(self._cache) >= self._cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[i] = self._manifest.load_triplet(self._manifest.entries[i])
        return self._cache[i]


def _check_batch_size(triplets, image_size):
    for t in triplets:
        if t.highlight.shape[:2] != (image_size, image_size):
            raise ConfigError(
                f"sample {t.id} is {t.highlight.shape[1]}x{t.highlight.shape[0]}, "
                f"training expects {image_size}x{image_size}"
            )


def train(state, data, providers, max_steps, run_dir=None, checkpoint_every=None, callback=None,
          dtype=torch.float32):
    """Run until ``state.step == max_steps``; checkpoints and CSV log go under ``run_dir``.

    ``callback(state, breakdown)`` is called after every step; returning
    ``True`` stops training early (used by experiments, not by the CLI).
    On a non-finite loss the error propagates and the last checkpoint on disk
    stays intact.
    """
    source = data if isinstance(data, TripletSource) else TripletSource(data)
    if len(source) == 0:
        raise ConfigError("no training samples")
    cfg = state.config
    every = checkpoint_every or cfg.checkpoint_every
    loss_log = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        loss_log = LossLog(run_dir / "losses.csv")
        loss_log.truncate_after(state.step)
        if not checkpoint_dirs(run_dir):
            save_checkpoint(state, run_dir / "checkpoints" / f"step_{state.step:07d}")
    history = []
    t0 = time.time()
    while state.step < max_steps:
        idx = batch_indices(cfg.seed, state.step, len(source), cfg.batch_size)
        triplets = [source[i] for i in idx]
        _check_batch_size(triplets, cfg.image_size)
        bd = train_step(state, collate(triplets, dtype), providers)
        history.append(bd)
        if loss_log is not None:
            loss_log.append(state.step, bd, time.time() - t0)
            if state.step % every == 0 or state.step == max_steps:
                save_checkpoint(state, run_dir / "checkpoints" / f"step_{state.step:07d}")
        if state.step % 50 == 0:
            log.info("step %d total %.4f netd %.4f", state.step, bd.total, bd.l_netd)
        if callback is not None and callback(state, bd):
            if loss_log is not None:
                save_checkpoint(state, run_dir / "checkpoints" / f"step_{state.step:07d}")
            break
    return history


@torch.no_grad()
def infer(state_or_nets, images, dtype=torch.float32):
    """Run detection then removal in eval mode; returns ``(outputs, masks)`` as numpy lists."""
    if isinstance(state_or_nets, TrainState):
        det, rem = state_or_nets.detection, state_or_nets.removal
    else:
        det, rem = state_or_nets
    det.eval()
    rem.eval()
    outs, masks = [], []
    for img in images:
        x = to_tensor(img, dtype)[None]
        m = det(x)
        y = rem(x, m)
        outs.append(to_image(y[0]))
        masks.append(to_image(m[0]))
    return outs, masks

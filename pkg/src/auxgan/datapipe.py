"""Augmentation and batch streams over a phantom manifest."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy import ndimage

from .errors import InvalidArgumentError, InvalidConfigError
from .phantom import DatasetManifest, Modality, SliceImage

PAD_VALUE = -1.0
REGIMES = ("paired_only", "unpaired_ct", "mixed")


@dataclass
class AugmentConfig:
    hflip_prob: float = 0.5
    zoom_range: tuple = (0.6, 1.4)
    crop_size: int = 128
    pad_size: int = 144
    seed: int = 0

    def __post_init__(self):
        self.zoom_range = tuple(self.zoom_range)
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise InvalidConfigError("hflip_prob must lie in [0, 1]")
        if len(self.zoom_range) != 2 or self.zoom_range[0] > self.zoom_range[1] or self.zoom_range[0] <= 0:
            raise InvalidConfigError(f"bad zoom_range {self.zoom_range}")
        if self.crop_size > self.pad_size:
            raise InvalidConfigError("crop_size must not exceed pad_size")

    @classmethod
    def identity(cls, size: int) -> "AugmentConfig":
        return cls(hflip_prob=0.0, zoom_range=(1.0, 1.0), crop_size=size, pad_size=size)


@dataclass(frozen=True)
class AugmentParams:
    zoom: float
    flip: bool
    top: int
    left: int


def draw_params(cfg: AugmentConfig, shape, draw_seed: int) -> AugmentParams:
    """Draw one set of flip/zoom/crop parameters for an H x W image."""
    rng = np.random.default_rng(draw_seed)
    zoom = float(rng.uniform(*cfg.zoom_range)) if cfg.zoom_range[0] < cfg.zoom_range[1] else float(cfg.zoom_range[0])
    flip = bool(rng.random() < cfg.hflip_prob)
    h, w = _canvas_shape(cfg, shape, zoom)
    if cfg.crop_size > h or cfg.crop_size > w:
        raise InvalidConfigError(f"crop_size {cfg.crop_size} exceeds padded size {(h, w)}")
    top = int(rng.integers(0, h - cfg.crop_size + 1))
    left = int(rng.integers(0, w - cfg.crop_size + 1))
    return AugmentParams(zoom, flip, top, left)


def _zoomed_shape(shape, zoom):
    return tuple(int(round(s * zoom)) for s in shape)


def _canvas_shape(cfg, shape, zoom):
    return tuple(max(z, cfg.pad_size) for z in _zoomed_shape(shape, zoom))


def apply_params(plane: np.ndarray, params: AugmentParams, cfg: AugmentConfig, order=1, fill=PAD_VALUE):
    """Apply recorded parameters to one H x W plane.

    Use ``order=0`` and ``fill=0`` for label maps so they stay integral.
    """
    out = plane
    if params.zoom != 1.0:
        target = _zoomed_shape(plane.shape, params.zoom)
        out = ndimage.zoom(plane, [t / s for t, s in zip(target, plane.shape)], order=order, mode="nearest")
    canvas_shape = _canvas_shape(cfg, plane.shape, params.zoom)
    if canvas_shape != out.shape:
        canvas = np.full(canvas_shape, fill, dtype=out.dtype)
        y0 = (canvas_shape[0] - out.shape[0]) // 2
        x0 = (canvas_shape[1] - out.shape[1]) // 2
        canvas[y0 : y0 + out.shape[0], x0 : x0 + out.shape[1]] = out
        out = canvas
    c = cfg.crop_size
    out = out[params.top : params.top + c, params.left : params.left + c]
    if params.flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def _apply_image(img: SliceImage, params, cfg):
    planes = [apply_params(p, params, cfg) for p in img.pixels]
    pixels = np.clip(np.stack(planes), -1.0, 1.0).astype(np.float32)
    return SliceImage(pixels, img.modality, img.case_id)


def augment(image: SliceImage, paired_partner: Optional[SliceImage], cfg: AugmentConfig, draw_seed: int):
    """Random flip, zoom and crop; the partner gets exactly the same transform."""
    if paired_partner is not None and paired_partner.shape[-2:] != image.shape[-2:]:
        raise InvalidArgumentError("image and partner must share H x W")
    params = draw_params(cfg, image.shape[-2:], draw_seed)
    out = _apply_image(image, params, cfg)
    partner = _apply_image(paired_partner, params, cfg) if paired_partner is not None else None
    return out, partner


@dataclass
class Batch:
    inputs: torch.Tensor
    input_modality: Modality
    case_ids: list
    targets: Optional[torch.Tensor] = None
    target_modality: Optional[Modality] = None
    params: list = field(default_factory=list)

    def __len__(self):
        return self.inputs.shape[0]

    def swapped(self) -> "Batch":
        if self.targets is None:
            raise InvalidArgumentError("cannot swap an unpaired batch")
        return Batch(self.targets, self.target_modality, self.case_ids, self.inputs, self.input_modality, self.params)


@dataclass
class MixedBatch:
    paired: Batch
    ct: Batch


class BatchStream:
    """Deterministic batches: batch ``(epoch, it)`` depends only on the seed,
    so any iteration can be regenerated (this is what makes resume exact)."""

    def __init__(self, manifest, regime, batch_size, cfg, iters_per_epoch=200, split="train", channels=1):
        if regime not in REGIMES:
            raise InvalidConfigError(f"unknown regime {regime!r}")
        if batch_size < 1:
            raise InvalidConfigError("batch_size must be >= 1")
        self.regime = regime
        self.batch_size = batch_size
        self.cfg = cfg
        self.iters_per_epoch = iters_per_epoch
        self.channels = channels

        self.paired = []
        self.ct = []
        if regime in ("paired_only", "mixed"):
            for case in manifest.select(split=split, paired=True):
                mr, _ = manifest.load_image(case, Modality.MR)
                mrcat, _ = manifest.load_image(case, Modality.MRCAT)
                self.paired.append((self._expand(mr), self._expand(mrcat)))
            if not self.paired:
                raise InvalidConfigError(f"no paired cases in split {split!r}")
        if regime in ("unpaired_ct", "mixed"):
            for case in manifest.select(split=split, paired=False):
                ct, _ = manifest.load_image(case, Modality.CT)
                self.ct.append(self._expand(ct))
            if not self.ct:
                raise InvalidConfigError(f"no CT cases in split {split!r}")

    def _expand(self, img):
        if self.channels == 1:
            return img
        return SliceImage(np.repeat(img.pixels, self.channels, axis=0), img.modality, img.case_id)

    def _rng_seeds(self, epoch, it):
        ss = np.random.SeedSequence([self.cfg.seed, epoch, it])
        return ss.generate_state(2 + 2 * self.batch_size)

    def _draw_paired(self, rng, aug_seeds):
        idx = rng.choice(len(self.paired), self.batch_size, replace=len(self.paired) < self.batch_size)
        ins, tgs, ids, params = [], [], [], []
        for k, i in enumerate(idx):
            mr, mrcat = self.paired[i]
            p = draw_params(self.cfg, mr.shape[-2:], int(aug_seeds[k]))
            ins.append(_apply_image(mr, p, self.cfg).pixels)
            tgs.append(_apply_image(mrcat, p, self.cfg).pixels)
            ids.append(mr.case_id)
            params.append(p)
        return Batch(
            torch.from_numpy(np.stack(ins)), Modality.MR, ids, torch.from_numpy(np.stack(tgs)), Modality.MRCAT, params
        )

    def _draw_ct(self, rng, aug_seeds):
        idx = rng.choice(len(self.ct), self.batch_size, replace=len(self.ct) < self.batch_size)
        ins, ids, params = [], [], []
        for k, i in enumerate(idx):
            ct = self.ct[i]
            p = draw_params(self.cfg, ct.shape[-2:], int(aug_seeds[k]))
            ins.append(_apply_image(ct, p, self.cfg).pixels)
            ids.append(ct.case_id)
            params.append(p)
        return Batch(torch.from_numpy(np.stack(ins)), Modality.CT, ids, params=params)

    def batch(self, epoch: int, it: int):
        seeds = self._rng_seeds(epoch, it)
        b = self.batch_size
        paired_aug, ct_aug = seeds[2 : 2 + b], seeds[2 + b :]
        if self.regime == "paired_only":
            return self._draw_paired(np.random.default_rng(seeds[0]), paired_aug)
        if self.regime == "unpaired_ct":
            return self._draw_ct(np.random.default_rng(seeds[1]), ct_aug)
        return MixedBatch(
            self._draw_paired(np.random.default_rng(seeds[0]), paired_aug),
            self._draw_ct(np.random.default_rng(seeds[1]), ct_aug),
        )

    def iter_epoch(self, epoch: int, start: int = 0):
        for it in range(start, self.iters_per_epoch):
            yield it, self.batch(epoch, it)

    def __iter__(self):
        epoch = 1
        while True:
            for _, b in self.iter_epoch(epoch):
                yield b
            epoch += 1


def make_loader(
    manifest: DatasetManifest,
    regime: str,
    batch_size: int,
    cfg: AugmentConfig,
    iters_per_epoch: int = 200,
    split: str = "train",
    channels: int = 1,
) -> BatchStream:
    return BatchStream(manifest, regime, batch_size, cfg, iters_per_epoch, split, channels)

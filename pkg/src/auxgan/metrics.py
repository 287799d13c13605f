"""FID, KID, DICE and HU-Dif over a pluggable image embedding."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgumentError, NumericError
from .phantom import ANATOMY_LABELS, HU_MAP, DatasetManifest, Modality, SliceImage, segment_rule_based

log = logging.getLogger(__name__)

FID_JITTER = 1e-6
FID_NEG_CLAMP = 1e-6
KID_MAX_BLOCK = 100


# ---------------------------------------------------------------------------
# embedding


@dataclass(frozen=True)
class EmbeddingSpec:
    seed: int = 0
    dim: int = 64
    input_size: int = 128
    weights: Optional[str] = None  # state_dict for RandomConvEncoder, replaces the seeded init

    @property
    def extractor_id(self) -> str:
        base = f"randconv-d{self.dim}-in{self.input_size}-s{self.seed}"
        return base if self.weights is None else f"{base}+{Path(self.weights).name}"


class RandomConvEncoder(nn.Module):
    """Four stride-2 4x4 convs (16, 32, 32, dim/4 channels) with LeakyReLU,
    then 2x2 average pooling, flattened to ``dim`` features. Frozen."""

    def __init__(self, dim=64):
        super().__init__()
        if dim % 4:
            raise InvalidArgumentError("embedding dim must be divisible by 4")
        chans = [1, 16, 32, 32, dim // 4]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 4, 2, 1), nn.LeakyReLU(0.2)]
        self.body = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(2)

    def forward(self, x):
        return self.pool(self.body(x)).flatten(1)


_ENCODERS: dict = {}


def get_encoder(spec: EmbeddingSpec) -> RandomConvEncoder:
    if spec not in _ENCODERS:
        enc = RandomConvEncoder(spec.dim)
        if spec.weights is not None:
            enc.load_state_dict(torch.load(spec.weights, map_location="cpu", weights_only=True))
        else:
            gen = torch.Generator().manual_seed(spec.seed)
            with torch.no_grad():
                for m in enc.modules():
                    if isinstance(m, nn.Conv2d):
                        fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                        m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                        m.bias.normal_(0.0, 0.1, generator=gen)
        enc.eval()
        for p in enc.parameters():
            p.requires_grad_(False)
        _ENCODERS[spec] = enc
    return _ENCODERS[spec]


@dataclass
class FeatureSet:
    features: np.ndarray  # N x d, float64
    extractor_id: str
    source: str = "real"  # "real" or "translated"

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if not np.isfinite(self.features).all():
            raise NumericError("non-finite features")

    @property
    def n(self):
        return self.features.shape[0]


@dataclass
class MomentStats:
    mu: np.ndarray
    sigma: np.ndarray


def extract_features(images: list, extractor: EmbeddingSpec = EmbeddingSpec(), source="real", batch_size=64):
    """Embed each image (channels averaged, resized to the encoder's input)."""
    if len(images) < 2:
        raise InvalidArgumentError("need at least 2 images to extract a feature set")
    enc = get_encoder(extractor)
    rows = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(
                np.stack([im.pixels.mean(axis=0, keepdims=True) for im in images[i : i + batch_size]]).astype(
                    np.float32
                )
            )
            if x.shape[-1] != extractor.input_size or x.shape[-2] != extractor.input_size:
                x = F.interpolate(x, size=(extractor.input_size,) * 2, mode="bilinear", align_corners=False)
            rows.append(enc(x).double().numpy())
    return FeatureSet(np.concatenate(rows), extractor.extractor_id, source)


# ---------------------------------------------------------------------------
# FID


def moment_stats(fs: FeatureSet) -> MomentStats:
    if fs.n < 2:
        raise InvalidArgumentError("need N >= 2 rows for moments")
    x = fs.features
    sigma = np.atleast_2d(np.cov(x, rowvar=False))
    return MomentStats(x.mean(axis=0), (sigma + sigma.T) / 2.0)


def _psd_sqrt(m):
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: MomentStats, b: MomentStats, eps: float = FID_JITTER) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the square root is taken as the sum of square roots of the
    eigenvalues of the symmetric PSD matrix S_a^(1/2) S_b S_a^(1/2), which
    shares its spectrum with S_a S_b. Rank-deficient covariances get ``eps``
    on the diagonal first.
    """
    sa, sb = a.sigma, b.sigma
    if min(np.linalg.eigvalsh(sa).min(), np.linalg.eigvalsh(sb).min()) < eps:
        eye = np.eye(sa.shape[0])
        sa, sb = sa + eps * eye, sb + eps * eye
    root_a = _psd_sqrt(sa)
    inner = root_a @ sb @ root_a
    ev = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_covmean = np.sqrt(np.clip(ev, 0.0, None)).sum()
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * tr_covmean)
    if value < 0.0:
        if value < -FID_NEG_CLAMP:
            raise NumericError(f"negative Frechet distance {value}")
        value = 0.0
    return value


def _check_pair(a: FeatureSet, b: FeatureSet):
    if a.extractor_id != b.extractor_id:
        raise InvalidArgumentError(f"extractor mismatch: {a.extractor_id} vs {b.extractor_id}")
    if a.features.shape[1] != b.features.shape[1]:
        raise InvalidArgumentError("feature dimensions differ")


def fid(a: FeatureSet, b: FeatureSet) -> float:
    _check_pair(a, b)
    return frechet_distance(moment_stats(a), moment_stats(b))


# ---------------------------------------------------------------------------
# KID


def polynomial_kernel(x, y):
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x, y) -> float:
    m, n = x.shape[0], y.shape[0]
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.sum() / (m * n))


def _canonical(x, seed=0):
    # lexicographic sort makes the result independent of input order;
    # the seeded shuffle keeps blocks from being sorted slices
    order = np.lexsort(x.T[::-1])
    perm = np.random.default_rng(seed).permutation(len(order))
    return x[order][perm]


def kid(a: FeatureSet, b: FeatureSet, block_size: Optional[int] = None) -> float:
    """Unbiased MMD^2 with kernel (x.y/d + 1)^3, averaged over disjoint
    blocks; rows beyond the last full block are dropped."""
    _check_pair(a, b)
    n = min(a.n, b.n)
    if n < 2:
        raise InvalidArgumentError("need at least 2 rows in each set")
    bs = min(KID_MAX_BLOCK, n) if block_size is None else block_size
    if bs < 2 or bs > n:
        raise InvalidArgumentError(f"block_size must lie in [2, {n}], got {bs}")
    x, y = _canonical(a.features), _canonical(b.features)
    vals = [mmd2_unbiased(x[i * bs : (i + 1) * bs], y[i * bs : (i + 1) * bs]) for i in range(n // bs)]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# DICE / HU-Dif


def dice(a: np.ndarray, b: np.ndarray, label: int) -> float:
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    ma, mb = a == label, b == label
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((ma & mb).sum()) / total


def to_hu(pixels, hu_map=HU_MAP):
    return np.asarray(pixels, dtype=np.float64) * hu_map["scale"] + hu_map["offset"]


def hu_dif_table(real_cts, trans_cts, labels, hu_map=HU_MAP):
    """Per-label |mean HU(real) - mean HU(translated)| using population means
    over every pixel of that label. Returns ``(per_label, excluded)``."""
    if not real_cts or not trans_cts:
        raise InvalidArgumentError("both CT lists must be non-empty")

    def pooled(pairs, label):
        vals = [to_hu(img.pixels.mean(axis=0), hu_map)[lab == label] for img, lab in pairs]
        vals = np.concatenate(vals)
        return float(vals.mean()) if vals.size else None

    per_label, excluded = {}, []
    for label in sorted(int(l) for l in labels):
        r, t = pooled(real_cts, label), pooled(trans_cts, label)
        if r is None or t is None:
            excluded.append(label)
            continue
        per_label[label] = abs(r - t)
    return per_label, excluded


def hu_dif(real_cts, trans_cts, labels, hu_map=HU_MAP) -> float:
    per_label, excluded = hu_dif_table(real_cts, trans_cts, labels, hu_map)
    if excluded:
        log.warning("HU-Dif: labels %s absent on one side, excluded", excluded)
    if not per_label:
        raise InvalidArgumentError("no label present on both sides")
    return float(np.mean(list(per_label.values())))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalConfig:
    split: str = "eval"
    extractor: EmbeddingSpec = field(default_factory=EmbeddingSpec)
    kid_block_size: Optional[int] = None
    dice_labels: tuple = tuple(int(l) for l in ANATOMY_LABELS)
    hu_labels: tuple = tuple(int(l) for l in ANATOMY_LABELS)
    batch_size: int = 16

    def to_dict(self):
        d = asdict(self)
        d["dice_labels"] = list(self.dice_labels)
        d["hu_labels"] = list(self.hu_labels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "extractor" in d:
            d["extractor"] = EmbeddingSpec(**d["extractor"])
        for k in ("dice_labels", "hu_labels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class MetricReport:
    fid: float
    kid: float
    dice_mean: float
    dice_std: float
    per_label_dice: dict
    hu_dif: Optional[float] = None
    hu_per_label: dict = field(default_factory=dict)
    hu_excluded: list = field(default_factory=list)
    paired_l1: Optional[float] = None
    n_real: int = 0
    n_translated: int = 0
    direction: str = ""
    config: dict = field(default_factory=dict)
    config_hash: str = ""

    def to_dict(self):
        return asdict(self)

    def write(self, out_dir, stem="metrics"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")
        row = flat_row(self)
        with open(out / f"{stem}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow(row)
        return out / f"{stem}.json"


def flat_row(r: MetricReport, **extra) -> dict:
    row = dict(extra)
    row.update(
        fid=r.fid,
        kid=r.kid,
        dice_mean=r.dice_mean,
        dice_std=r.dice_std,
        hu_dif="" if r.hu_dif is None else r.hu_dif,
        paired_l1="" if r.paired_l1 is None else r.paired_l1,
    )
    for label, v in sorted(r.per_label_dice.items()):
        row[f"dice_{label}"] = v
    return row


def _load_split(manifest, split, paired, modality):
    return [manifest.load_image(c, modality)[0] for c in manifest.select(split=split, paired=paired)]


def evaluate_images(inputs, translations, reals, cfg: EvalConfig, direction: str, pairs=None) -> MetricReport:
    """Metrics for already-translated images.

    ``pairs`` optionally holds the aligned targets for ``inputs`` (MRCAT for
    MR inputs, MR for MRCAT inputs) as ``(translations_of_pair_inputs, targets)``.
    """
    fa = extract_features(reals, cfg.extractor, "real")
    fb = extract_features(translations, cfg.extractor, "translated")
    seg_in = [segment_rule_based(im) for im in inputs]
    seg_out = [segment_rule_based(im) for im in translations]
    scores, per_label = [], {}
    for label in cfg.dice_labels:
        vals = [dice(a, b, label) for a, b in zip(seg_in, seg_out)]
        per_label[int(label)] = float(np.mean(vals))
        scores += vals
    report = MetricReport(
        fid=fid(fa, fb),
        kid=kid(fa, fb, cfg.kid_block_size),
        dice_mean=float(np.mean(scores)),
        dice_std=float(np.std(scores)),
        per_label_dice=per_label,
        n_real=len(reals),
        n_translated=len(translations),
        direction=direction,
    )
    if translations[0].modality in (Modality.sCT, Modality.CT):
        real_pairs = [(im, segment_rule_based(im)) for im in reals]
        trans_pairs = list(zip(translations, seg_out))
        table, excluded = hu_dif_table(real_pairs, trans_pairs, cfg.hu_labels)
        report.hu_per_label, report.hu_excluded = table, excluded
        report.hu_dif = float(np.mean(list(table.values()))) if table else None
    if pairs is not None:
        outs, targets = pairs
        report.paired_l1 = float(np.mean([np.abs(o.pixels - t.pixels).mean() for o, t in zip(outs, targets)]))
    return report


def evaluate(checkpoint, manifest: DatasetManifest, cfg: EvalConfig = EvalConfig()) -> MetricReport:
    """Translate the eval split with a checkpoint and score it.

    ``checkpoint="identity"`` is a self-check: eval CTs are "translated" by
    the identity and compared with themselves.
    """
    from .trainer import config_hash, load_generator, translate_with

    split = cfg.split
    echo = {"eval": cfg.to_dict(), "checkpoint": str(checkpoint)}
    if str(checkpoint) == "identity":
        cts = _load_split(manifest, split, False, Modality.CT)
        report = evaluate_images(cts, cts, cts, cfg, "identity")
        echo["train_config_hash"] = None
    else:
        G, tcfg = load_generator(checkpoint)
        out_mod = tcfg.output_modality
        echo["train_config_hash"] = tcfg.config_hash()
        mr = _load_split(manifest, split, True, Modality.MR)
        mrcat = _load_split(manifest, split, True, Modality.MRCAT)
        if not mr:
            raise InvalidArgumentError(f"no paired cases in split {split!r}")
        if out_mod is Modality.sCT:
            inputs, reals = mr, _load_split(manifest, split, False, Modality.CT)
            trans = translate_with(G, out_mod, tcfg.input_modalities, inputs, cfg.batch_size)
            pairs = (trans, mrcat)
            direction = "MR->CT"
        else:
            inputs, reals = _load_split(manifest, split, False, Modality.CT), mr
            if not inputs:
                raise InvalidArgumentError(f"no CT cases in split {split!r}")
            trans = translate_with(G, out_mod, tcfg.input_modalities, inputs, cfg.batch_size)
            pairs = (translate_with(G, out_mod, tcfg.input_modalities, mrcat, cfg.batch_size), mr)
            direction = "CT->MR"
        report = evaluate_images(inputs, trans, reals, cfg, direction, pairs)
    report.config = echo
    report.config_hash = config_hash(echo)
    return report

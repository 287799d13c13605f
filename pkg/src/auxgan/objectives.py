"""Adversarial and auxiliary losses for the MR->CT and CT->MR translators.

All losses are written for minimization. The discriminator loss is the
negated cross-entropy GAN objective; generators use the non-saturating form
(minimize -log D(fake)) rather than log(1 - D(fake)).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import torch
import torch.nn.functional as F

from .errors import InvalidArgumentError, InvalidConfigError, NumericError

TERMS = frozenset({"GAN", "cGAN", "L1"})
MODEL_TERMS = {
    "pixmc": frozenset({"GAN", "L1"}),
    "pixcm": frozenset({"GAN", "cGAN", "L1"}),
    "baseline": frozenset({"cGAN", "L1"}),
}
DEFAULT_LAMBDA = {"pixmc": 50.0, "pixcm": 100.0, "baseline": 100.0}


class Branch(str, Enum):
    CT = "CT_branch"
    MRCAT = "MRCAT_branch"


@dataclass
class ObjectiveConfig:
    gan_mode: str = "vanilla"
    lambda_l1: float = 50.0
    terms: frozenset = frozenset({"GAN", "L1"})

    def __post_init__(self):
        self.terms = frozenset(self.terms)
        if self.gan_mode != "vanilla":
            raise InvalidConfigError(f"unsupported gan_mode {self.gan_mode!r}")
        if self.lambda_l1 < 0:
            raise InvalidConfigError("lambda_l1 must be >= 0")
        if not self.terms:
            raise InvalidConfigError("at least one loss term is required")
        if not self.terms <= TERMS:
            raise InvalidConfigError(f"unknown loss terms {sorted(self.terms - TERMS)}")

    @classmethod
    def for_model(cls, model: str, terms=None, lambda_l1=None) -> "ObjectiveConfig":
        if model not in MODEL_TERMS:
            raise InvalidConfigError(f"unknown model {model!r}")
        return cls(
            lambda_l1=DEFAULT_LAMBDA[model] if lambda_l1 is None else lambda_l1,
            terms=MODEL_TERMS[model] if terms is None else terms,
        )

    def check_model(self, model: str):
        allowed = MODEL_TERMS.get(model)
        if allowed is None:
            raise InvalidConfigError(f"unknown model {model!r}")
        if not self.terms <= allowed:
            raise InvalidConfigError(
                f"terms {sorted(self.terms)} not valid for {model}; allowed subset of {sorted(allowed)}"
            )


@dataclass
class LRSchedule:
    base_lr: float = 2e-4
    constant_epochs: int = 30
    decay_epochs: int = 20

    def __post_init__(self):
        if self.base_lr <= 0:
            raise InvalidConfigError("base_lr must be > 0")
        if self.constant_epochs < 0 or self.decay_epochs < 0 or self.total_epochs < 1:
            raise InvalidConfigError("epoch counts must be non-negative with a positive total")

    @property
    def total_epochs(self):
        return self.constant_epochs + self.decay_epochs


def lr_at(epoch: int, sched: LRSchedule) -> float:
    """Learning rate for a 1-based epoch.

    Constant through ``constant_epochs``, then
    ``base_lr * (total - epoch + 1) / (decay_epochs + 1)``, which ends at
    ``base_lr / (decay_epochs + 1)`` rather than zero.
    """
    if not 1 <= epoch <= sched.total_epochs:
        raise InvalidArgumentError(f"epoch {epoch} outside [1, {sched.total_epochs}]")
    if epoch <= sched.constant_epochs:
        return sched.base_lr
    return sched.base_lr * (sched.total_epochs - epoch + 1) / (sched.decay_epochs + 1)


def _finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite logits")


def d_loss_vanilla(real_logits, fake_logits):
    """-mean log sigmoid(real) - mean log(1 - sigmoid(fake))."""
    _finite(real_logits, fake_logits)
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def g_loss_nonsaturating(fake_logits):
    _finite(fake_logits)
    return F.softplus(-fake_logits).mean()


def l1_aux(target, translated):
    if target.shape != translated.shape:
        raise InvalidArgumentError(f"shape mismatch {tuple(target.shape)} vs {tuple(translated.shape)}")
    return (target - translated).abs().mean()


def route_input(rng_draw: float) -> Branch:
    if not 0.0 <= rng_draw < 1.0:
        raise InvalidArgumentError("routing draw must lie in [0, 1)")
    return Branch.CT if rng_draw < 0.5 else Branch.MRCAT


@dataclass
class Losses:
    g_total: Optional[torch.Tensor] = None
    d_total: Optional[torch.Tensor] = None
    d_u_total: Optional[torch.Tensor] = None
    d_c_total: Optional[torch.Tensor] = None
    terms: dict = field(default_factory=dict)

    def log_values(self) -> dict:
        """Scalar values of every present term, for loss logs."""
        out = {}
        for name in ("g_total", "d_total", "d_u_total", "d_c_total"):
            v = getattr(self, name)
            if v is not None:
                out[name] = float(v.detach())
        for name, v in self.terms.items():
            out[name] = float(v.detach())
        return out


def _unpack(x):
    """Accept a datapipe Batch (use its inputs) or a bare tensor."""
    if x is None:
        return None, None
    if isinstance(x, torch.Tensor):
        return x, None
    return x.inputs, list(x.case_ids)


def _aligned(a, b, what):
    ta, ida = a
    tb, idb = b
    if ta is None or tb is None:
        raise InvalidArgumentError(f"{what}: both halves of the pair are required")
    if ta.shape != tb.shape:
        raise InvalidArgumentError(f"{what}: shapes differ {tuple(ta.shape)} vs {tuple(tb.shape)}")
    if ida is not None and idb is not None and ida != idb:
        raise InvalidArgumentError(f"{what}: case ids differ")


def _check_part(part):
    if part not in ("both", "g", "d"):
        raise InvalidArgumentError(f"part must be 'both', 'g' or 'd', got {part!r}")


def pixmc_losses(mr, mrcat, ct, G_A, D_A, cfg: ObjectiveConfig, fake=None, part="both") -> Losses:
    """MR->CT objective: unconditional GAN against real CT plus lambda * L1 to
    the voxel-aligned MRCAT.

    ``fake`` may carry a precomputed ``G_A(mr)`` so the trainer can reuse it
    across its discriminator and generator updates.
    """
    _check_part(part)
    mr_t, ct_t = _unpack(mr), _unpack(ct)
    mrcat_t = _unpack(mrcat)
    _aligned(mr_t, mrcat_t, "MR/MRCAT")
    x, target = mr_t[0], mrcat_t[0]
    fake = G_A(x) if fake is None else fake
    out = Losses()
    use_gan = "GAN" in cfg.terms
    if use_gan and ct_t[0] is None:
        raise InvalidArgumentError("the GAN term needs a CT batch")

    if part in ("both", "g"):
        g = fake.new_zeros(())
        if use_gan:
            out.terms["g_gan"] = g_loss_nonsaturating(D_A(fake))
            g = g + out.terms["g_gan"]
        if "L1" in cfg.terms:
            out.terms["g_l1"] = l1_aux(target, fake)
            g = g + cfg.lambda_l1 * out.terms["g_l1"]
        out.g_total = g
    if part in ("both", "d") and use_gan:
        out.d_total = d_loss_vanilla(D_A(ct_t[0]), D_A(fake.detach()))
    return out


def pix2pix_losses(x, y, G, D, cfg: ObjectiveConfig, fake=None, part="both") -> Losses:
    """Paired conditional objective: D sees ``cat(x, candidate)``; L1 pulls
    ``G(x)`` to the aligned target ``y``."""
    _check_part(part)
    xt, yt = _unpack(x), _unpack(y)
    _aligned(xt, yt, "paired input/target")
    x, y = xt[0], yt[0]
    fake = G(x) if fake is None else fake
    out = Losses()
    use_cgan = "cGAN" in cfg.terms
    if part in ("both", "g"):
        g = fake.new_zeros(())
        if use_cgan:
            out.terms["g_cgan"] = g_loss_nonsaturating(D(torch.cat([x, fake], dim=1)))
            g = g + out.terms["g_cgan"]
        if "L1" in cfg.terms:
            out.terms["g_l1"] = l1_aux(y, fake)
            g = g + cfg.lambda_l1 * out.terms["g_l1"]
        out.g_total = g
    if part in ("both", "d") and use_cgan:
        out.d_total = d_loss_vanilla(D(torch.cat([x, y], dim=1)), D(torch.cat([x, fake.detach()], dim=1)))
    return out


def pixcm_losses(ct, mrcat, mr, G_B, D_Bu, D_Bc, cfg: ObjectiveConfig, branch: Branch, fake=None, part="both"):
    """CT->MR objective for one routed step.

    CT branch: unconditional GAN between ``G_B(ct)`` and real (unpaired) MR,
    no L1. MRCAT branch: conditional GAN on ``(mrcat, G_B(mrcat))`` vs
    ``(mrcat, mr)`` plus lambda * L1 to the aligned MR. The discriminator of
    the inactive branch gets no loss (``None``).
    """
    _check_part(part)
    branch = Branch(branch)
    out = Losses()
    if branch is Branch.CT:
        ct_t, mr_t = _unpack(ct), _unpack(mr)
        if ct_t[0] is None or mr_t[0] is None:
            raise InvalidArgumentError("CT branch needs a CT batch and a real MR batch")
        if "GAN" not in cfg.terms:
            raise InvalidArgumentError("CT branch selected but the GAN term is inactive")
        fake = G_B(ct_t[0]) if fake is None else fake
        if part in ("both", "g"):
            out.terms["g_gan"] = g_loss_nonsaturating(D_Bu(fake))
            out.g_total = out.terms["g_gan"]
        if part in ("both", "d"):
            out.d_u_total = d_loss_vanilla(D_Bu(mr_t[0]), D_Bu(fake.detach()))
        return out

    if _unpack(mrcat)[0] is None or _unpack(mr)[0] is None:
        raise InvalidArgumentError("MRCAT branch needs aligned MRCAT and MR batches")
    if not cfg.terms & {"cGAN", "L1"}:
        raise InvalidArgumentError("MRCAT branch selected but neither cGAN nor L1 is active")
    inner = pix2pix_losses(mrcat, mr, G_B, D_Bc, cfg, fake=fake, part=part)
    out.g_total, out.d_c_total, out.terms = inner.g_total, inner.d_total, inner.terms
    return out


def branch_policy(terms) -> Optional[Branch]:
    """Forced branch for a term set, or ``None`` when routing is random."""
    terms = frozenset(terms)
    has_ct = "GAN" in terms
    has_mrcat = bool(terms & {"cGAN", "L1"})
    if has_ct and has_mrcat:
        return None
    return Branch.CT if has_ct else Branch.MRCAT


LN2 = math.log(2.0)

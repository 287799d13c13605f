"""Alternating D/G optimization for pixmc, pixcm and the paired baseline."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import nets as N
from .datapipe import AugmentConfig, make_loader
from .errors import InvalidArgumentError, InvalidConfigError, NonFiniteLossError, NumericError
from .objectives import (
    Branch,
    LRSchedule,
    ObjectiveConfig,
    branch_policy,
    lr_at,
    pix2pix_losses,
    pixcm_losses,
    pixmc_losses,
    route_input,
)
from .phantom import DatasetManifest, Modality, SliceImage

log = logging.getLogger(__name__)

MODELS = ("pixmc", "pixcm", "baseline")
DIRECTIONS = ("mr2ct", "ct2mr")
ROUTE_STREAM = 7


@dataclass
class TrainConfig:
    model: str = "pixmc"
    epochs: int = 10
    iters_per_epoch: int = 200
    batch_size: int = 16
    objective: Optional[ObjectiveConfig] = None
    schedule: Optional[LRSchedule] = None
    adam_betas: tuple = (0.5, 0.999)
    seed: int = 0
    checkpoint_every: int = 200
    generator: N.GeneratorSpec = field(default_factory=N.GeneratorSpec)
    disc_base_width: int = 32
    disc_layers: int = 3
    channels: int = 1
    baseline_direction: str = "mr2ct"
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.model not in MODELS:
            raise InvalidConfigError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.baseline_direction not in DIRECTIONS:
            raise InvalidConfigError(f"baseline_direction must be one of {DIRECTIONS}")
        if self.batch_size < 1 or self.epochs < 1 or self.iters_per_epoch < 1:
            raise InvalidConfigError("batch_size, epochs and iters_per_epoch must be >= 1")
        if self.checkpoint_every < 1:
            raise InvalidConfigError("checkpoint_every must be >= 1")
        if self.objective is None:
            self.objective = ObjectiveConfig.for_model(self.model)
        self.objective.check_model(self.model)
        if self.schedule is None:
            constant = int(round(0.6 * self.epochs))
            self.schedule = LRSchedule(constant_epochs=constant, decay_epochs=self.epochs - constant)
        if self.schedule.total_epochs != self.epochs:
            raise InvalidConfigError(
                f"schedule covers {self.schedule.total_epochs} epochs but training runs {self.epochs}"
            )
        if self.generator.in_channels != self.channels or self.generator.out_channels != self.channels:
            self.generator = N.GeneratorSpec(
                self.channels, self.channels, self.generator.base_width, self.generator.depth, self.generator.norm
            )
        self.adam_betas = tuple(self.adam_betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objective"]["terms"] = sorted(self.objective.terms)
        d["augment"]["zoom_range"] = list(self.augment.zoom_range)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("objective") is not None:
            d["objective"] = ObjectiveConfig(**d["objective"])
        if d.get("schedule") is not None:
            d["schedule"] = LRSchedule(**d["schedule"])
        if "generator" in d:
            d["generator"] = N.GeneratorSpec(**d["generator"])
        if "augment" in d:
            d["augment"] = AugmentConfig(**d["augment"])
        return cls(**d)

    def config_hash(self) -> str:
        return config_hash(self.to_dict())

    @property
    def output_modality(self) -> Modality:
        if self.model == "pixmc" or (self.model == "baseline" and self.baseline_direction == "mr2ct"):
            return Modality.sCT
        return Modality.sMR

    @property
    def input_modalities(self):
        if self.output_modality is Modality.sCT:
            return {Modality.MR}
        return {Modality.CT, Modality.MRCAT}


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainState:
    epoch: int = 1
    iter: int = 0
    global_step: int = 0
    history: list = field(default_factory=list)  # loss-log records

    def advance(self, iters_per_epoch):
        self.global_step += 1
        self.iter += 1
        if self.iter == iters_per_epoch:
            self.epoch += 1
            self.iter = 0


@dataclass
class TrainReport:
    model: str
    config_hash: str
    steps: int
    final_losses: dict
    checkpoints: list
    final_checkpoint: str
    log_path: str

    def write(self, path):
        Path(path).write_text(json.dumps(asdict(self), sort_keys=True, indent=2) + "\n")


def build_models(cfg: TrainConfig):
    """Networks for ``cfg.model``, keyed by role, deterministically seeded."""
    c = cfg.channels

    def disc(conditional, seed_offset):
        spec = N.DiscriminatorSpec(
            in_channels=c,
            base_width=cfg.disc_base_width,
            n_strided_layers=cfg.disc_layers,
            conditional=conditional,
            condition_channels=c if conditional else 0,
        )
        return N.build_discriminator(spec, cfg.seed * 1000 + seed_offset)

    models = {"G": N.build_generator(cfg.generator, cfg.seed * 1000)}
    if cfg.model == "pixmc":
        if "GAN" in cfg.objective.terms:
            models["D"] = disc(False, 1)
    elif cfg.model == "pixcm":
        if "GAN" in cfg.objective.terms:
            models["D_u"] = disc(False, 1)
        if "cGAN" in cfg.objective.terms:
            models["D_c"] = disc(True, 2)
    else:
        if "cGAN" in cfg.objective.terms:
            models["D_c"] = disc(True, 2)
    return models


def _json_float(t):
    v = float(t)
    return v if math.isfinite(v) else repr(v)  # strict JSON has no nan/inf


def _requires_grad(net, flag):
    for p in net.parameters():
        p.requires_grad_(flag)


def _route(cfg: TrainConfig, epoch: int, it: int) -> Branch:
    forced = branch_policy(cfg.objective.terms)
    if forced is not None:
        return forced
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, it, ROUTE_STREAM]))
    return route_input(float(rng.random()))


class Trainer:
    """Owns networks and optimizers; ``step`` runs one D-then-G iteration.

    ``hooks`` are called as ``hook(event, epoch, it)`` with events
    ``"d_step:<role>"`` after each discriminator update and ``"g_step"`` after
    the generator update.
    """

    def __init__(self, cfg: TrainConfig, hooks: Optional[list] = None):
        self.cfg = cfg
        self.models = build_models(cfg)
        self.optims = {
            name: torch.optim.Adam(net.parameters(), lr=cfg.schedule.base_lr, betas=cfg.adam_betas)
            for name, net in self.models.items()
        }
        self.state = TrainState()
        self.hooks = list(hooks or [])

    def _emit(self, event, epoch, it):
        for h in self.hooks:
            h(event, epoch, it)

    def set_lr(self, lr):
        for opt in self.optims.values():
            for group in opt.param_groups:
                group["lr"] = lr

    def _d_update(self, role, loss, epoch, it):
        opt = self.optims[role]
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        self._emit(f"d_step:{role}", epoch, it)

    def step(self, batch, epoch: int, it: int) -> dict:
        try:
            return self._step(batch, epoch, it)
        except NumericError as err:
            raise NonFiniteLossError(f"non-finite values at epoch {epoch} iter {it}: {err}",
                                     self._snapshot(batch, epoch, it, {"logits": "non-finite"})) from err

    def _step(self, batch, epoch, it):
        cfg, m = self.cfg, self.models
        G = m["G"]
        discs = [r for r in m if r != "G"]
        for r in discs:
            _requires_grad(m[r], True)

        if cfg.model == "pixmc":
            paired, ct = batch.paired, batch.ct
            mr, mrcat = paired.inputs, paired.targets
            fake = G(mr)
            args = (mr, mrcat, ct.inputs, G, m.get("D"), cfg.objective)
            values = {}
            if "D" in m:
                d = pixmc_losses(*args, fake=fake, part="d")
                values.update(d.log_values())
                self._check(values, batch, epoch, it)
                self._d_update("D", d.d_total, epoch, it)
                _requires_grad(m["D"], False)
            g = pixmc_losses(*args, fake=fake, part="g")
        elif cfg.model == "pixcm":
            paired, ct = batch.paired, batch.ct
            branch = _route(cfg, epoch, it)
            x = ct.inputs if branch is Branch.CT else paired.targets
            fake = G(x)
            args = (ct.inputs, paired.targets, paired.inputs, G, m.get("D_u"), m.get("D_c"), cfg.objective, branch)
            values = {"branch_ct": 1.0 if branch is Branch.CT else 0.0}
            role = "D_u" if branch is Branch.CT else "D_c"
            if role in m:
                d = pixcm_losses(*args, fake=fake, part="d")
                values.update(d.log_values())
                self._check(values, batch, epoch, it)
                self._d_update(role, d.d_u_total if role == "D_u" else d.d_c_total, epoch, it)
                _requires_grad(m[role], False)
            g = pixcm_losses(*args, fake=fake, part="g")
        else:
            b = batch if cfg.baseline_direction == "mr2ct" else batch.swapped()
            fake = G(b.inputs)
            args = (b.inputs, b.targets, G, m.get("D_c"), cfg.objective)
            values = {}
            if "D_c" in m:
                d = pix2pix_losses(*args, fake=fake, part="d")
                values.update({"d_c_total": float(d.d_total.detach())})
                self._check(values, batch, epoch, it)
                self._d_update("D_c", d.d_total, epoch, it)
                _requires_grad(m["D_c"], False)
            g = pix2pix_losses(*args, fake=fake, part="g")

        values.update(g.log_values())
        self._check(values, batch, epoch, it)
        opt = self.optims["G"]
        opt.zero_grad(set_to_none=True)
        g.g_total.backward()
        opt.step()
        self._emit("g_step", epoch, it)
        return values

    def _check(self, values, batch, epoch, it):
        bad = {k: v for k, v in values.items() if not math.isfinite(v)}
        if bad:
            snapshot = self._snapshot(batch, epoch, it, {k: repr(v) for k, v in bad.items()})
            raise NonFiniteLossError(f"non-finite loss at epoch {epoch} iter {it}: {sorted(bad)}", snapshot)

    def _snapshot(self, batch, epoch, it, bad):
        ids = []
        for part in ("paired", "ct"):
            sub = getattr(batch, part, None)
            if sub is not None:
                ids += list(sub.case_ids)
        if hasattr(batch, "case_ids"):
            ids += list(batch.case_ids)
        return {
            "epoch": epoch,
            "iter": it,
            "bad_terms": bad,
            "batch_case_ids": ids,
            "param_norms": {name: _json_float(N.flat_parameters(net).norm()) for name, net in self.models.items()},
        }

    # -- checkpoints ---------------------------------------------------------

    def save(self, path):
        st = self.state
        N.save_checkpoint(
            path,
            nets=self.models,
            optimizers=self.optims,
            state={"epoch": st.epoch, "iter": st.iter, "global_step": st.global_step, "history": st.history},
            config={"train": self.cfg.to_dict(), "config_hash": self.cfg.config_hash()},
        )

    def load(self, path):
        payload = N.load_checkpoint(path)
        saved_hash = payload["config"]["config_hash"]
        if saved_hash != self.cfg.config_hash():
            raise InvalidConfigError(f"checkpoint config {saved_hash} does not match {self.cfg.config_hash()}")
        for name, net in self.models.items():
            net.load_state_dict(payload["nets"][name]["params"])
        for name, opt in self.optims.items():
            opt.load_state_dict(payload["optimizers"][name])
        s = payload["state"]
        self.state = TrainState(s["epoch"], s["iter"], s["global_step"], list(s["history"]))


def _stream_for(cfg: TrainConfig, manifest: DatasetManifest):
    regime = "paired_only" if cfg.model == "baseline" else "mixed"
    return make_loader(manifest, regime, cfg.batch_size, cfg.augment, cfg.iters_per_epoch, channels=cfg.channels)


def preflight(cfg: TrainConfig, manifest: DatasetManifest, resume=None):
    """Validate data and resume target before anything is written."""
    if not manifest.select(split="train", paired=True):
        raise InvalidConfigError("dataset has no paired training cases")
    if cfg.model != "baseline" and not manifest.select(split="train", paired=False):
        raise InvalidConfigError(f"{cfg.model} needs unpaired CT training cases")
    if resume is not None:
        saved = N.load_checkpoint(resume)["config"]["config_hash"]
        if saved != cfg.config_hash():
            raise InvalidConfigError(f"checkpoint config {saved} does not match {cfg.config_hash()}")


def _write_log(path: Path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def train(
    cfg: TrainConfig,
    manifest: DatasetManifest,
    out_dir,
    resume=None,
    hooks: Optional[list] = None,
    stop_after: Optional[int] = None,
) -> TrainReport:
    """Run the full schedule, or continue one from ``resume``.

    Writes ``losses.jsonl`` (one ``{epoch, iter, term, value}`` record per
    line), checkpoints under ``checkpoints/`` and ``report.json``.
    ``stop_after`` ends the run early after that many global steps (used to
    produce a mid-run checkpoint).
    """
    preflight(cfg, manifest, resume)
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = out / "losses.jsonl"

    trainer = Trainer(cfg, hooks)
    checkpoints = []
    if resume is not None:
        trainer.load(resume)
    else:
        p = ckpt_dir / "step_000000.pt"
        trainer.save(p)
        checkpoints.append(str(p))
    _write_log(log_path, trainer.state.history)

    stream = _stream_for(cfg, manifest)
    st = trainer.state
    total = cfg.epochs * cfg.iters_per_epoch
    last = {}
    with open(log_path, "a") as fh:
        while st.global_step < total:
            if stop_after is not None and st.global_step >= stop_after:
                break
            epoch, it = st.epoch, st.iter
            trainer.set_lr(lr_at(epoch, cfg.schedule))
            try:
                values = trainer.step(stream.batch(epoch, it), epoch, it)
            except NonFiniteLossError as err:
                (out / "abort_snapshot.json").write_text(json.dumps(err.snapshot, sort_keys=True, indent=2))
                raise
            for term in sorted(values):
                rec = {"epoch": epoch, "iter": it, "term": term, "value": values[term]}
                st.history.append(rec)
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            last = values
            st.advance(cfg.iters_per_epoch)
            if st.global_step % cfg.checkpoint_every == 0 or st.global_step == total:
                fh.flush()
                p = ckpt_dir / f"step_{st.global_step:06d}.pt"
                trainer.save(p)
                checkpoints.append(str(p))
            if st.global_step % max(1, cfg.iters_per_epoch) == 0:
                log.info("epoch %d done: %s", epoch, {k: round(v, 4) for k, v in values.items()})

    final = ckpt_dir / "final.pt"
    trainer.save(final)
    report = TrainReport(
        model=cfg.model,
        config_hash=cfg.config_hash(),
        steps=st.global_step,
        final_losses=last,
        checkpoints=checkpoints,
        final_checkpoint=str(final),
        log_path=str(log_path),
    )
    report.write(out / "report.json")
    return report


def load_generator(checkpoint):
    """Return ``(generator, TrainConfig)`` from a checkpoint file."""
    payload = N.load_checkpoint(checkpoint)
    cfg = TrainConfig.from_dict(payload["config"]["train"])
    G = N.restore_net(payload["nets"]["G"])
    G.eval()
    return G, cfg


def translate(checkpoint, images: list, batch_size: int = 16) -> list:
    """Run the checkpoint's generator over ``images``; outputs are tagged
    sCT or sMR and clamped to [-1, 1]."""
    G, cfg = load_generator(checkpoint)
    return translate_with(G, cfg.output_modality, cfg.input_modalities, images, batch_size)


def translate_with(G, out_modality, accepted, images, batch_size=16):
    for img in images:
        if img.modality not in accepted:
            raise InvalidArgumentError(
                f"{img.case_id}: modality {img.modality.value} not accepted (expects {sorted(m.value for m in accepted)})"
            )
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            chunk = images[i : i + batch_size]
            x = torch.from_numpy(np.stack([im.pixels for im in chunk]).astype(np.float32))
            y = G(x).clamp(-1.0, 1.0).numpy()
            out += [SliceImage(y[k], out_modality, im.case_id) for k, im in enumerate(chunk)]
    return out

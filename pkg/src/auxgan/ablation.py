"""Objective ablations: one shared seed, one row per loss-term combination."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

from .metrics import EvalConfig, MetricReport, evaluate, flat_row
from .objectives import ObjectiveConfig
from .trainer import TrainConfig, train

VARIANTS = {
    "pixmc": [
        ("L1", ("L1",)),
        ("GAN", ("GAN",)),
        ("GAN+lambda*L1", ("GAN", "L1")),
    ],
    "pixcm": [
        ("GAN", ("GAN",)),
        ("GAN+cGAN", ("GAN", "cGAN")),
        ("GAN+cGAN+lambda*L1", ("GAN", "cGAN", "L1")),
    ],
}


@dataclass
class AblationRow:
    objective: str
    terms: tuple
    report: MetricReport
    checkpoint: str

    def flat(self):
        return flat_row(self.report, objective=self.objective, terms="+".join(self.terms))


def variant_config(base: TrainConfig, terms) -> TrainConfig:
    obj = ObjectiveConfig(gan_mode=base.objective.gan_mode, lambda_l1=base.objective.lambda_l1, terms=terms)
    return replace(base, objective=obj)


def run_ablation(base: TrainConfig, manifest, out_dir, eval_cfg: EvalConfig = EvalConfig(), log=print):
    """Train and evaluate every objective variant of ``base.model``.

    Writes ``ablation.csv`` and ``ablation.json`` under ``out_dir`` and
    returns the rows in table order.
    """
    if base.model not in VARIANTS:
        raise ValueError(f"no ablation defined for {base.model!r}")
    out = Path(out_dir)
    rows = []
    for name, terms in VARIANTS[base.model]:
        cfg = variant_config(base, terms)
        slug = name.replace("+", "_").replace("*", "")
        rep = train(cfg, manifest, out / slug)
        metrics = evaluate(rep.final_checkpoint, manifest, eval_cfg)
        metrics.write(out / slug)
        rows.append(AblationRow(name, tuple(terms), metrics, rep.final_checkpoint))
        if log is not None:
            log(f"{base.model} {name}: fid={metrics.fid:.3f} kid={metrics.kid:.4f} dice={metrics.dice_mean:.3f}")
    write_table(rows, out)
    return rows


def write_table(rows, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    flat = [r.flat() for r in rows]
    fields = []
    for f in flat:
        fields += [k for k in f if k not in fields]
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(flat)
    (out / "ablation.json").write_text(json.dumps(flat, sort_keys=True, indent=2) + "\n")
    return out / "ablation.csv"

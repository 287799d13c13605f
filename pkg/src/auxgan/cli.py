"""Command-line entry point: ``auxgan {gen-data,train,evaluate,ablate}``.

Exit codes: 0 success, 1 I/O failure, 2 invalid arguments or config,
3 training aborted on a non-finite loss. Outputs default to ``$AUXGAN_OUT``
when ``--out`` is not given.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .errors import InvalidArgumentError, InvalidConfigError, NonFiniteLossError, NumericError

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NAN = 0, 1, 2, 3
MODEL_CHOICES = ("pixmc", "pixcm", "baseline")


def _err(msg):
    print(f"auxgan: error: {msg}", file=sys.stderr)


def cmd_gen_data(args) -> int:
    from .phantom import generate_dataset

    if args.n_paired < 1 or args.n_ct < 1:
        _err("--n-paired and --n-ct must be >= 1")
        return EXIT_USAGE
    m = generate_dataset(
        args.n_paired, args.n_ct, args.resolution, args.seed, args.out, eval_fraction=args.eval_fraction
    )
    print(f"wrote {len(m.cases)} cases to {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


def _run_config(args, extra=None):
    from .config import load_config

    overrides = {
        "data.path": getattr(args, "data", None),
        "out": getattr(args, "out", None),
        "train.model": getattr(args, "model", None),
        "train.epochs": getattr(args, "epochs", None),
        "train.iters_per_epoch": getattr(args, "iters", None),
        "train.batch_size": getattr(args, "batch_size", None),
        "train.seed": getattr(args, "seed", None),
    }
    overrides.update(extra or {})
    return load_config(args.config, overrides)


def _manifest(cfg):
    from .phantom import DatasetManifest

    if not cfg.data.path:
        raise InvalidConfigError("no dataset given (use --data or data.path in the config)")
    return DatasetManifest.load(cfg.data.path)


def cmd_train(args) -> int:
    from .config import dump_config
    from .trainer import preflight, train

    cfg = _run_config(args)
    manifest = _manifest(cfg)
    preflight(cfg.train, manifest, args.resume)
    out = cfg.out_dir(fallback=f"runs/{cfg.train.model}")
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "run_config.json")
    report = train(cfg.train, manifest, out, resume=args.resume)
    print(json.dumps({"config_hash": report.config_hash, "final_losses": report.final_losses}, sort_keys=True))
    print(f"checkpoint: {report.final_checkpoint}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .config import dump_config
    from .metrics import evaluate

    cfg = _run_config(args)
    manifest = _manifest(cfg)
    ckpt = args.checkpoint
    if ckpt != "identity" and not Path(ckpt).exists():
        raise InvalidArgumentError(f"checkpoint {ckpt} not found")
    report = evaluate(ckpt, manifest, cfg.eval)
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "run_config.json")
    path = report.write(out)
    print(
        f"fid={report.fid:.6f} kid={report.kid:.6f} dice={report.dice_mean:.3f}+-{report.dice_std:.3f}"
        + (f" hu_dif={report.hu_dif:.2f}" if report.hu_dif is not None else "")
    )
    print(f"report: {path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import run_ablation
    from .config import dump_config
    from .trainer import preflight

    cfg = _run_config(args)
    manifest = _manifest(cfg)
    preflight(cfg.train, manifest)
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "run_config.json")
    rows = run_ablation(cfg.train, manifest, out, cfg.eval, log=None)
    print(f"{'objective':<22} {'fid':>10} {'kid':>10} {'dice':>6}")
    for r in rows:
        print(f"{r.objective:<22} {r.report.fid:>10.5f} {r.report.kid:>10.6f} {r.report.dice_mean:>6.3f}")
    print(f"table: {out / 'ablation.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="auxgan", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    g.add_argument("--n-paired", type=int, default=32, help="paired MR/MRCAT cases")
    g.add_argument("--n-ct", type=int, default=128, help="unpaired CT cases")
    g.add_argument("--resolution", type=int, default=128)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--eval-fraction", type=float, default=0.2)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    def common(sp, model_choices=MODEL_CHOICES, need_model=False):
        sp.add_argument("--config", help="YAML/JSON run config; flags override it")
        sp.add_argument("--data", help="dataset directory (contains manifest.json)")
        sp.add_argument("--out", help="output directory (default: $AUXGAN_OUT)")
        if model_choices:
            sp.add_argument("--model", choices=model_choices, required=need_model)

    t = sub.add_parser("train", help="train one model")
    common(t, need_model=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--iters", type=int, help="iterations per epoch")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint (or 'identity') on the eval split")
    common(e, model_choices=None)
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and score every objective variant")
    common(a, model_choices=("pixmc", "pixcm"), need_model=True)
    a.add_argument("--epochs", type=int)
    a.add_argument("--iters", type=int)
    a.add_argument("--batch-size", type=int)
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except (InvalidArgumentError, InvalidConfigError, NumericError) as err:
        _err(str(err))
        return EXIT_USAGE
    except NonFiniteLossError as err:
        _err(str(err))
        return EXIT_NAN
    except OSError as err:
        _err(str(err))
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

    sagd train [--config FILE] [--paper-scale] [--key=value ...]
    sagd eval --checkpoint CK [--attacks none,pgd] [--key=value ...]
    sagd sharpness CK [CK ...] [--key=value ...]
    sagd export-bank --checkpoint CK [--out PATH] [--key=value ...]
    sagd convert-dataset SOURCE DEST

Any config key can be overridden with ``--section.key=value`` (the value is
parsed as YAML). Relative output directories are placed under
``$SAGD_OUTPUT_ROOT`` when it is set.

Exit codes: 0 success, 2 configuration error, 3 divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import PAPER_SCALE, load_config
from .errors import ConfigError, ContractViolation, DivergenceError, IngestionError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("sagd")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sagd", description="Robust OOD detection experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--paper-scale", action="store_true", help="apply the paper-scale training overrides")
        return sp

    with_config(sub.add_parser("train", help="train a model and write checkpoint.npz"))
    ev = with_config(sub.add_parser("eval", help="evaluate a checkpoint under attack conditions"))
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--attacks", help="comma-separated attack names (default: eval.attacks)")
    sh = with_config(sub.add_parser("sharpness", help="sharpness table for one or more checkpoints"))
    sh.add_argument("checkpoints", nargs="+")
    ex = with_config(sub.add_parser("export-bank", help="write the ID-train embedding bank"))
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--out")
    cv = sub.add_parser("convert-dataset", help="pack a CIFAR batch directory or image tree")
    cv.add_argument("source")
    cv.add_argument("dest")
    return p


def _split_overrides(extra):
    overrides = []
    for tok in extra:
        if not tok.startswith("--") or "=" not in tok:
            raise ConfigError(f"unrecognised argument {tok!r}; overrides take the form --key=value")
        overrides.append(tok[2:])
    return overrides


def _run(args, overrides) -> None:
    if args.command == "convert-dataset":
        from .data import convert_dataset

        if overrides:
            raise ConfigError("convert-dataset takes no config overrides")
        convert_dataset(args.source, args.dest)
        return

    from . import experiment

    items = list(PAPER_SCALE.items()) if args.paper_scale else []
    cfg = load_config(args.config, items + overrides)
    if args.command == "train":
        print(experiment.cmd_train(cfg))
    elif args.command == "eval":
        attacks = args.attacks.split(",") if args.attacks else None
        report = experiment.cmd_eval(cfg, args.checkpoint, attacks)
        for row in report.rows:
            print(f"{row.condition:8s} fpr95={row.fpr95:.4f} auc={row.auc:.4f} "
                  f"auc_in={row.auc_in:.4f} auc_out={row.auc_out:.4f}")
    elif args.command == "sharpness":
        for ck, rho, s in experiment.cmd_sharpness(cfg, args.checkpoints):
            print(f"{ck} rho={rho:g} sharpness={s:.6g}")
    elif args.command == "export-bank":
        print(experiment.cmd_export_bank(cfg, args.checkpoint, args.out))


def main(argv=None) -> int:
    args, extra = _parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _run(args, _split_overrides(extra))
    except (ConfigError, ContractViolation) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except DivergenceError as exc:
        log.error("divergence: %s %s", exc, exc.payload)
        return EXIT_DIVERGENCE
    except (IngestionError, OSError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""``lungrisk`` command line: gen-phantom, train-seg, train-recur, fit-forest, predict, evaluate."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import ConfigError, LungRiskError
from . import commands
from .config import load_config

VERBS = ("gen-phantom", "train-seg", "train-recur", "fit-forest", "predict", "evaluate")


def _pair(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="global seed (overrides `seed`)")
    common.add_argument("--data-root", help="dataset directory (overrides `data.root`)")
    common.add_argument("--out", help="parent of new run directories (overrides `data.out`)")
    common.add_argument("--set", action="append", type=_pair, default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lungrisk", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    g = sub.add_parser("gen-phantom", parents=[common], help="write a synthetic phantom dataset to the data root")
    g.add_argument("--patients", type=int, help="number of patients (overrides `data.n_patients`)")
    g.add_argument("--no-nodules", action="store_true", help="nodule-free volumes")
    for verb in ("train-seg", "train-recur", "fit-forest", "evaluate"):
        p = sub.add_parser(verb, parents=[common])
        p.add_argument("--run-dir", help="existing run directory; default creates <out>/run-<timestamp>-<seed>")
    p = sub.add_parser("predict", parents=[common], help="score one patient with a run's trained artifacts")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--volume", required=True, help="CT volume header (.hdr)")
    p.add_argument("--clinical", required=True, help="clinical table with the patient's rows")
    p.add_argument("--patient", help="patient id when the table holds several")
    return parser


def _config(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(("seed", str(args.seed)))
    if args.data_root is not None:
        overrides.append(("data.root", args.data_root))
    if args.out is not None:
        overrides.append(("data.out", args.out))
    if getattr(args, "patients", None) is not None:
        overrides.append(("data.n_patients", str(args.patients)))
    return load_config(args.config, overrides)


def run(argv=None) -> dict:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    cfg = _config(args)
    if args.verb == "gen-phantom":
        return commands.cmd_gen_phantom(cfg, with_nodules=not args.no_nodules)
    if args.verb in ("predict",) or args.run_dir is not None:
        r = commands.Run(args.run_dir, cfg)
    else:
        if args.verb != "train-seg":
            raise ConfigError(f"{args.verb} needs --run-dir pointing at an earlier run")
        cfg.validate()
        r = commands.open_run(cfg)
    if args.verb == "train-seg":
        summary = commands.cmd_train_seg(cfg, r)
    elif args.verb == "train-recur":
        summary = commands.cmd_train_recur(cfg, r)
    elif args.verb == "fit-forest":
        summary = commands.cmd_fit_forest(cfg, r)
    elif args.verb == "evaluate":
        summary = commands.cmd_evaluate(cfg, r)
    else:
        pred = commands.cmd_predict(cfg, r, args.volume, args.clinical, args.patient)
        summary = {"patient_id": pred.patient_id, "status": pred.status,
                   "probability": pred.probability, "label": pred.label}
    summary["run_dir"] = str(r.path)
    return summary


def main(argv=None) -> int:
    try:
        summary = run(argv)
    except LungRiskError as e:
        print(f"{type(e).__name__}: {' '.join(str(e).split())}", file=sys.stderr)
        return e.exit_code
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())

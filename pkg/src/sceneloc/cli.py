"""Command line entry point: one subcommand per pipeline stage.

Every experiment-config field is exposed as a flag (underscores become
hyphens), applied on top of an optional JSON config file. Errors from the
package taxonomy print a machine-parsable category on stderr and map to
stable exit codes; anything else is a bug and tracebacks normally.
"""

import argparse
import dataclasses
import sys

from . import pipeline
from .config import ExperimentConfig, apply_overrides, load_config
from .errors import EXIT_CODES, SceneLocError

# spec'd short aliases on top of the auto-generated field flags
_ALIASES = (
    ("--hypotheses", "n_hypotheses", int),
    ("--samples", "samples_per_frame", int),
    ("--seed", "rng_seed", int),
)


def _add_config_args(sp):
    sp.add_argument("--config", metavar="PATH", help="JSON config file")
    for f in dataclasses.fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        sp.add_argument(flag, dest=f.name, type=f.type, default=None, metavar="V")
    for flag, dest, typ in _ALIASES:
        sp.add_argument(flag, dest=dest, type=typ, default=None, metavar="V")


def _build_config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    overrides = {
        n: getattr(args, n) for n in names if getattr(args, n, None) is not None
    }
    return apply_overrides(cfg, overrides)


def _cmd_synth(cfg, args):
    root = pipeline.run_synth(cfg)
    print(f"dataset written to {root}")


def _cmd_train_forest(cfg, args):
    fpath, spath = pipeline.run_train_forest(cfg)
    print(f"forest written to {fpath}")
    print(f"training samples written to {spath}")


def _cmd_map(cfg, args):
    npath, plans = pipeline.run_map(cfg)
    print(f"network ensemble written to {npath}")
    for t, plan in enumerate(plans):
        print(f"tree {t}: {plan.summary()}")


def _cmd_finetune(cfg, args):
    tuned, cpath = pipeline.run_finetune(cfg)
    print(f"tuned checkpoint written to {tuned}")
    print(f"loss curves written to {cpath}")


def _cmd_mapback(cfg, args):
    bpath = pipeline.run_mapback(cfg, checkpoint=args.checkpoint)
    print(f"mapped-back forest written to {bpath}")


def _cmd_localize(cfg, args):
    lpath, payload = pipeline.run_localize(
        cfg, predictor=args.predictor, checkpoint=args.checkpoint
    )
    pose = payload["pose"]
    coord = payload["coord"]
    print(f"result written to {lpath}")
    print(
        f"{payload['method']} / {payload['column']}: "
        f"median {100 * pose['median_translation_m']:.1f}cm "
        f"{pose['median_rotation_deg']:.1f}deg, "
        f"{pose['percent_correct']:.0f}% correct, "
        f"{100 * coord['frame_mean_inlier_fraction']:.1f}% coordinate inliers"
    )


def _cmd_report(cfg, args):
    tpath, text = pipeline.run_report(cfg)
    print(text, end="")
    print(f"report written to {tpath}")


def build_parser():
    p = argparse.ArgumentParser(
        prog="sceneloc",
        description="scene-coordinate camera localization pipeline",
    )
    sub = p.add_subparsers(dest="cmd", required=True)
    handlers = {
        "synth": _cmd_synth,
        "train-forest": _cmd_train_forest,
        "map": _cmd_map,
        "finetune": _cmd_finetune,
        "mapback": _cmd_mapback,
        "localize": _cmd_localize,
        "report": _cmd_report,
    }
    for name in handlers:
        sp = sub.add_parser(name)
        _add_config_args(sp)
        if name == "mapback":
            sp.add_argument("--checkpoint", default=None, metavar="PATH")
        if name == "localize":
            sp.add_argument(
                "--predictor",
                choices=("forest", "net", "mapback"),
                default="net",
            )
            sp.add_argument("--checkpoint", default=None, metavar="PATH")
    return p, handlers


def main(argv=None):
    parser, handlers = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _build_config(args)
        handlers[args.cmd](cfg, args)
    except SceneLocError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())

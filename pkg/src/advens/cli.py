"""Command line entry point: ``advens <subcommand>`` or ``python -m advens``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import gradsuite, harness
from .attacks import attack as run_attack
from .checkpoint import CheckpointError, load_checkpoint
from .harness import UsageError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_FILE = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file with flat keys")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--out", help="output root (config key 'output', env ADVENS_OUT)")


def _attack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--attack", choices=("ifgsm", "pgd", "margin"), default="pgd")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--delta", type=float, help="config key 'delta'")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advens", description="Adversarial training of ensembles at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one (model class, seed) cell")
    _common(p)
    p.add_argument("--class", dest="model_class", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, help="config key 'steps'")

    p = sub.add_parser("grid", help="run every class x seed, then the report")
    _common(p)
    p.add_argument("--seeds", help="seed count N or comma list (config key 'seeds')")
    p.add_argument("--classes", help="comma list (config key 'classes')")
    p.add_argument("--workers", type=int, help="config key 'workers'")

    p = sub.add_parser("eval", help="clean and robust accuracy of a checkpoint")
    _common(p)
    p.add_argument("--ckpt", required=True)
    _attack_flags(p)
    p.add_argument("--output-file", help="JSON result path (default next to the checkpoint)")

    p = sub.add_parser("attack", help="write adversarial test inputs for a checkpoint")
    _common(p)
    p.add_argument("--ckpt", required=True)
    _attack_flags(p)
    p.add_argument("--output-file", required=True, help=".npz destination")

    p = sub.add_parser("blackbox", help="black-box transfer set")
    bsub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    g = bsub.add_parser("gen", help="generate a transfer set")
    _common(g)
    g.add_argument("--sources", nargs="*", default=[], help="source checkpoints (default: train two)")
    g.add_argument("--output-file", required=True)
    e = bsub.add_parser("eval", help="accuracy of a checkpoint on a transfer set")
    e.add_argument("--set", dest="bbset", required=True)
    e.add_argument("--ckpt", required=True)

    p = sub.add_parser("report", help="rebuild tables from a run directory")
    p.add_argument("--runs", required=True, help="grid output root")

    p = sub.add_parser("gradcheck", help="randomised gradient checks")
    p.add_argument("--seeds", type=int, default=100)
    return parser


def _config(args, **flag_keys) -> dict:
    overrides = dict(harness.parse_override(s) for s in args.set)
    for key, value in flag_keys.items():
        if value is not None:
            overrides[key] = value
    if getattr(args, "out", None):
        overrides["output"] = args.out
    return harness.load_config(args.config, overrides)


def _parse_seeds(text):
    if text is None:
        return None
    if "," in text:
        return [int(t) for t in text.split(",") if t]
    return list(range(int(text)))


def _eval_target(args, cfg):
    ckpt = load_checkpoint(args.ckpt)
    _, test = harness.build_data(cfg)
    subset = harness.eval_subset(test, cfg["eval_size"])
    acfg = harness.metric_attack(f"{args.attack}-{args.steps}", cfg["delta"], test.domain_clamp)
    return ckpt, subset, acfg


def cmd_train(args) -> int:
    cfg = _config(args, steps=args.steps)
    meta = harness.run_cell(cfg, args.model_class, args.seed)
    print(json.dumps(meta["final"], sort_keys=True))
    return EXIT_OK


def cmd_grid(args) -> int:
    classes = args.classes.split(",") if args.classes else None
    cfg = _config(args, seeds=_parse_seeds(args.seeds), classes=classes, workers=args.workers)
    code, manifest = harness.run_grid(cfg)
    bad = [c for c in manifest["cells"] if c["status"] == "failed"]
    for c in bad:
        print(f"FAILED {c['model_class']}/{c['seed']} {c['metric']}: {c['note']}", file=sys.stderr)
    print(f"grid finished: {len(manifest['cells'])} cells, {len(bad)} failed -> {harness.output_root(cfg)}")
    return code


def cmd_eval(args) -> int:
    cfg = _config(args, delta=args.delta)
    ckpt, subset, acfg = _eval_target(args, cfg)
    result = {"checkpoint": str(args.ckpt), "attack": args.attack, "steps": args.steps,
              "delta": cfg["delta"], "n": len(subset),
              "clean": ev.accuracy(ckpt.ensemble, subset),
              "robust": ev.robust_accuracy(ckpt.ensemble, subset, acfg, cfg["eval_seed"])}
    out = Path(args.output_file or Path(args.ckpt).with_suffix(f".eval-{args.attack}-{args.steps}.json"))
    harness.write_json(out, result)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _config(args, delta=args.delta)
    ckpt, subset, acfg = _eval_target(args, cfg)
    res = run_attack(ckpt.ensemble, subset.inputs, subset.labels, acfg, cfg["eval_seed"])
    out = Path(args.output_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, x_adv=res.x_adv, labels=subset.labels, success=res.success)
    print(f"robust accuracy {1.0 - res.success.mean():.4f} on {len(subset)} examples -> {out}")
    return EXIT_OK


def cmd_blackbox(args) -> int:
    if args.action == "eval":
        bb = ev.load_blackbox(args.bbset)
        acc = ev.blackbox_eval(load_checkpoint(args.ckpt).ensemble, bb)
        print(json.dumps({"blackbox": acc, "n": len(bb), "coverage": bb.coverage}, sort_keys=True))
        return EXIT_OK
    cfg = _config(args)
    train, test = harness.build_data(cfg)
    if args.sources:
        sources = [m for path in args.sources for m in load_checkpoint(path).ensemble.members]
    else:
        sources = harness.blackbox_sources(cfg, train)
    gen = harness.metric_attack(f"pgd-{cfg['blackbox_steps']}", cfg["delta"], test.domain_clamp)
    bb = ev.blackbox_generate(sources, harness.eval_subset(test, cfg["eval_size"]), gen,
                              max(cfg["blackbox_max_steps"], cfg["blackbox_steps"]), cfg["eval_seed"])
    ev.save_blackbox(bb, args.output_file)
    print(f"coverage {bb.coverage:.4f} ({len(bb)}/{bb.total}) -> {args.output_file}")
    return EXIT_OK


def cmd_report(args) -> int:
    result = harness.report(args.runs)
    print(json.dumps(result["last10"], sort_keys=True, indent=1))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    return EXIT_OK if gradsuite.main(args.seeds) else EXIT_FAIL


COMMANDS = {"train": cmd_train, "grid": cmd_grid, "eval": cmd_eval, "attack": cmd_attack,
            "blackbox": cmd_blackbox, "report": cmd_report, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, CheckpointError) as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_FILE


if __name__ == "__main__":
    sys.exit(main())

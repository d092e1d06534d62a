"""Command-line entry point: ``transferrisk <command> ...``.

Exit codes: 0 success, 1 bad input (validation or file format), 2 runtime
failure such as training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import segnet
from .dataio import PhantomSpec, generate_phantoms, load_dataset, save_dataset
from .errors import FormatError, ValidationError
from .matrix import SuiteSpec, export_maps, run_matrix
from .training import TrainConfig, compute_risk, evaluate, finetune, pretrain

log = logging.getLogger("transferrisk")

MODE_FLAGS = {"global": "global", "perloc": "per-location"}


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from exc


def _config(path, **overrides) -> TrainConfig:
    cfg = TrainConfig.from_dict(_read_json(path)) if path else TrainConfig()
    return cfg.replace(**overrides)


def cmd_gen_data(args) -> int:
    spec = PhantomSpec.from_dict(_read_json(args.spec))
    out = Path(args.out)
    for mod, ds in generate_phantoms(spec, args.seed).items():
        save_dataset(ds, out / mod)
        print(f"{out / mod}: {len(ds)} slices")
    return 0


def cmd_pretrain(args) -> int:
    ds = load_dataset(args.data)
    overrides = {"freeze_encoder": False}
    if args.seed is not None:
        overrides["seed"] = args.seed
    run = pretrain(ds, _config(args.config, **overrides))
    segnet.save_checkpoint(run.params, args.out)
    print(f"{args.out}: final loss {run.losses[-1]:.6f}")
    return 0


def cmd_riskmap(args) -> int:
    params = segnet.load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    tmap, risk = compute_risk(params, ds, MODE_FLAGS[args.mode], args.orientation, args.base)
    for p in export_maps(args.out, tmap, risk):
        print(p)
    s = risk.stats()
    print(f"risk mean {s['mean']:.4f} max {s['max']:.4f} min {s['min']:.4f}; leep mean {tmap.mean:.6f}")
    return 0


def cmd_finetune(args) -> int:
    params = segnet.load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    overrides = {"scheme": args.scheme}
    if args.mode is not None:
        overrides["mode"] = MODE_FLAGS[args.mode]
    if args.seed is not None:
        overrides["seed"] = args.seed
    run = finetune(params, ds, _config(args.config, **overrides))
    segnet.save_checkpoint(run.params, args.out)
    print(f"{args.out}: final loss {run.losses[-1]:.6f}")
    return 0


def cmd_eval(args) -> int:
    params = segnet.load_checkpoint(args.ckpt)
    rep = evaluate(params, load_dataset(args.data))
    text = json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.report:
        Path(args.report).write_text(text)
    print(text, end="")
    return 0


def cmd_matrix(args) -> int:
    suite = SuiteSpec.from_dict(_read_json(args.suite))
    result = run_matrix(suite, args.out)
    print(json.dumps(result.report["comparisons"], indent=2, sort_keys=True))
    failed = sum(c["status"] != "ok" for c in result.cells)
    if failed:
        print(f"{failed} of {len(result.cells)} cells failed; see report.json", file=sys.stderr)
    return 0


class _Parser(argparse.ArgumentParser):
    """Usage errors are bad input too: exit 1, keeping 2 for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="transferrisk", description="Risk-map weighted transfer fine-tuning for segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic registered phantoms")
    g.add_argument("--spec", required=True, help="phantom spec JSON")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True, help="output directory; one subdirectory per modality")
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("pretrain", help="train a source model")
    g.add_argument("--data", required=True)
    g.add_argument("--config", help="training config JSON")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True, help="checkpoint path (.rmtc)")
    g.set_defaults(func=cmd_pretrain)

    g = sub.add_parser("riskmap", help="compute and export the transfer risk map")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--mode", choices=sorted(MODE_FLAGS), default="global")
    g.add_argument("--orientation", choices=["hardness", "paper-eq"], default="hardness")
    g.add_argument("--base", type=float, default=10.0)
    g.add_argument("--out", required=True, help="output prefix")
    g.set_defaults(func=cmd_riskmap)

    g = sub.add_parser("finetune", help="fine-tune a source model on target data")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--scheme", choices=["vanilla", "class", "trsmap", "riskmap"], default="riskmap")
    g.add_argument("--mode", choices=sorted(MODE_FLAGS))
    g.add_argument("--config", help="training config JSON")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_finetune)

    g = sub.add_parser("eval", help="Dice report of a checkpoint on a dataset")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--report", help="write the JSON report here")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("matrix", help="run an experiment suite")
    g.add_argument("--suite", required=True, help="suite JSON")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_matrix)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``segreweight {gen,noise,train,eval,sweep}``.

Any RunConfig field can come from a JSON config file (``--config``) and be
overridden by a flag of the same name.  Exit codes: 0 success, 1 contract
violation, 2 I/O error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import typing
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import dataio, losses, noisegen, runner
from .errors import ContractError, NumericalError
from .runner import RunConfig

log = logging.getLogger("segreweight")

EXIT_OK, EXIT_CONTRACT, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # usage errors are contract violations, not I/O failures
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ContractError(f"{self.prog}: {message}")


def _optional_int(text: str):
    return None if text.lower() in ("none", "") else int(text)


def _flag_type(f):
    hint = typing.get_type_hints(RunConfig)[f.name]
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    base = args[0] if args else hint
    if base is int and args:
        return _optional_int
    return {int: int, float: float, str: str}.get(base, str)


def _add_run_flags(p):
    p.add_argument("--config", help="JSON file with RunConfig fields")
    for f in fields(RunConfig):
        p.add_argument(f"--{f.name}", dest=f.name, type=_flag_type(f), default=None,
                       help=f"(default {f.default!r})")


def _run_config(args) -> RunConfig:
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ContractError(f"config file {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ContractError("config file must hold a JSON object")
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            d[f.name] = v
    return RunConfig.from_dict(d).validate()


# -- subcommands -------------------------------------------------------------

def cmd_gen(args) -> int:
    if args.n < 1:
        raise ContractError(f"n must be >= 1, got {args.n}")
    samples = dataio.gen_synthetic(args.n, args.side, args.seed)
    dataio.save_corpus(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_noise(args) -> int:
    spec = noisegen.NoiseSpec.parse(args.noise)
    samples = dataio.load_corpus(args.corpus, args.side)
    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        noisy, poly = noisegen.noisy_annotation(s.clean_mask, spec, args.importance)
        dataio.save_mask(noisy, out / "masks" / f"{s.id}.pgm")
        if poly is not None:
            (out / "polygons").mkdir(exist_ok=True)
            noisegen.save_polygon(out / "polygons" / f"{s.id}.txt", poly)
        rows.append((s.id, float(losses.dice(noisy, s.clean_mask))))
    runner.write_csv(out / "dice.csv", ("id", "dice"), rows)
    (out / "noise.txt").write_text(f"{spec}\n")
    print(f"noise {spec}: {len(rows)} masks, mean Dice vs clean {np.mean([r[1] for r in rows]):.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if not cfg.out:
        raise ContractError("train needs --out (or 'out' in the config file)")
    res = runner.run_training(cfg, resume=args.resume)
    s = res.summary()
    val = s["val_dice_final"]
    print(f"{cfg.mode}: {s['iterations']} iterations, val Dice {val if val is None else round(val, 4)}, "
          f"test Dice {s['test_dice_mean'] if s['test_dice_mean'] is None else round(s['test_dice_mean'], 4)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    s = runner.evaluate_run(args.run, args.pool, args.masks, args.predictions, args.out_csv)
    if s["n"]:
        print(f"{s['pool']}: n={s['n']} mean Dice {s['mean']:.4f} median {s['median']:.4f}")
    else:
        print(f"{s['pool']}: empty pool")
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = _run_config(args)
    if not base.out:
        raise ContractError("sweep needs --out")
    k_values = [int(k) for k in args.k_values.split(",")]
    modes = args.modes.split(",")
    noises = args.noises.split(",") if args.noises else None
    _, rows = runner.run_sweep(base, k_values, args.seeds, modes, noises, base.out, args.workers)
    for r in rows:
        print(f"{r['noise']:>16} K={r['K']:<4} {r['mode']:<10} {r['mean_dice']:.4f} +- {r['sd_dice']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="segreweight", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=240)
    g.add_argument("--side", type=int, default=24)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen)

    n = sub.add_parser("noise", help="write noisy masks, polygons and Dice vs clean")
    n.add_argument("--corpus", required=True)
    n.add_argument("--noise", required=True, help="k_vertex:K, axis_aligned_4, maximal[:band] or none")
    n.add_argument("--out", required=True)
    n.add_argument("--side", type=int, default=None, help="resize to this side first")
    n.add_argument("--importance", default="angle_length", choices=sorted(noisegen.IMPORTANCE))
    n.set_defaults(fn=cmd_noise)

    t = sub.add_parser("train", help="train one run")
    _add_run_flags(t)
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint if present")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="per-image Dice of a run's checkpoint")
    e.add_argument("--run", required=True, help="run directory written by train")
    e.add_argument("--pool", default="test", choices=("test", "val", "noisy", "clean"))
    e.add_argument("--masks", default=None, help="directory of <id>.pgm masks to score against")
    e.add_argument("--predictions", default=None, help="write predicted masks here")
    e.add_argument("--out-csv", dest="out_csv", default=None)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="train+eval over K values, modes, noise kinds and seeds")
    _add_run_flags(s)
    s.add_argument("--k-values", dest="k_values", default=",".join(map(str, runner.DEFAULT_K_VALUES)))
    s.add_argument("--seeds", type=int, default=10, help="seeds 0..R-1")
    s.add_argument("--modes", default=",".join(runner.SWEEP_MODES))
    s.add_argument("--noises", default=None, help="comma list of noise specs (default: the config's)")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.fn(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``prepguard {synth,train,attack,defend,eval,psnr}``.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys

import numpy as np

from . import __version__
from . import attacks as A
from . import data as D
from . import evaluation as E
from . import model as M
from .defense import DefenseSpecError, apply_defense, parse_defense_list, parse_defense_spec

log = logging.getLogger("prepguard")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_data(source: str, seed: int, split: str = "eval", n: int | None = None) -> D.Dataset:
    """'synth' means the default synthetic split derived from ``seed``; anything else is a directory."""
    if source == "synth":
        train, held = D.synth_split(seed)
        ds = train if split == "train" else held
    else:
        ds = D.load_dataset(source)
    if n is not None and n < len(ds):
        ds = ds.subset(np.arange(n))
    return ds


def cmd_synth(args) -> None:
    ds = D.synth_dataset(args.n, args.classes, args.height, args.width, args.seed)
    D.save_dataset(ds, args.out)
    log.info("wrote %d images to %s", len(ds), args.out)


def cmd_train(args) -> None:
    ds = _load_data(args.data, args.seed, split="train")
    cfg = M.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                        momentum=args.momentum, seed=args.seed,
                        flip_augmentation=not args.no_flip_augmentation)
    params = M.train(ds.images, ds.labels, cfg, num_classes=ds.num_classes, log=log.info)
    M.save(params, args.out)
    log.info("training accuracy %.4f", M.accuracy(params, ds.images, ds.labels))
    if args.data == "synth":
        held = _load_data("synth", args.seed, split="eval")
        log.info("held-out accuracy %.4f", M.accuracy(params, held.images, held.labels))
    log.info("model %s written to %s", E.fingerprint(params), args.out)


def cmd_attack(args) -> None:
    params = M.load(args.model)
    ds = _load_data(args.data, args.seed)
    ds = D.Dataset(D.quantize8(ds.images), ds.labels, ds.num_classes, ds.descriptor)
    benign = E.select_benign(params, ds, args.n, args.seed)
    cfg = A.parse_attack_tag(A.PRESETS.get(args.attack, args.attack))
    sae = E.build_sae_set(params, benign, cfg, seed=args.seed, threads=args.threads)
    E.save_sae_set(sae, args.out)
    log.info("%s: %d/%d successful adversarial examples written to %s", cfg.name, len(sae), len(benign), args.out)


def cmd_defend(args) -> None:
    spec = parse_defense_spec(args.spec)
    names = sorted(f for f in os.listdir(args.inp) if f.lower().endswith(".png"))
    if not names:
        raise FileNotFoundError(f"no PNG files in {args.inp}")
    os.makedirs(args.out, exist_ok=True)
    for name in names:
        img = D.load_png(os.path.join(args.inp, name))
        D.save_png(os.path.join(args.out, name), apply_defense(spec, img))
    for extra in ("manifest.csv", "sae.json"):
        src = os.path.join(args.inp, extra)
        if os.path.isfile(src):
            shutil.copyfile(src, os.path.join(args.out, extra))
    log.info("defended %d images with %s", len(names), spec)


def cmd_eval(args) -> None:
    params = M.load(args.model)
    ds = _load_data(args.data, args.seed)
    attacks = A.parse_attack_list(args.attacks)
    defenses = parse_defense_list(args.defenses)
    report = E.run_matrix(params, ds, attacks, defenses, n=args.n, seed=args.seed,
                          threads=args.threads, log=log.info)
    with open(args.out, "w") as fh:
        fh.write(report.to_json())
    csv_path = args.csv or os.path.splitext(args.out)[0] + ".csv"
    with open(csv_path, "w") as fh:
        fh.write(report.to_csv())
    for cell in report.cells:
        acc = "-" if cell.accuracy is None else f"{100 * cell.accuracy:6.2f}%"
        log.info("%-28s %-20s n=%-4d top1=%s", cell.attack, cell.defense, cell.n, acc)
    log.info("report written to %s and %s", args.out, csv_path)


def cmd_psnr(args) -> None:
    ds = _load_data(args.data, args.seed, n=args.n)
    codecs = [c.strip() for c in args.codecs.split(",") if c.strip()]
    rows = E.psnr_report(ds.images, codecs, args.qf)
    text = E.psnr_csv(rows)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prepguard", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--seed", type=int, default=0, help="single source of all randomness")
        if data:
            sp.add_argument("--data", default="synth", help="'synth' or a directory with manifest.csv")

    threads_help = "worker threads (default: $PREPGUARD_THREADS or the number of cores)"

    sp = sub.add_parser("synth", help="write a synthetic dataset as PNG + manifest")
    common(sp, data=False)
    sp.add_argument("--n", type=int, default=2000)
    sp.add_argument("--classes", type=int, default=10)
    sp.add_argument("--height", type=int, default=32)
    sp.add_argument("--width", type=int, default=32)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train the classifier")
    common(sp)
    defaults = M.TrainConfig()
    sp.add_argument("--epochs", type=int, default=defaults.epochs)
    sp.add_argument("--batch-size", type=int, default=defaults.batch_size)
    sp.add_argument("--lr", type=float, default=defaults.learning_rate)
    sp.add_argument("--momentum", type=float, default=defaults.momentum)
    sp.add_argument("--no-flip-augmentation", action="store_true")
    sp.add_argument("--out", required=True, help="model file to write")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("attack", help="build a successful-adversarial-example set")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--attack", required=True, help='e.g. "ifgsm:eps=8/255,iters=10", "deepfool", "cw"')
    sp.add_argument("--n", type=int, default=200)
    sp.add_argument("--threads", type=int, default=None, help=threads_help)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("defend", help="apply a defense to every PNG in a directory")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--spec", required=True, help='e.g. "webp:70,fliplr"')
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_defend)

    sp = sub.add_parser("eval", help="accuracy matrix over attacks x defenses")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--attacks", default="ifgsm:eps=8/255,deepfool,cw")
    sp.add_argument("--defenses", default="none;jpeg:50;webp:70;fliplr;webp:70,fliplr",
                    help="semicolon-separated defense specs")
    sp.add_argument("--n", type=int, default=200)
    sp.add_argument("--threads", type=int, default=None, help=threads_help)
    sp.add_argument("--out", required=True, help="JSON report path")
    sp.add_argument("--csv", default=None, help="CSV path (default: next to the JSON report)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("psnr", help="PSNR of codec round-trips per quality factor")
    common(sp)
    sp.add_argument("--codecs", default="jpeg,webp")
    sp.add_argument("--qf", type=_int_list, default=[10, 20, 30, 40, 60, 80, 100])
    sp.add_argument("--n", type=int, default=50)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_psnr)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (A.AttackTagError, DefenseSpecError) as exc:
        print(f"prepguard: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"prepguard: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

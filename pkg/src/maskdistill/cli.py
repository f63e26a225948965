"""Command-line entry point: pretrain, extract, probe, knn, synth-data,
selftest."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from maskdistill.errors import MaskDistillError

USAGE_EXIT = 2
FAILURE_EXIT = 1


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    """Turn leftover ``--key value`` tokens into a config override mapping."""
    overrides: dict[str, str] = {}
    it = iter(pairs)
    for token in it:
        if not token.startswith("--"):
            raise SystemExit(f"unexpected argument {token!r}; overrides look like --key value")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            try:
                value = next(it)
            except StopIteration:
                raise SystemExit(f"override --{key} is missing a value") from None
        overrides[key] = value
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskdistill",
                                     description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("pretrain", help="run self-distillation pretraining")
    p.add_argument("--config", default=None, help="config file (or $CMID_CONFIG)")
    p.add_argument("--data", required=True, help="image-folder dataset root")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("extract", help="export frozen GAP features as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="feature CSV path")
    p.add_argument("--force", action="store_true",
                   help="accept a checkpoint with a mismatched config digest")

    p = sub.add_parser("probe", help="linear probe on exported features")
    p.add_argument("--features-train", required=True)
    p.add_argument("--features-test", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--report", default=None, help="write a report file")

    p = sub.add_parser("knn", help="cosine kNN on exported features")
    p.add_argument("--features-train", required=True)
    p.add_argument("--features-test", required=True)
    p.add_argument("-k", type=int, default=20)
    p.add_argument("--report", default=None)

    p = sub.add_parser("synth-data", help="generate the labeled synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--num-images", type=int, default=2000)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)

    sub.add_parser("selftest", help="fast invariant suite (oracles, closed "
                                    "forms, gradient checks)")
    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as e:
        return USAGE_EXIT if e.code not in (0, None) else 0

    try:
        if args.verb == "pretrain":
            from maskdistill import dataio, trainer
            from maskdistill.config import load_config, save_config
            cfg = load_config(args.config, _parse_overrides(extra))
            manifest = dataio.scan_folder(args.data)
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            save_config(cfg, out / "config.resolved.ini")
            ckpt = trainer.fit(cfg, manifest, out, resume=args.resume,
                               max_steps=args.max_steps, quiet=args.quiet)
            print(f"checkpoint written to {ckpt}")
            return 0

        if extra:
            print(f"unrecognized arguments: {' '.join(extra)}", file=sys.stderr)
            return USAGE_EXIT

        if args.verb == "extract":
            from maskdistill import dataio, evalharness
            manifest = dataio.scan_folder(args.data)
            table = evalharness.extract_features_from_checkpoint(
                args.ckpt, manifest, force=args.force)
            evalharness.write_feature_csv(table, args.out)
            print(f"wrote {len(table.ids)} feature rows to {args.out}")
            return 0

        if args.verb in ("probe", "knn"):
            from maskdistill import evalharness
            train = evalharness.read_feature_csv(args.features_train)
            test = evalharness.read_feature_csv(args.features_test)
            if args.verb == "probe":
                result = evalharness.linear_probe(train, test,
                                                  epochs=args.epochs, lr=args.lr)
            else:
                result = evalharness.knn_eval(train, test, k=args.k)
            print(result.summary())
            if args.report:
                evalharness.write_probe_report(result, args.report)
            return 0

        if args.verb == "synth-data":
            from maskdistill import dataio
            spec = dataio.SyntheticSpec(num_images=args.num_images,
                                        image_size=args.image_size,
                                        num_classes=args.num_classes,
                                        seed=args.seed)
            manifest = dataio.make_synthetic(spec, args.out)
            print(f"wrote {len(manifest)} images to {args.out}")
            return 0

        if args.verb == "selftest":
            from maskdistill.selftest import run_selftest
            return 0 if run_selftest() else FAILURE_EXIT

    except SystemExit as e:
        print(str(e), file=sys.stderr)
        return USAGE_EXIT
    except (MaskDistillError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return FAILURE_EXIT
    return USAGE_EXIT


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()

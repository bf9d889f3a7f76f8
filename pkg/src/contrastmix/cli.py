"""Command-line front end.

Subcommands: phantom, train, infer, eval, ablate.  Every command takes
--config (flat key = value file), optional --seed (overrides the config
seed) and --out; run directories echo the resolved config.  Exit code is
0 iff all outputs were written, otherwise a single-line error goes to
stderr.  CONTRASTMIX_THREADS caps internal (BLAS) parallelism and must
be honored before numpy loads, so heavy imports happen inside main().
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_cap() -> None:
    cap = os.environ.get("CONTRASTMIX_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contrastmix", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, out_required=True):
        sp.add_argument("--config", required=True, help="flat key = value config file")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", required=out_required, help="output directory")

    add_common(sub.add_parser("phantom", help="generate the paired phantom dataset"))
    sp = sub.add_parser("train", help="train one pipeline stage")
    add_common(sp)
    sp.add_argument(
        "--stage",
        required=True,
        choices=["coarse", "teacher", "student_contrastmix", "student_supervised_baseline"],
    )
    sp = sub.add_parser("infer", help="segment one volume with a trained checkpoint")
    add_common(sp, out_required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--volume", required=True)
    sp.add_argument("--prior", required=True, help="prior label map MVOL")
    sp = sub.add_parser("eval", help="Dice/MSD evaluation of prediction directories")
    add_common(sp)
    sp.add_argument("--pred", required=True, help="prediction directory (s<idx>_pred.mvol)")
    sp.add_argument("--pred-b", default=None, help="second method's predictions, adds Wilcoxon p")
    sp.add_argument("--truth", required=True, help="directory with s<idx>_truth.mvol")
    add_common(sub.add_parser("ablate", help="temperature / beta ablation grid"))
    return p


def main(argv=None) -> int:
    _apply_thread_cap()
    args = _build_parser().parse_args(argv)
    from pathlib import Path

    from . import runs
    from .config import load_config

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.command == "phantom":
            runs.run_phantom(cfg, args.out)
        elif args.command == "train":
            runs.run_train(cfg, args.stage, args.out)
        elif args.command == "infer":
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            runs.run_infer(cfg, args.checkpoint, args.volume, args.prior, out / "prediction.mvol")
            runs.echo_config(cfg, out)
        elif args.command == "eval":
            runs.run_eval(args.pred, args.truth, args.out, args.pred_b)
            runs.echo_config(cfg, Path(args.out))
        elif args.command == "ablate":
            runs.run_ablate(cfg, args.out)
    except Exception as e:  # single-line machine-parseable failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

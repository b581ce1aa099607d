"""Command-line entry point: ``micacl {gen-data,train,eval,gradcheck}``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .checks import CHECKS, TOLERANCE, run_checks
from .data import DatasetSpec, gen_dataset, read_dataset, write_dataset
from .errors import ConfigError, DegenerateEmbeddingError, FormatError, NonFiniteError, ShapeError
from .mccl import ClassStats
from .model import LOSS_MODES, RunConfig, load_params, read_checkpoint
from .trainer import evaluate, heldout_row, train, write_metrics_csv

USER_ERRORS = (ConfigError, FormatError, ShapeError, NonFiniteError, DegenerateEmbeddingError, OSError)


def cmd_gen_data(args) -> int:
    spec = DatasetSpec(num_classes=args.classes, instances=args.instances, feat_dim=args.feat_dim,
                       head_count=args.bags_head, imbalance_ratio=args.ratio,
                       key_instances=args.key_instances, noise_sigma=args.noise, seed=args.seed)
    dataset = gen_dataset(spec)
    write_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} bags to {args.out}; class counts {spec.class_counts()}")
    return 0


def cmd_train(args) -> int:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.loss:
        config.train.loss_mode = args.loss
    if args.log_form:
        config.model.log_form = True
    result = train(config, args.data, args.seed, out_dir=args.out_dir)
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs; final loss_all {last['loss_all']:.6f}")
    print(f"held-out WAR {result.heldout.war:.4f} UAR {result.heldout.uar:.4f} "
          f"({len(result.test_idx)} bags); artifacts in {args.out_dir}")
    return 0


def cmd_eval(args) -> int:
    config, arrays, meta = read_checkpoint(args.checkpoint)
    dataset = read_dataset(args.data)
    model = config.model
    if dataset.shape != (model.t, model.c_in) or dataset.num_classes != model.k:
        raise ConfigError(f"dataset (T, C_in, K) = {(*dataset.shape, dataset.num_classes)} does not match "
                          f"the checkpoint ({model.t}, {model.c_in}, {model.k})")
    params = load_params(model, arrays)
    stats = None
    if "n_c" in meta:
        stats = ClassStats(np.array([int(v) for v in meta["n_c"].split(",")]), model.tau0)
    report = evaluate(params, config, dataset, stats)
    last = {"epoch": int(meta.get("epochs_trained", 0)), "lr": float(meta.get("final_lr", "nan"))}
    write_metrics_csv(args.out, [heldout_row(report, last)])
    print(f"WAR {report.war:.4f} UAR {report.uar:.4f} on {len(dataset)} bags; wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_checks(args.module, args.eps)
    for name, err, secs in results:
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:<10} max_rel_err={err:.3e}  {secs:6.2f}s  {status}")
    worst = max(err for _, err, _ in results)
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    return 0 if worst < TOLERANCE else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="micacl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic long-tailed bag dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=7)
    p.add_argument("--bags-head", type=int, default=DatasetSpec.head_count)
    p.add_argument("--ratio", type=float, default=16.0)
    p.add_argument("--instances", type=int, default=16)
    p.add_argument("--feat-dim", type=int, default=12)
    p.add_argument("--key-instances", type=int, default=DatasetSpec.key_instances)
    p.add_argument("--noise", type=float, default=DatasetSpec.noise_sigma)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a .mibg dataset with a stratified held-out split")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="key=value file; defaults are used when omitted")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss", choices=LOSS_MODES)
    p.add_argument("--log-form", action="store_true", help="use -log(ratio) per anchor in the contrastive term")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a .mibg dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", choices=sorted(CHECKS), default="all")
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"micacl {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``fedadc run`` and ``fedadc partition-stats``."""
from __future__ import annotations

import argparse
import itertools
import logging
import os
import sys

from .config import load_config
from .data import partition
from .engine import _atomic_write, emit, load_data, run_experiment
from .errors import DivergedClientError, FedADCError

log = logging.getLogger("fedadc")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3

MOMENTUM_ALGORITHMS = ("slowmo", "fedadc-nesterov", "fedadc-heavyball", "fedadc-dm")


def _build_parser():
    parser = argparse.ArgumentParser(prog="fedadc", description="Federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment or a hyperparameter sweep")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--threads", type=int)
    run.add_argument("--sweep", action="store_true",
                     help="run the eta_grid x beta_grid cross-product")

    stats = sub.add_parser("partition-stats", help="print per-client class proportions")
    stats.add_argument("--config", required=True)

    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _sweep_points(cfg):
    betas = cfg.beta_grid if cfg.algorithm in MOMENTUM_ALGORITHMS else (None,)
    return list(itertools.product(cfg.eta_grid, betas))


def _cmd_run(args):
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.threads is not None:
        overrides["threads"] = args.threads
    cfg = cfg.replace(**overrides)

    if not args.sweep:
        record = run_experiment(cfg)
        emit(record, cfg.out_dir)
        print(f"final_acc {record.final_acc:.4f} -> {cfg.out_dir}")
        return EXIT_OK

    rows = ["eta,beta,final_acc,out_dir"]
    best = None
    for eta, beta in _sweep_points(cfg):
        name = f"eta={eta:g}" + ("" if beta is None else f"_beta={beta:g}")
        point = cfg.replace(eta=eta, out_dir=os.path.join(cfg.out_dir, name))
        if beta is not None:
            point = point.replace(beta_global=beta, beta_local=beta)
        record = run_experiment(point)
        emit(record, point.out_dir)
        rows.append(f"{eta:g},{'' if beta is None else format(beta, 'g')},"
                    f"{record.final_acc:.6g},{name}")
        print(f"{name}: final_acc {record.final_acc:.4f}")
        if best is None or record.final_acc > best[0]:
            best = (record.final_acc, name)
    _atomic_write(os.path.join(cfg.out_dir, "sweep.csv"), "\n".join(rows) + "\n")
    print(f"best {best[1]} final_acc {best[0]:.4f}")
    return EXIT_OK


def _cmd_partition_stats(args):
    cfg = load_config(args.config).resolved()
    train, _ = load_data(cfg)
    shards = partition(train, cfg.partition_spec())
    k = train.num_classes
    header = ["client", "n_train", "n_test"] + [f"gamma{i}" for i in range(k)] + \
             [f"rho{i}" for i in range(k)]
    print(" ".join(header))
    for s in shards:
        cells = [str(s.client_id), str(s.train_indices.size), str(s.test_indices.size)]
        cells += [f"{v:.3f}" for v in s.gamma] + [f"{v:.3f}" for v in s.rho]
        print(" ".join(cells))
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = _cmd_run if args.command == "run" else _cmd_partition_stats
    try:
        return handler(args)
    except DivergedClientError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FedADCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

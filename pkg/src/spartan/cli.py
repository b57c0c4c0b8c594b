"""Command-line harness: training runs, robustness sweeps, filter reports,
the risk calculator, and a checksum-verified data fetcher.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import sys
import urllib.request
from pathlib import Path

from .attacks import (AttackConfig, LabelOracle, SurrogateConfig, black_box_fgsm,
                      fgsm, train_surrogate)
from .config import (ConfigError, ExperimentConfig, config_from_values,
                     parse_config_text)
from .data import Dataset, IdxFormatError, load_idx_split, load_mnist, pixel_stats
from .layers import BuildConfig, build_network, filter_activation_report
from .risk import RiskInput, break_even_alpha, risk_delta
from .tensor import Rng
from .training import (CheckpointError, TrainConfig, TrainingDiverged,
                       history_csv, load_checkpoint, restore_network,
                       save_checkpoint, train)

MNIST_MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "http://yann.lecun.com/exdb/mnist/",
)
MNIST_RESOURCES = (
    ("train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
    ("train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432"),
    ("t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3"),
    ("t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"),
)

SWEEP_HEADER = ["model", "epsilon", "mode", "clean_acc", "adv_acc", "queries"]


def _experiment(args) -> ExperimentConfig:
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values = parse_config_text(path.read_text(encoding="utf-8"))
    overrides = {
        "candidates": args.candidate.split(",") if getattr(args, "candidate", None) else None,
        "epochs": getattr(args, "epochs", None),
        "batch": getattr(args, "batch", None),
        "lr": getattr(args, "lr", None),
        "sf": getattr(args, "sf", None),
        "seed": getattr(args, "seed", None),
        "epsilon_grid": ([float(e) for e in args.epsilon_grid.split(",")]
                         if getattr(args, "epsilon_grid", None) else None),
        "mode": getattr(args, "mode", None),
        "limit": getattr(args, "limit", None),
        "data_dir": getattr(args, "data_dir", None),
        "out": getattr(args, "out", None),
    }
    return config_from_values(values, overrides)


def _load_splits(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    return (load_idx_split(cfg.data_dir, "train"),
            load_idx_split(cfg.data_dir, "test"))


def _build_for(cfg: ExperimentConfig, candidate: str, train_set: Dataset):
    stats = pixel_stats(train_set) if candidate == "a" else None
    h, w = train_set.images.shape[2:]
    return build_network(candidate, BuildConfig(
        filters=cfg.filters,
        sigma=cfg.sigma,
        input_hw=(h, w),
        entropy_mode=cfg.entropy_mode,
        stats=stats,
        seed=cfg.seed,
    ))


def cmd_train(args) -> int:
    cfg = _experiment(args)
    train_set, test_set = _load_splits(cfg)
    if args.limit:
        train_set = train_set.subset(args.limit)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for candidate in cfg.candidates:
        net = _build_for(cfg, candidate, train_set)
        train_cfg = cfg.train  # carries the global seed

        def progress(epoch, last):
            loss = f"{last.loss.total:.4f}" if last else "n/a"
            print(f"[{candidate}] epoch {epoch + 1}/{train_cfg.epochs} loss {loss}")

        ckpt = train(net, train_set, train_cfg, test_set, progress=progress)
        ckpt_path = out_dir / f"{candidate}.ckpt"
        save_checkpoint(ckpt, ckpt_path)
        (out_dir / f"{candidate}_history.csv").write_text(history_csv(ckpt.history))
        final_acc = ckpt.epoch_accuracy[-1][1] if ckpt.epoch_accuracy else float("nan")
        print(f"[{candidate}] test accuracy {final_acc:.4f} -> {ckpt_path}")
    return 0


def _train_sweep_surrogate(cfg: ExperimentConfig, target, train_set: Dataset, key: int):
    oracle = LabelOracle.from_network(target)
    seeds = train_set.images[-cfg.surrogate.seed_size:]
    surrogate_cfg = SurrogateConfig(
        seed_size=cfg.surrogate.seed_size,
        rounds=cfg.surrogate.rounds,
        aug_step=cfg.surrogate.aug_step,
        train=TrainConfig(epochs=cfg.surrogate.epochs),
    )
    result = train_surrogate(oracle, surrogate_cfg, seeds, rng=Rng(cfg.seed).split(90 + key))
    return result.network, result.query_count


def cmd_sweep(args) -> int:
    cfg = _experiment(args)
    train_set, test_set = _load_splits(cfg)
    images = test_set.images[: cfg.limit] if cfg.limit else test_set.images
    labels = test_set.labels[: cfg.limit] if cfg.limit else test_set.labels
    out_dir = Path(cfg.out_dir)
    rows = []
    shared_surrogate = None
    shared_queries = None
    for index, candidate in enumerate(cfg.candidates):
        ckpt_path = out_dir / f"{candidate}.ckpt"
        if not ckpt_path.exists():
            raise FileNotFoundError(f"missing checkpoint {ckpt_path}; run train first")
        net = restore_network(load_checkpoint(ckpt_path))
        clean = float((net.predict(images) == labels).mean())
        surrogate = None
        queries = ""
        if cfg.mode == "blackbox":
            if cfg.surrogate.share and shared_surrogate is not None:
                surrogate, queries = shared_surrogate, shared_queries
            else:
                print(f"[{candidate}] training surrogate "
                      f"({cfg.surrogate.rounds} rounds, seed set {cfg.surrogate.seed_size})")
                surrogate, queries = _train_sweep_surrogate(cfg, net, train_set, index)
                if cfg.surrogate.share:
                    shared_surrogate, shared_queries = surrogate, queries
        for eps in cfg.epsilon_grid:
            attack_cfg = AttackConfig(epsilon=eps)
            if cfg.mode == "blackbox":
                batch = black_box_fgsm(net, surrogate, images, labels, attack_cfg)
                mode_name = "black-box-surrogate"
            else:
                batch = fgsm(net, images, labels, attack_cfg)
                mode_name = "white-box"
            rows.append((candidate, eps, mode_name, clean,
                         batch.adversarial_accuracy(), queries))
            print(f"[{candidate}] eps={eps:.2f} adv_acc={rows[-1][4]:.4f}")
    rows.sort(key=lambda r: (r[0], r[1]))
    out_dir.mkdir(parents=True, exist_ok=True)
    sweep_path = out_dir / "sweep.csv"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for model, eps, mode_name, clean, adv, queries in rows:
        writer.writerow([model, f"{eps:g}", mode_name,
                         f"{clean:.6f}", f"{adv:.6f}", queries])
    sweep_path.write_text(buf.getvalue())
    print(f"sweep written to {sweep_path}")
    return 0


def cmd_report(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    net = restore_network(ckpt)
    test_set = load_idx_split(args.data_dir, "test")
    images = test_set.images[: args.limit] if args.limit else test_set.images
    rows = filter_activation_report(net, images)
    print(f"{'layer':<10}{'filter':>7}{'rate':>12}{'cutoff':>12}  dead")
    for row in rows:
        cutoff = f"{row.cutoff:.4f}" if row.cutoff is not None else "n/a"
        print(f"{row.layer:<10}{row.index:>7}{row.rate:>12.6f}{cutoff:>12}  "
              f"{'yes' if row.dead else 'no'}")
    dead = sum(r.dead for r in rows)
    print(f"{dead} dead filter(s) of {len(rows)}")
    if args.out:
        out_path = Path(args.out)
        out_path.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "filter", "rate", "cutoff", "dead"])
        for row in rows:
            writer.writerow([row.layer, row.index, f"{row.rate:.6f}",
                             "" if row.cutoff is None else f"{row.cutoff:.6f}",
                             int(row.dead)])
        path = out_path / f"filter_report_{ckpt.candidate}.csv"
        path.write_text(buf.getvalue())
        print(f"report written to {path}")
    return 0


def cmd_risk(args) -> int:
    alpha_star = break_even_alpha(args.delta_err, args.delta_adv,
                                  args.impact_error, args.impact_theft)
    if isinstance(alpha_star, str):
        print(f"break-even alpha: {alpha_star}")
    else:
        print(f"break-even alpha: {alpha_star:.6e} (~1 in {1 / alpha_star:,.0f})")
    if args.alpha is not None:
        delta = risk_delta(RiskInput(args.delta_err, args.delta_adv,
                                     args.impact_error, args.impact_theft, args.alpha))
        print(f"risk delta at alpha={args.alpha:g}: {delta:+.6f} per abnormal sample")
    return 0


def cmd_fetch_data(args) -> int:
    out_dir = Path(args.data_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for filename, md5 in MNIST_RESOURCES:
        dest = out_dir / filename
        if dest.exists() and hashlib.md5(dest.read_bytes()).hexdigest() == md5:
            print(f"{filename}: already present, checksum ok")
            continue
        data = None
        for mirror in MNIST_MIRRORS:
            url = mirror + filename
            try:
                print(f"fetching {url}")
                with urllib.request.urlopen(url, timeout=60) as resp:
                    data = resp.read()
                break
            except OSError as exc:
                print(f"  failed: {exc}", file=sys.stderr)
        if data is None:
            raise RuntimeError(f"could not download {filename} from any mirror")
        digest = hashlib.md5(data).hexdigest()
        if digest != md5:
            raise RuntimeError(f"{filename}: checksum mismatch ({digest} != {md5})")
        dest.write_bytes(data)
        print(f"{filename}: ok ({len(data)} bytes)")
    load_mnist(out_dir)
    print(f"MNIST verified under {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spartan",
        description="Train data-starved CNNs and measure their adversarial robustness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_attack=False):
        p.add_argument("--candidate", help="comma-separated candidates (standard,a,b,c)")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--sf", type=float, help="filtering-loss scale")
        p.add_argument("--seed", type=int)
        p.add_argument("--limit", type=int, help="cap on samples used")
        p.add_argument("--out", help="output directory")
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--data-dir", dest="data_dir", help="directory with IDX files")
        if with_attack:
            p.add_argument("--epsilon-grid", dest="epsilon_grid",
                           help="comma-separated attack strengths")
            p.add_argument("--mode", choices=["whitebox", "blackbox"])

    p_train = sub.add_parser("train", help="train candidates and save checkpoints")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", help="attack checkpoints across an epsilon grid")
    common(p_sweep, with_attack=True)
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="per-filter activation rates and cutoffs")
    p_report.add_argument("--checkpoint", required=True)
    p_report.add_argument("--data-dir", dest="data_dir", default="data")
    p_report.add_argument("--limit", type=int)
    p_report.add_argument("--out", help="also write a CSV into this directory")
    p_report.set_defaults(func=cmd_report)

    p_risk = sub.add_parser("risk", help="break-even analysis of the accuracy/robustness trade")
    p_risk.add_argument("--delta-err", dest="delta_err", type=float, required=True)
    p_risk.add_argument("--delta-adv", dest="delta_adv", type=float, required=True)
    p_risk.add_argument("--impact-error", dest="impact_error", type=float, required=True)
    p_risk.add_argument("--impact-theft", dest="impact_theft", type=float, required=True)
    p_risk.add_argument("--alpha", type=float)
    p_risk.set_defaults(func=cmd_risk)

    p_fetch = sub.add_parser("fetch-data", help="download and verify the MNIST IDX files")
    p_fetch.add_argument("--data-dir", dest="data_dir", default="data")
    p_fetch.set_defaults(func=cmd_fetch_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, CheckpointError, IdxFormatError, FileNotFoundError,
            RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

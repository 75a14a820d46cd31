import argparse
import csv
import os
import sys
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv

from sgt import ResultStore
from sgt.baselines import Detector, make_detector
from sgt.channel import make_constellation
from sgt.complexity import fit_loglog_slope, report_rows, scaling_sweep
from sgt.config import BASELINES, ConfigError, ExperimentConfig, load_config
from sgt.models import BerRecord
from sgt.network import VARIANTS, CheckpointError, SgtConfig, SgtDetector, SgtModel, load_checkpoint
from sgt.trainer import TrainingAborted, ablate, evaluate_ber, train
from utils import ensure_dir, error, log

load_dotenv()

# exit codes
EXIT_OK = 0
EXIT_ABORTED = 1
EXIT_CONFIG = 2
EXIT_CHECK_FAILED = 3

DEFAULT_DIMS = "4x4,8x8,16x16,32x32"


def csv_header(cfg: Optional[ExperimentConfig], seed: int) -> List[str]:
    config_hash = cfg.config_hash() if cfg is not None else "none"
    return [f"config_hash={config_hash} seed={seed}"]


def open_store(cfg: Optional[ExperimentConfig], args: argparse.Namespace) -> ResultStore:
    db_file = args.db or (cfg.output.db if cfg is not None else "")
    return ResultStore(db_file=db_file)


def checkpoint_path(out_dir: str, variant: str) -> str:
    return os.path.join(out_dir, f"checkpoint-{variant}.npz")


def cmd_train(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    out_dir = ensure_dir(cfg.output.directory)
    variant = cfg.sgt.variant
    model, train_log = train(
        SgtModel(cfg.sgt),
        cfg.train,
        make_constellation(cfg.system.constellation),
        cfg.system.snr_definition,
        checkpoint_path(out_dir, variant),
    )
    train_log.to_csv(os.path.join(out_dir, "train_log.csv"), csv_header(cfg, cfg.train.seed))

    store = open_store(cfg, args)
    store.add_all(train_log.rows(variant))
    store.close()
    log(f"trained {variant}, final loss {train_log.final_loss():.5f}")
    return EXIT_OK


def load_trained(cfg: ExperimentConfig, path: str) -> SgtModel:
    model = load_checkpoint(path, cfg.system.n_t, cfg.system.n_r)
    if not model.trained:
        raise CheckpointError(f"{path} holds an untrained model")
    return model


def build_detectors(cfg: ExperimentConfig, checkpoints: Sequence[str]) -> List[Detector]:
    """baselines by name, learned detectors from --checkpoint files or <out>/checkpoint-<variant>.npz"""
    models: Dict[str, SgtModel] = {}
    for path in checkpoints:
        model = load_trained(cfg, path)
        models[model.config.variant] = model

    detectors: List[Detector] = []
    for name in cfg.ber.detectors:
        if name in BASELINES:
            detectors.append(make_detector(name, cfg.ber.oamp_iterations, cfg.ber.seed))
            continue
        variant = "full-sgt" if name == "sgt" else name
        if variant not in models:
            path = checkpoint_path(cfg.output.directory, variant)
            if not os.path.isfile(path):
                raise CheckpointError(f"no checkpoint for detector {name}, expected {path}")
            models[variant] = load_trained(cfg, path)
        detectors.append(SgtDetector(models[variant]))
    return detectors


def parse_ordering(expr: str) -> List[str]:
    names = [name.strip() for name in expr.split("<=")]
    if len(names) < 2 or not all(names):
        raise ConfigError(f"--assert-ordering: cannot parse {expr!r}, expected e.g. ml<=sgt<=lmmse")
    return names


def ordering_violations(records: Sequence[BerRecord], names: Sequence[str], min_snr: float) -> List[str]:
    """
    a <= b is violated at an SNR point only when the two confidence intervals
    separate the wrong way, i.e. ci_low(a) > ci_high(b)
    """
    by_key = {(r.detector, r.snr_db): r for r in records}
    violations = []
    for snr_db in sorted({r.snr_db for r in records}):
        if snr_db < min_snr:
            continue
        for a, b in zip(names, names[1:]):
            ra, rb = by_key.get((a, snr_db)), by_key.get((b, snr_db))
            if ra is None or rb is None:
                raise ConfigError(f"--assert-ordering: no result for {a if ra is None else b} at {snr_db:g} dB")
            if ra.ci_low > rb.ci_high:
                violations.append(f"{a} <= {b} violated at {snr_db:g} dB: {ra.ber:.3e} vs {rb.ber:.3e}")
    return violations


def cmd_ber(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    out_dir = ensure_dir(cfg.output.directory)
    names = parse_ordering(args.assert_ordering) if args.assert_ordering else []
    detectors = build_detectors(cfg, args.checkpoint)

    records: List[BerRecord] = []
    for detector in detectors:
        records += evaluate_ber(
            detector,
            cfg.ber.snr_grid,
            cfg.ber.trials,
            cfg.ber.seed,
            cfg.system.n_t,
            cfg.system.n_r,
            make_constellation(cfg.system.constellation),
            cfg.system.snr_definition,
            min_errors=cfg.ber.min_errors,
            max_trials=cfg.ber.max_trials or None,
            chunk_size=cfg.ber.chunk_size,
            config=cfg.config_hash(),
        )

    store = open_store(cfg, args)
    store.add_all(records)
    store.export_csv("ber", os.path.join(out_dir, "ber.csv"), csv_header(cfg, cfg.ber.seed))
    store.close()

    violations = ordering_violations(records, names, args.assert_min_snr) if names else []
    for violation in violations:
        error(violation)
    return EXIT_CHECK_FAILED if violations else EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    out_dir = ensure_dir(cfg.output.directory)
    header = csv_header(cfg, cfg.train.seed)
    results = ablate(
        cfg.sgt,
        cfg.train,
        snrs=cfg.ber.snr_grid,
        trials=cfg.ber.trials,
        seed=cfg.ber.seed,
        constellation=make_constellation(cfg.system.constellation),
        snr_definition=cfg.system.snr_definition,
        checkpoint_dir=out_dir,
        config=cfg.config_hash(),
    )

    snrs = cfg.ber.snr_grid
    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as f:
        for line in header:
            f.write(f"# {line}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["variant", "final_loss", "steps_to_reference"] + [f"ber@{snr:g}" for snr in snrs])
        for r in results:
            bers = {rec.snr_db: rec.ber for rec in r.ber}
            steps = "" if r.steps_to_reference is None else r.steps_to_reference
            cells = [repr(bers[snr]) if snr in bers else "" for snr in snrs]
            writer.writerow([r.variant, repr(r.final_loss), steps] + cells)

    store = open_store(cfg, args)
    for r in results:
        r.log.to_csv(os.path.join(out_dir, f"train_log-{r.variant}.csv"), header)
        store.add_all(r.log.rows(r.variant))
        store.add_all(r.ber)
    store.close()
    return EXIT_OK


def parse_dims(text: str) -> List[Tuple[int, int]]:
    dims = []
    for item in text.split(","):
        try:
            n_t, n_r = (int(v) for v in item.lower().split("x"))
        except ValueError as e:
            raise ConfigError(f"--dims: cannot parse {item!r}, expected e.g. 8x8") from e
        dims.append((n_t, n_r))
    return dims


def cmd_complexity(cfg: Optional[ExperimentConfig], args: argparse.Namespace) -> int:
    if cfg is not None:
        base, out_dir = cfg.sgt, cfg.output.directory
    else:
        base, out_dir = SgtConfig(n_t=4, n_r=4, variant=args.variant or "full-sgt"), args.out or "out"
    out_dir = ensure_dir(out_dir)
    dims = parse_dims(args.dims)

    sweep = scaling_sweep(base, dims)
    store = open_store(cfg, args)
    for counted, symbolic in sweep:
        store.add_all(report_rows(counted, symbolic))
    store.export_csv("complexity", os.path.join(out_dir, "complexity.csv"), csv_header(cfg, base.init_seed))
    store.close()

    mismatched = [(c.n_t, c.n_r) for c, s in sweep if c.macs != s.macs]
    for n_t, n_r in mismatched:
        error(f"instrumented and closed-form MAC counts differ for {n_t}x{n_r}")

    square = [(c, s) for c, s in sweep if c.n_t == c.n_r]
    if len(square) >= 2:
        ns = [c.n_t for c, _ in square]
        log(f"log-log slope vs N: attention scores {fit_loglog_slope(ns, [c.attention_scores for c, _ in square]):.3f}")
        log(f"log-log slope vs N: projections {fit_loglog_slope(ns, [c.kind('projection') for c, _ in square]):.3f}")
        log(f"log-log slope vs N: total {fit_loglog_slope(ns, [c.total for c, _ in square]):.3f}")
    return EXIT_CHECK_FAILED if mismatched else EXIT_OK


COMMANDS: Dict[str, Callable[..., int]] = {
    "train": cmd_train,
    "ber": cmd_ber,
    "ablate": cmd_ablate,
    "complexity": cmd_complexity,
}


def parse_args(args: List[str]) -> argparse.Namespace:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        dest="config",
        default="",
        help="TOML experiment file, required except for complexity",
    )
    common.add_argument(
        "--seed",
        dest="seed",
        type=int,
        default=None,
        help="Override every seed in the config",
    )
    common.add_argument(
        "--out",
        dest="out",
        default="",
        help="Override the output directory",
    )
    common.add_argument(
        "--variant",
        dest="variant",
        default=None,
        choices=VARIANTS,
        help="Override the network variant",
    )
    common.add_argument(
        "--db",
        dest="db",
        default="",
        help="sqlite file to load results from and save them to",
    )

    parser = argparse.ArgumentParser(description="Soft Graph Transformer MIMO detection bench")
    subparsers = parser.add_subparsers(dest="command", required=True)
    subparsers.add_parser("train", parents=[common], help="Train a network and write its checkpoint")

    ber = subparsers.add_parser("ber", parents=[common], help="Monte-Carlo BER of the configured detectors")
    ber.add_argument(
        "--checkpoint",
        dest="checkpoint",
        action="append",
        default=[],
        help="Network checkpoint to evaluate, can be repeated",
    )
    ber.add_argument(
        "--assert-ordering",
        dest="assert_ordering",
        default="",
        help="Fail unless BERs are ordered, e.g. ml<=sgt<=lmmse",
    )
    ber.add_argument(
        "--assert-min-snr",
        dest="assert_min_snr",
        type=float,
        default=10.0,
        help="Lowest SNR in dB where --assert-ordering is checked",
    )

    subparsers.add_parser("ablate", parents=[common], help="Train and compare all network variants")

    complexity = subparsers.add_parser("complexity", parents=[common], help="MAC counts over system sizes")
    complexity.add_argument(
        "--dims",
        dest="dims",
        default=DEFAULT_DIMS,
        help="Comma separated N_txN_r list",
    )

    ns = parser.parse_args(args)

    if ns.command != "complexity" and not ns.config:
        parser.error(f"--config is required for {ns.command}")

    if ns.config:
        ns.config = os.path.abspath(os.path.expanduser(ns.config))

    if ns.out:
        ns.out = os.path.abspath(os.path.expanduser(ns.out))

    if ns.db:
        ns.db = os.path.abspath(os.path.expanduser(ns.db))

    return ns


def main(argv: List[str]) -> int:
    args = parse_args(argv)
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.out, args.variant) if args.config else None
        return COMMANDS[args.command](cfg, args)
    except TrainingAborted as e:
        error(str(e))
        if e.checkpoint:
            error(f"last good parameters saved to {e.checkpoint}")
        return EXIT_ABORTED
    except (ConfigError, CheckpointError) as e:
        error(str(e))
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main(sys.argv[1:]))

"""
Survival prediction from bags of instance features with heterogeneity-aware optimal transport

This script is the command-line surface of the project. It solves standalone transport problems,
generates synthetic long-tailed datasets, trains and evaluates the transport MIL survival model with
cross-validation, exports per-instance attention and runs the acceptance suites.

Usage:
    python -m src.main solve COST_CSV [--rho R] [--lambda L] [--epsilon E] [--tol T]
    python -m src.main synth [--config PATH] [--out DIR] [--seed S]
    python -m src.main train [--config PATH] [--fold N] [--ramp SHAPE] [--global-constraint C] [--max-patches N]
    python -m src.main eval [--config PATH] [--fold N]
    python -m src.main attention CHECKPOINT BAG_FILE [--out FILE]
    python -m src.main verify [--instances N] [--batches N]
    python -m src.main accept [--config PATH] [--repeat]

Common arguments:
    --config PATH: flat key = value configuration file; flags override its values
    --seed U64: seed for generation, initialisation and shuffling
    --debug: log detailed information to otmil_debug.log

Exit codes:
    0 success, 1 usage, parse, configuration or missing-file errors, 2 numerical failures
    (non-convergence, non-finite loss or gradient, training epochs without events)

Example:
    python -m src.main synth --out data --seed 7
    python -m src.main train --config run.cfg --fold 0 --debug
"""

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from src import exports
from src.acceptance import AcceptanceReport, FoldAcceptance, component_attention, hazard_ceiling, \
    summary_lines, write_acceptance
from src.config import ConfigError, RunConfig
from src.data_io import BagFormatError, FoldError, ManifestError, load_bags, read_bag, read_manifest, \
    split_folds, write_manifest
from src.mil_model import NonFiniteGradientError, attention_scores, bag_rng, forward, load_checkpoint, \
    save_checkpoint
from src.ot_oracle import OracleDivergenceError
from src.ot_core import TransportError, build_augmented, entropic_objective, marginal_residuals, \
    scaling_solve
from src.survival_stats import Cohort, NoComparablePairsError, ZeroVarianceError, c_index, km_curve, \
    log_rank_test, stratify_by_median
from src.synth import read_ground_truth, read_instance_components, synth_dataset
from src.trainer import TrainConfig, TrainingError, config_record, predict_risks, train
from src.verification import gradient_check_suite, oracle_agreement_suite

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2

FLAG_KEYS = {
    "seed": "seed",
    "rho": "rho0",
    "kl_weight": "kl_weight",
    "epsilon": "epsilon",
    "tol": "tol",
    "out": "out_dir",
    "fold": "fold",
    "ramp": "ramp_shape",
    "global_constraint": "global_constraint",
    "max_patches": "max_patches",
}


class UsageError(Exception):
    """Command-line usage problem; reported with exit code 1."""


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def setup_logging(debug):
    """
    Set up logging configuration based on the debug mode.

    Args:
        debug (bool): Whether to enable debug mode.

    Returns:
        logging.Logger: Configured logger object.
    """
    level = logging.DEBUG if debug else logging.INFO
    logging.basicConfig(level=level,
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
                        filename='otmil_debug.log' if debug else None,
                        force=True)
    return logging.getLogger(__name__)


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument('--config', help='Flat key = value configuration file')
    common.add_argument('--seed', type=int, help='Seed for generation, initialisation and shuffling')
    common.add_argument('--rho', type=float, help='Mass ratio (solve) or initial mass ratio rho0 (train)')
    common.add_argument('--lambda', dest='kl_weight', type=float, help='KL weight of the token marginal')
    common.add_argument('--epsilon', type=float, help='Entropic regularisation')
    common.add_argument('--tol', type=float, help='Scaling stopping tolerance')
    common.add_argument('--out', help='Output directory (or file for attention)')
    common.add_argument('--fold', type=int, help='Run a single cross-validation fold')
    common.add_argument('--ramp', choices=['sigmoid', 'linear', 'fixed'], help='Mass-ratio schedule shape')
    common.add_argument('--global-constraint', choices=['kl', 'equality'], help='Token marginal constraint')
    common.add_argument('--max-patches', type=int, help='Subsample bags larger than this')
    common.add_argument('--debug', action='store_true',
                        help='Enable debug mode and log detailed information to a file')

    parser = ArgumentParser(description="Survival prediction with heterogeneity-aware optimal transport",
                            formatter_class=argparse.RawTextHelpFormatter)
    commands = parser.add_subparsers(dest='command', required=True, parser_class=ArgumentParser)

    solve = commands.add_parser('solve', parents=[common], help='Solve one transport problem from a cost CSV')
    solve.add_argument('cost_csv', help='Comma-separated N x K cost matrix, no header')
    commands.add_parser('synth', parents=[common], help='Generate a synthetic dataset')
    commands.add_parser('train', parents=[common], help='Train one model per fold')
    commands.add_parser('eval', parents=[common], help='Evaluate trained checkpoints on held-out folds')
    attention = commands.add_parser('attention', parents=[common], help='Export per-instance attention')
    attention.add_argument('checkpoint', help='Checkpoint written by train')
    attention.add_argument('bag', help='Bag file')
    verify = commands.add_parser('verify', parents=[common], help='Run the oracle and gradient suites')
    verify.add_argument('--instances', type=int, default=50, help='Oracle-agreement instances (default: 50)')
    verify.add_argument('--batches', type=int, default=10, help='Gradient-check batches (default: 10)')
    accept = commands.add_parser('accept', parents=[common],
                                 help='Generate, train, evaluate and check the synthetic acceptance targets')
    accept.add_argument('--repeat', action='store_true',
                        help='Train and evaluate the first fold again and compare the files byte for byte')
    return parser


def run_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {key: getattr(args, flag) for flag, key in FLAG_KEYS.items()}
    return config.merged(overrides)


def parse_cost_csv(path) -> np.ndarray:
    """
    Read a cost matrix; errors name the 1-based row and column of the bad cell.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"cost file {path} does not exist")
    rows = []
    for r, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        row = []
        for c, cell in enumerate(line.split(","), start=1):
            try:
                value = float(cell)
            except ValueError:
                raise ConfigError(f"{path}: row {r}, column {c}: cannot parse {cell.strip()!r} as a number")
            if not np.isfinite(value):
                raise ConfigError(f"{path}: row {r}, column {c}: non-finite value {cell.strip()!r}")
            row.append(value)
        if rows and len(row) != len(rows[0]):
            raise ConfigError(f"{path}: row {r} has {len(row)} columns, expected {len(rows[0])}")
        rows.append(row)
    if not rows:
        raise ConfigError(f"{path}: empty cost matrix")
    return np.asarray(rows, dtype=np.float64)


def cmd_solve(args, config: RunConfig, logger) -> int:
    cost = parse_cost_csv(args.cost_csv)
    solver_cfg = config.standalone_solver()
    rho = args.rho if args.rho is not None else 1.0
    problem = solver_cfg.problem(cost, rho)
    aug = build_augmented(problem)
    plan = scaling_solve(aug, problem.epsilon, tol=solver_cfg.tol, max_iter=solver_cfg.max_iter,
                         log_domain=solver_cfg.log_domain)
    row_residual, mass_residual = marginal_residuals(plan)
    out = exports.csv_text(("row", "column", "mass"), exports.plan_rows(plan))
    out += f"# iterations={plan.iterations}\n"
    out += f"# sink_mass={exports.format_value(float(plan.sink_mass.sum()))}\n"
    out += f"# row_residual={exports.format_value(row_residual)}\n"
    out += f"# mass_residual={exports.format_value(mass_residual)}\n"
    out += f"# objective={exports.format_value(entropic_objective(plan, aug, problem.epsilon))}\n"
    sys.stdout.write(out)
    if not plan.converged:
        print(f"numerical error: scaling did not converge in {plan.iterations} sweeps "
              f"(row residual {plan.residual:.3e})", file=sys.stderr)
        return EXIT_NUMERICAL
    logger.info(f"solved {cost.shape[0]}x{cost.shape[1]} problem in {plan.iterations} sweeps")
    return EXIT_OK


def write_dataset(synth_cfg, data_dir: Path, n_folds: int, logger) -> list:
    synth_dataset(synth_cfg, data_dir)
    manifest = data_dir / "manifest.tsv"
    records = split_folds(read_manifest(manifest), n_folds, synth_cfg.seed)
    write_manifest(records, manifest)
    logger.info(f"dataset with {len(records)} bags and {n_folds} folds written to {data_dir}")
    return records


def cmd_synth(args, config: RunConfig, logger) -> int:
    settings = config.run_settings()
    out_dir = Path(args.out) if args.out else Path(settings.data_dir)
    write_dataset(config.synth_config(), out_dir, settings.n_folds, logger)
    return EXIT_OK


def _folds(records, settings) -> list:
    if any(record.fold is None for record in records):
        raise ManifestError("manifest has bags without a fold; run synth or assign folds first")
    available = sorted({record.fold for record in records})
    if settings.fold is not None:
        if settings.fold not in available:
            raise ConfigError(f"fold {settings.fold} not present; folds are {available}")
        return [settings.fold]
    return available


def train_folds(cfg: TrainConfig, records, bags, folds, out_dir: Path, logger) -> None:
    for fold in folds:
        train_bags = [bag for bag, record in zip(bags, records) if record.fold != fold]
        val_bags = [bag for bag, record in zip(bags, records) if record.fold == fold]
        logger.info(f"fold {fold}: training on {len(train_bags)} bags, validating on {len(val_bags)}")
        result = train(train_bags, cfg, val_bags=val_bags)
        fold_dir = out_dir / f"fold{fold}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(fold_dir / "model.ckpt", result.model, config_record(cfg), seed=cfg.seed,
                        epochs=len(result.history), fold=fold)
        exports.write_history(fold_dir / "history.csv", result.history)


def cmd_train(args, config: RunConfig, logger) -> int:
    settings = config.run_settings()
    manifest = Path(settings.data_dir) / "manifest.tsv"
    records = read_manifest(manifest)
    bags = load_bags(manifest, records)
    train_folds(config.train_config(), records, bags, _folds(records, settings), Path(settings.out_dir), logger)
    return EXIT_OK


def evaluate_fold(risks: np.ndarray, bags: list, fold: int, fold_dir: Path, logger) -> dict:
    cohort = Cohort(risks=risks, times=[bag.time for bag in bags], events=[bag.event for bag in bags],
                    ids=[bag.bag_id for bag in bags])
    row = {"fold": fold, "n_bags": len(cohort), "c_index": float("nan"), "chi_square": float("nan"),
           "p_value": float("nan"), "n_high": 0, "n_low": len(cohort)}
    try:
        row["c_index"] = c_index(cohort)
    except NoComparablePairsError as exc:
        logger.warning(f"fold {fold}: {exc}")
    high, low = stratify_by_median(cohort)
    row["n_high"], row["n_low"] = len(high), len(low)
    for name, group in (("high", high), ("low", low)):
        if len(group):
            exports.write_km_curve(fold_dir / f"km_{name}.csv", km_curve(group.times, group.events))
    if len(high) and len(low):
        try:
            row["chi_square"], row["p_value"] = log_rank_test(high, low)
        except ZeroVarianceError as exc:
            logger.warning(f"fold {fold}: {exc}")
    logger.info(f"fold {fold}: C-index={row['c_index']:.4f} log-rank p={row['p_value']:.4g}")
    return row


def load_fold_model(out_dir: Path, fold: int) -> tuple:
    checkpoint = out_dir / f"fold{fold}" / "model.ckpt"
    if not checkpoint.is_file():
        raise FileNotFoundError(f"checkpoint {checkpoint} does not exist; run train first")
    model, meta = load_checkpoint(checkpoint)
    return model, TrainConfig(**meta["config"])


def evaluate_folds(records, bags, folds, out_dir: Path, logger) -> list:
    rows = []
    for fold in folds:
        model, cfg = load_fold_model(out_dir, fold)
        held_out = [bag for bag, record in zip(bags, records) if record.fold == fold]
        rows.append(evaluate_fold(predict_risks(model, held_out, cfg), held_out, fold, out_dir / f"fold{fold}",
                                  logger))
    exports.write_metrics(out_dir / "metrics.csv", rows)
    return rows


def cmd_eval(args, config: RunConfig, logger) -> int:
    settings = config.run_settings()
    manifest = Path(settings.data_dir) / "manifest.tsv"
    records = read_manifest(manifest)
    bags = load_bags(manifest, records)
    evaluate_folds(records, bags, _folds(records, settings), Path(settings.out_dir), logger)
    return EXIT_OK


def cmd_attention(args, config: RunConfig, logger) -> int:
    for path in (args.checkpoint, args.bag):
        if not Path(path).is_file():
            raise FileNotFoundError(f"{path} does not exist")
    model, meta = load_checkpoint(args.checkpoint)
    cfg = TrainConfig(**meta["config"])
    bag = read_bag(args.bag)
    rho = cfg.schedule(1).final_rho
    result = forward(bag, model, rho, cfg.solver_config(), max_patches=cfg.max_patches,
                     selection=cfg.selection, rng=bag_rng(cfg.seed, bag.bag_id))
    scores = attention_scores(result.plan, model)
    text = exports.csv_text(("instance_id", "attention"), exports.attention_rows(result.instance_ids, scores))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    logger.info(f"attention for {len(scores)} instances of {bag.bag_id} (rho={rho})")
    return EXIT_OK


def cmd_verify(args, config: RunConfig, logger) -> int:
    seed = args.seed if args.seed is not None else 0
    suites = [oracle_agreement_suite(n_instances=args.instances, seed=seed),
              gradient_check_suite(n_batches=args.batches, seed=seed)]
    for suite in suites:
        status = "PASS" if suite.passed else "FAIL"
        print(f"{suite.name}: {status} ({len(suite.cases) - suite.n_failed}/{len(suite.cases)} cases, "
              f"{suite.elapsed:.1f}s)")
        for case in suite.cases:
            if not case.passed:
                print(f"  case {case.index}: {case.detail}")
    return EXIT_OK if all(suite.passed for suite in suites) else EXIT_USAGE


def _same_run(out_dir: Path, repeat_dir: Path, fold: int, row: dict, repeat_row: dict) -> bool:
    for name in ("history.csv", "model.ckpt"):
        if (out_dir / f"fold{fold}" / name).read_bytes() != (repeat_dir / f"fold{fold}" / name).read_bytes():
            return False
    return all(exports.format_value(row[key]) == exports.format_value(repeat_row[key]) for key in row)


def cmd_accept(args, config: RunConfig, logger) -> int:
    settings = config.run_settings()
    synth_cfg = config.synth_config()
    cfg = config.train_config()
    data_dir, out_dir = Path(settings.data_dir), Path(settings.out_dir)
    start = time.perf_counter()

    records = write_dataset(synth_cfg, data_dir, settings.n_folds, logger)
    bags = load_bags(data_dir / "manifest.tsv", records)
    folds = _folds(records, settings)
    train_folds(cfg, records, bags, folds, out_dir, logger)
    rows = evaluate_folds(records, bags, folds, out_dir, logger)

    hazards = read_ground_truth(data_dir)
    components = read_instance_components(data_dir)
    report = AcceptanceReport()
    for fold, row in zip(folds, rows):
        model, fold_cfg = load_fold_model(out_dir, fold)
        held_out = [bag for bag, record in zip(bags, records) if record.fold == fold]
        prognostic_sum, prognostic_count, background_sum, background_count = component_attention(
            model, held_out, components, fold_cfg, synth_cfg.prognostic_index)
        report.folds.append(FoldAcceptance(
            fold=fold, n_bags=len(held_out), ceiling=hazard_ceiling(held_out, hazards), c_index=row["c_index"],
            p_value=row["p_value"], prognostic_sum=prognostic_sum, prognostic_count=prognostic_count,
            background_sum=background_sum, background_count=background_count))

    if args.repeat:
        repeat_dir = out_dir / "repeat"
        train_folds(cfg, records, bags, folds[:1], repeat_dir, logger)
        repeat_rows = evaluate_folds(records, bags, folds[:1], repeat_dir, logger)
        report.deterministic = _same_run(out_dir, repeat_dir, folds[0], rows[0], repeat_rows[0])

    write_acceptance(out_dir / "acceptance.csv", report)
    for line in summary_lines(report):
        print(line)
    logger.info(f"acceptance run finished in {time.perf_counter() - start:.1f}s")
    return EXIT_OK if report.passed else EXIT_USAGE


COMMANDS = {
    "solve": cmd_solve,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "attention": cmd_attention,
    "verify": cmd_verify,
    "accept": cmd_accept,
}


def main(argv=None) -> int:
    """
    The main function of the command-line program.

    Parses the arguments, merges them over the configuration file and dispatches to the command.
    Errors are reported as a single line on stderr and mapped to the exit-code contract.
    """
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE

    logger = setup_logging(args.debug)
    try:
        config = run_config(args)
        logger.info(f"starting {args.command}")
        code = COMMANDS[args.command](args, config, logger)
        logger.info(f"finished {args.command} with exit code {code}")
        return code
    except (TransportError, TrainingError, NonFiniteGradientError, OracleDivergenceError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ManifestError, BagFormatError, FoldError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("\nProgram interrupted by user. Exiting...", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""
Command-line entry point.

    python -m gradleak attack    --config cfg.json [--out runs] [--seed 3] [--jobs 4]
    python -m gradleak fedsim    --config cfg.json     # FedAvg protocol sweep
    python -m gradleak bench     [--config cfg.json]   # trained/untrained x two attack pairings
    python -m gradleak ablation  [--config cfg.json]   # optimizer x objective x TV on/off
    python -m gradleak arch      [--config cfg.json]   # width, depth and padding sweep
    python -m gradleak labelflip [--config cfg.json]   # trained model with and without a head-row swap
    python -m gradleak analytic  [--seed 0]            # closed-form inversion demos
    python -m gradleak gradcheck [--seed 0]            # finite-difference suite

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

import argparse
import logging
import sys
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from gradleak.analytic import head_gradient, reconstruct_fc_chain, reconstruct_head_input, recover_label
from gradleak.attack import gradient_objective
from gradleak.autodiff import FdReport, Tensor, fd_check
from gradleak.config import LOG_LEVEL, AttackConfig
from gradleak.errors import ConfigError, NumericalError
from gradleak.experiment import (
    ExperimentConfig,
    ReportRow,
    ablation_configs,
    aggregates,
    architecture_configs,
    bench_configs,
    desk_config,
    fedsim_configs,
    flip_configs,
    load_config,
    run_experiment,
)
from gradleak.fedsim import GradObservation
from gradleak.netzoo import (
    ModelSpec,
    batch_loss,
    build_model,
    forward,
    param_gradients,
    params_from_vector,
    smoke_specs,
)

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

FD_TOL = 1e-5
DOUBLE_BACKWARD_TOL = 1e-4


def _banner(title: str) -> None:
    print("=" * 80)
    print(title)
    print("=" * 80)


def _print_rows(rows: Sequence[ReportRow]) -> None:
    print(f"{'seed':>6} {'group':>6} {'labels':>14} {'psnr_mean':>10} {'psnr_max':>10} {'objective':>12} {'time':>8}")
    for r in rows:
        labels = " ".join(map(str, r.labels))
        print(f"{r.seed:>6} {r.group:>6} {labels:>14} {r.psnr_mean:>10.2f} {r.psnr_max:>10.2f} "
              f"{r.final_objective:>12.4e} {r.runtime_s:>7.1f}s")
    stats = aggregates(rows)
    print(f"PSNR mean {stats['mean']['psnr_mean']:.2f} +- {stats['std']['psnr_mean']:.2f} dB, "
          f"median {float(np.median([r.psnr_mean for r in rows])):.2f} dB")


def _experiment_config(args: argparse.Namespace, default_name: str) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else desk_config(default_name)
    update = {}
    if args.out:
        update["output_dir"] = args.out
    if args.seed is not None:
        update["seeds"] = [args.seed]
    if args.jobs is not None:
        update["jobs"] = args.jobs
    if not update:
        return cfg
    return ExperimentConfig.model_validate({**cfg.model_dump(), **update})


def cmd_attack(args: argparse.Namespace) -> int:
    cfg = _experiment_config(args, "attack")
    _banner(f"Attack: {cfg.name} ({cfg.attack.objective} + {cfg.attack.optimizer})")
    rows = run_experiment(cfg, progress=True)
    _print_rows(rows)
    return 0


def cmd_fedsim(args: argparse.Namespace) -> int:
    base = _experiment_config(args, "fedsim")
    for cfg in fedsim_configs(base):
        fc = cfg.fed
        _banner(f"FedAvg: n={fc.n} E={fc.epochs} B={fc.batch_size} lr={fc.lr:g} "
                f"({fc.total_steps} local steps)")
        _print_rows(run_experiment(cfg, progress=True))
    return 0


def _run_suite(configs: Sequence[ExperimentConfig]) -> int:
    summary: List[Tuple[str, float, float]] = []
    for cfg in configs:
        _banner(cfg.name)
        rows = run_experiment(cfg, progress=True)
        _print_rows(rows)
        summary.append((cfg.name, float(np.median([r.psnr_mean for r in rows])),
                        float(np.median([r.grad_norm for r in rows]))))
    _banner("Median PSNR and observed gradient norm per setting")
    for name, value, norm in summary:
        print(f"{name:<60} {value:>8.2f} dB  |g| {norm:.3e}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    return _run_suite(bench_configs(_experiment_config(args, "bench")))


def cmd_ablation(args: argparse.Namespace) -> int:
    return _run_suite(ablation_configs(_experiment_config(args, "ablation")))


def cmd_arch(args: argparse.Namespace) -> int:
    return _run_suite(architecture_configs(_experiment_config(args, "arch")))


def cmd_labelflip(args: argparse.Namespace) -> int:
    return _run_suite(flip_configs(_experiment_config(args, "labelflip")))


def cmd_analytic(args: argparse.Namespace) -> int:
    seed = args.seed or 0
    rng = np.random.default_rng(seed)

    _banner("Fully-connected chain inversion")
    spec = ModelSpec.mlp((1, 4, 4), hidden=[32, 32], num_classes=10, biases=[False, False, True])
    model = build_model(spec, seed)
    x = rng.uniform(0.0, 1.0, size=(1,) + spec.input_shape)
    label = int(rng.integers(0, spec.num_classes))
    recovered = reconstruct_fc_chain(model, param_gradients(model, x, [label]))
    print(f"max |x - x_rec| = {np.max(np.abs(recovered - x[0])):.3e}")

    _banner("Classification-head input and label recovery")
    for name, spec in smoke_specs(num_classes=10).items():
        model = build_model(spec, seed)
        x = rng.uniform(0.0, 1.0, size=(1,) + spec.input_shape)
        label = int(rng.integers(0, spec.num_classes))
        capture = {}
        forward(model, Tensor(x), capture=capture)
        grads = param_gradients(model, x, [label])
        features = reconstruct_head_input(model, grads)
        error = np.max(np.abs(features - capture[spec.head_name][0]))
        found = recover_label(head_gradient(model, grads))
        print(f"{name:<24} head-input error {error:.3e}  label {label} -> {found}")
    return 0


def gradcheck_suite(seed: int = 0) -> List[Tuple[str, FdReport, float]]:
    """(name, report, tolerance) for every zoo model plus the double-backward objective checks."""
    rng = np.random.default_rng(seed)
    results = []
    for name, spec in smoke_specs().items():
        model = build_model(spec, seed)
        images = rng.uniform(0.0, 1.0, size=(2,) + spec.input_shape)
        labels = rng.integers(0, spec.num_classes, size=2)

        def loss_of(vector, model=model, images=images, labels=labels):
            return batch_loss(model, Tensor(images), labels, params_from_vector(model, vector))

        coords = rng.choice(model.num_parameters, size=min(40, model.num_parameters), replace=False)
        results.append((f"{name}: d loss / d params", fd_check(loss_of, model.flatten(), indices=coords), FD_TOL))

    for name, spec in (("mlp", ModelSpec.mlp((1, 4, 4), hidden=[6], num_classes=3)),
                       ("two-conv", ModelSpec.lenet_zhu((1, 4, 4), num_classes=3, channels=2))):
        model = build_model(spec, seed)
        truth = rng.uniform(0.0, 1.0, size=(1,) + spec.input_shape)
        labels = [int(rng.integers(0, spec.num_classes))]
        obs = GradObservation("raw_gradient", param_gradients(model, truth, labels), labels)
        cfg = AttackConfig(tv_weight=0.01)

        def objective_of(x, model=model, obs=obs, cfg=cfg):
            return gradient_objective(x, obs, model, cfg)

        point = rng.uniform(0.0, 1.0, size=(1,) + spec.input_shape)
        results.append((f"{name}: d objective / d x", fd_check(objective_of, point), DOUBLE_BACKWARD_TOL))
    return results


def cmd_gradcheck(args: argparse.Namespace) -> int:
    _banner("Finite-difference checks")
    failed = 0
    for name, report, tol in gradcheck_suite(args.seed or 0):
        if report.kink:
            status = "KINK"
        elif report.passed(tol):
            status = "OK"
        else:
            status = "FAIL"
            failed += 1
        print(f"{name:<40} max rel. error {report.max_error:.3e}  ({report.coordinates} coords)  {status}")
    return EXIT_NUMERICAL if failed else 0


COMMANDS = {
    "attack": cmd_attack,
    "fedsim": cmd_fedsim,
    "bench": cmd_bench,
    "ablation": cmd_ablation,
    "arch": cmd_arch,
    "labelflip": cmd_labelflip,
    "analytic": cmd_analytic,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--out", help="output directory (default: $GRADLEAK_OUT or ./runs)")
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    common.add_argument("--jobs", type=int, help="parallel jobs")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="gradleak",
                                     description="Input reconstruction from federated gradients and updates")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("attack", parents=[common], help="reconstruct images from observed updates")
    sub.add_parser("fedsim", parents=[common], help="sweep federated-averaging settings")
    sub.add_parser("bench", parents=[common], help="compare attack pairings on trained/untrained models")
    sub.add_parser("ablation", parents=[common], help="optimizer x objective x TV prior grid")
    sub.add_parser("arch", parents=[common], help="ConvNet width, depth and padding sweep")
    sub.add_parser("labelflip", parents=[common], help="trained model with and without a swapped head row")
    sub.add_parser("analytic", parents=[common], help="closed-form fully-connected inversion demos")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference derivative checks")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else LOG_LEVEL,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValidationError, OSError) as e:
        print(f"[ERROR] configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"[ERROR] numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Subcommands:
    gen-data <spec.json> <out.bin>   write a dataset container
    run <config.json> [--out DIR]    run one experiment, print the CSV path
    gradcheck [--suite S ...]        finite-difference suites; nonzero exit on failure
    compare --out DIR <cfg>...       run several configs and tabulate

Exit codes: 0 success, 1 config error, 2 numeric/gradcheck failure, 3 I/O error.
"""

import argparse
import json
import sys

from .errors import ComparisonError, ConfigError, FedseqError, NumericError
from .harness import GRADCHECK_SUITES, ExperimentConfig, compare, gradcheck, run_experiment
from .synthdata import DatasetSpec, build_federated_dataset, save_dataset


def _cmd_gen_data(args) -> int:
    with open(args.spec) as fh:
        raw = json.load(fh)
    try:
        spec = DatasetSpec(
            num_classes=raw["num_classes"],
            input_dim=raw["input_dim"],
            samples_per_class=raw["samples_per_class"],
            class_mean_scale=raw.get("class_mean_scale", 2.0),
            noise_std=raw.get("noise_std", 1.0),
            feature_skew=raw.get("feature_skew", "none"),
            rotation_angle_std=raw.get("rotation_angle_std", 0.0),
            master_seed=raw.get("seed", 0),
        )
        dataset = build_federated_dataset(
            spec, raw["num_clients"], raw.get("alpha", 0.1),
            ratio_train=raw.get("train_fraction", 0.25))
    except KeyError as err:
        raise ConfigError(str(err), "missing field in data spec") from err
    save_dataset(dataset, args.out)
    print(args.out)
    return 0


def _cmd_run(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    if args.out:
        config.output_dir = args.out
    record = run_experiment(config)
    print(record.metrics_path)
    return 0


def _cmd_gradcheck(args) -> int:
    report = gradcheck(suites=args.suite or None, instances=args.instances)
    for name in sorted(k for k in report if k != "passed"):
        entry = report[name]
        status = "pass" if entry["passed"] else "FAIL"
        print(f"{name}: max_rel_err={entry['max_rel_err']:.3e} "
              f"coords={entry['coords']} instances={entry['instances']} [{status}]")
    if not report["passed"]:
        print("gradcheck FAILED", file=sys.stderr)
        return 2
    return 0


def _cmd_compare(args) -> int:
    configs = [ExperimentConfig.from_file(path) for path in args.configs]
    summary = compare(configs, args.out)
    print(summary)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fedseq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset container")
    p.add_argument("spec", help="JSON data spec file")
    p.add_argument("out", help="output container path")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("config", help="JSON experiment config")
    p.add_argument("--out", help="override the config's output_dir")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--suite", action="append", choices=GRADCHECK_SUITES)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("compare", help="run and tabulate several configs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("configs", nargs="+", help="config files")
    p.set_defaults(fn=_cmd_compare)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ComparisonError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"io error: {err}", file=sys.stderr)
        return 3
    except FedseqError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

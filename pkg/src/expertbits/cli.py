import argparse
import json
import logging
import sys
from pathlib import Path

from expertbits.errors import ExpertBitsError, FileAccessError, InvalidArgumentError
from expertbits.experiments import (
    BITGAP_HEADER,
    ZETA_SWEEP_HEADER,
    bit_gap_experiment,
    export_run,
    lemma1_report,
    surrogate_study,
    zeta_sweep,
)
from expertbits.jsonio import write_csv, write_json
from expertbits.manifest import load_manifest
from expertbits.planner import (
    add_memory_estimate,
    metrics_document,
    model_metrics,
    plan_layers,
    quantize_model,
    read_metrics,
    read_plan,
    write_plan,
)
from expertbits.quantizer import AXES, MODES
from expertbits.ranking import DEFAULT_ZETA, RANKINGS
from expertbits.synthetic import TRACE_HEADER, SyntheticConfig, train
from expertbits.utils import parse_list, plural

logger = logging.getLogger(__name__)


class UsageError(Exception):
    """Bad command-line values, found after argparse has parsed them."""


def parse_levels(text: str) -> list[int]:
    try:
        levels = parse_list(text, int)
    except InvalidArgumentError:
        raise UsageError(f"--levels must be integers like 3,2 or 4,3,2, not {text!r}") from None
    if len(levels) not in (2, 3) or len(set(levels)) != len(levels):
        raise UsageError(f"--levels needs two or three distinct bit-widths, not {text!r}")
    if min(levels) < 1:
        raise UsageError("--levels must all be at least 1")
    return levels


def parse_floats(text: str, flag: str) -> list[float]:
    try:
        values = parse_list(text, float)
    except InvalidArgumentError:
        raise UsageError(f"{flag} must be comma-separated numbers, not {text!r}") from None
    if not values:
        raise UsageError(f"{flag} needs at least one value")
    return values


def check_positive(value, flag: str) -> None:
    if value is not None and value <= 0:
        raise UsageError(f"{flag} must be positive, not {value}")


def load_config(args) -> SyntheticConfig:
    if args.config:
        cfg = SyntheticConfig.from_file(args.config)
    elif args.ci:
        cfg = SyntheticConfig.ci()
    else:
        cfg = SyntheticConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_metrics(args) -> int:
    model = load_manifest(args.manifest)
    layers = model_metrics(model, surrogate=args.surrogate)
    write_json(args.output, metrics_document(model.model_name, layers), schema="metrics")
    experts = sum(len(layer.experts) for layer in layers)
    print(
        f"Measured {plural(experts, 'expert')} in {plural(len(layers), 'layer')}, "
        + f"wrote {args.output}."
    )
    return 0


def cmd_plan(args) -> int:
    levels = parse_levels(args.levels)
    check_positive(args.avg_bits, "--avg-bits")
    if not args.zeta > 1:
        raise UsageError(f"--zeta must be greater than 1, not {args.zeta}")
    check_positive(args.params_per_expert, "--params-per-expert")
    if args.non_expert_params is not None and args.non_expert_params < 0:
        raise UsageError("--non-expert-params can't be negative")
    check_positive(args.non_expert_bits, "--non-expert-bits")

    model = load_manifest(args.manifest)
    layers = model_metrics(model, surrogate=args.surrogate)
    plan_file = plan_layers(
        model.model_name, layers, levels, args.avg_bits, args.zeta, args.ranking
    )
    if args.params_per_expert:
        add_memory_estimate(
            plan_file,
            args.params_per_expert,
            args.non_expert_params or 0,
            args.non_expert_bits,
        )
    write_plan(args.output, plan_file)
    summary = (
        f"Planned {plural(len(plan_file.layers), 'layer')}, "
        + f"{plural(model.expert_count, 'expert')}, "
        + f"{plan_file.achieved_avg_bits:g} bits/expert"
    )
    if plan_file.memory_gb is not None:
        summary += f", {plan_file.memory_gb:.2f} GB"
    print(f"{summary}.")
    return 0


def cmd_quantize(args) -> int:
    model = load_manifest(args.manifest)
    plans = read_plan(args.plan)
    report = quantize_model(model, plans, args.output, args.axis, args.mode)
    print(
        f"Quantized {plural(model.expert_count, 'expert')} into {args.output}"
        + ("." if report["within_bound"] else ", some errors exceed delta/2!")
    )
    return 0


def cmd_zeta_sweep(args) -> int:
    zetas = parse_floats(args.zetas, "--zetas")
    if any(z <= 1 for z in zetas):
        raise UsageError("--zetas must all be greater than 1")
    if Path(args.manifest).is_file():
        _, layers = read_metrics(args.manifest)
    else:
        layers = model_metrics(load_manifest(args.manifest), surrogate=args.surrogate)
    rows = zeta_sweep(layers, zetas)
    if args.output:
        write_csv(args.output, ZETA_SWEEP_HEADER, [row.as_row() for row in rows])
    for row in rows:
        print(f"zeta {row.zeta:g}: moved {plural(row.moved, 'expert')} of {row.experts}")
    return 0


def cmd_synth_train(args) -> int:
    cfg = load_config(args)
    out = Path(args.output)
    write_json(out / "config.json", cfg.to_json(), schema="run_config")
    run = train(cfg)
    write_csv(out / "traces.csv", TRACE_HEADER, [row.as_row() for row in run.traces])
    report = lemma1_report(run)
    write_json(out / "lemma1_report.json", report.to_json(), schema="lemma1_report")
    write_json(out / "surrogate.json", surrogate_study(run).to_json(), schema="surrogate")
    if args.export_manifest:
        export_run(run, args.export_manifest)
    print(
        f"Trained {plural(cfg.steps, 'step')}, test error {report.final_test_error:g}, "
        + f"wrote {out}."
    )
    if not report.valid:
        print(f"Unlearned tokens: {', '.join(report.unlearned_tokens)}")
    return 0


def cmd_synth_bitgap(args) -> int:
    cfg = load_config(args)
    if args.alphas:
        alphas = parse_floats(args.alphas, "--alphas")
        if any(not 0 < a < 0.25 for a in alphas):
            raise UsageError("--alphas must all be in (0, 0.25)")
        cfg = cfg.replace(alphas=alphas)
    if args.bits:
        try:
            bit_range = parse_list(args.bits, int)
        except InvalidArgumentError:
            raise UsageError(f"--bits must be LOW,HIGH, not {args.bits!r}") from None
        if len(bit_range) != 2 or not 1 <= bit_range[0] <= bit_range[1]:
            raise UsageError(f"--bits must be LOW,HIGH with 1 <= LOW <= HIGH, not {args.bits!r}")
        cfg = cfg.replace(bit_range=bit_range)
    out = Path(args.output)
    write_json(out / "config.json", cfg.to_json(), schema="run_config")
    rows = bit_gap_experiment(cfg, zeta=args.zeta)
    write_csv(out / "bitgap.csv", BITGAP_HEADER, [row.as_row() for row in rows])
    for row in rows:
        print(f"alpha {row.alpha:g}: b_h={row.b_h}, b_l={row.b_l}, bound {row.bound:.2f}")
    return 0


def add_manifest_args(
    parser: argparse.ArgumentParser, help: str = "directory holding manifest.json"
) -> None:
    parser.add_argument("manifest", help=help)
    parser.add_argument(
        "--surrogate",
        action="store_true",
        help="use final router norms even when initial routers are available",
    )


def add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="a .toml or .json run configuration")
    parser.add_argument("--ci", action="store_true", help="use the small fast configuration")
    parser.add_argument("--seed", type=int, help="override the configuration's seed")
    parser.add_argument("-o", "--output", required=True, help="run directory to write")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expertbits")
    parser.add_argument("-v", "--verbose", action="store_true", help="log debugging details")
    commands = parser.add_subparsers(dest="command", required=True)

    metrics = commands.add_parser("metrics", help="compute per-expert ranking metrics")
    add_manifest_args(metrics)
    metrics.add_argument("-o", "--output", default="metrics.json")
    metrics.set_defaults(func=cmd_metrics)

    plan = commands.add_parser("plan", help="assign bit-widths to experts")
    add_manifest_args(plan)
    plan.add_argument("--levels", required=True, help="bit-widths, like 3,2 or 4,3,2")
    plan.add_argument("--avg-bits", type=float, required=True, help="target bits per expert")
    plan.add_argument("--zeta", type=float, default=DEFAULT_ZETA, help="MaxVar promotion factor")
    plan.add_argument("--ranking", choices=sorted(RANKINGS), default="lambda-maxvar")
    plan.add_argument("--params-per-expert", type=int, help="for a memory estimate")
    plan.add_argument("--non-expert-params", type=int, help="for a memory estimate")
    plan.add_argument("--non-expert-bits", type=int, default=16)
    plan.add_argument("-o", "--output", default="plan.json")
    plan.set_defaults(func=cmd_plan)

    quantize = commands.add_parser("quantize", help="apply a plan to a model")
    quantize.add_argument("manifest", help="directory holding manifest.json")
    quantize.add_argument("plan", help="plan.json from the plan command")
    quantize.add_argument("-o", "--output", required=True, help="directory for the new model")
    quantize.add_argument("--axis", choices=AXES, help="group axis, default one group per neuron")
    quantize.add_argument("--mode", choices=MODES, default="affine")
    quantize.set_defaults(func=cmd_quantize)

    sweep = commands.add_parser("zeta-sweep", help="count experts moved by each zeta")
    add_manifest_args(sweep, help="model directory, or metrics.json from the metrics command")
    sweep.add_argument("--zetas", default="1.5,2,2.5,3,4,5")
    sweep.add_argument("-o", "--output", help="CSV file to write")
    sweep.set_defaults(func=cmd_zeta_sweep)

    synth = commands.add_parser("synth", help="experiments on the synthetic model")
    synth_commands = synth.add_subparsers(dest="synth_command", required=True)

    synth_train = synth_commands.add_parser("train", help="train and write diagnostics")
    add_config_args(synth_train)
    synth_train.add_argument("--export-manifest", help="also write the model as a manifest here")
    synth_train.set_defaults(func=cmd_synth_train)

    bitgap = synth_commands.add_parser("bitgap", help="measure the high/low bit gap")
    add_config_args(bitgap)
    bitgap.add_argument("--alphas", help="comma-separated alphas, default from the config")
    bitgap.add_argument("--bits", help="search range LOW,HIGH, default from the config")
    bitgap.add_argument("--zeta", type=float, default=DEFAULT_ZETA)
    bitgap.set_defaults(func=cmd_synth_bitgap)
    return parser


def expertbits(argv: list[str]) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"expertbits: error: {exc}", file=sys.stderr)
        return 2
    except ExpertBitsError as exc:
        logger.debug("command failed", exc_info=True)
        print(json.dumps(exc.to_json()), file=sys.stderr)
        return 1
    except OSError as exc:
        logger.debug("command failed", exc_info=True)
        print(json.dumps(FileAccessError(str(exc)).to_json()), file=sys.stderr)
        return 1


def main():
    sys.exit(expertbits(sys.argv[1:]))

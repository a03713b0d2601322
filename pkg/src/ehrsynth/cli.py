"""Command-line entry point.

Subcommands: ``synth-data``, ``train``, ``generate``, ``evaluate``,
``grad-check``. Every run is reproducible from a single JSON config document
(``--config``); individual flags override config values, and the
``EHRPD_SEED`` environment variable overrides every seed source. The active
config is echoed into each output (cohort headers, checkpoint manifests,
metric reports, training logs).

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import (CohortError, SyntheticCohortConfig, generate_synthetic_cohort,
                   load_cohort, write_cohort)
from .evaluation import evaluate, write_report
from .losses import FocalParams, LossWeights
from .training import (ABLATIONS, NumericalError, TrainConfig, dataclass_from_dict,
                       generate_cohort, gradient_check, load_checkpoint,
                       save_checkpoint, to_jsonable, train)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


@dataclass(frozen=True)
class GenerateOptions:
    horizon: int = 5
    mode: str = "oneshot"
    seed: int = 0


@dataclass(frozen=True)
class EvaluateOptions:
    pd_fractions: tuple[float, ...] = (0.1,)
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    """Single JSON document driving every subcommand; unknown keys rejected."""

    data: SyntheticCohortConfig = field(default_factory=SyntheticCohortConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generate: GenerateOptions = field(default_factory=GenerateOptions)
    evaluate: EvaluateOptions = field(default_factory=EvaluateOptions)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 instead of argparse's default 2
        raise _UsageError(message)


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return dataclass_from_dict(RunConfig, raw, context="run config")


def _resolve_seed(flag_value: int | None, config_value: int) -> int:
    env = os.environ.get("EHRPD_SEED")
    if env is not None:
        return int(env)
    if flag_value is not None:
        return flag_value
    return config_value


def _override(config, **updates):
    changed = {k: v for k, v in updates.items() if v is not None}
    return replace(config, **changed) if changed else config


def _check_compatible(cohort, data_meta, role: str) -> None:
    if cohort.vocab_sizes != data_meta["modality_sizes"]:
        raise CohortError(f"{role} cohort modalities do not match the checkpoint")
    if cohort.patients and cohort.demographic_dim != data_meta["demographic_dim"]:
        raise CohortError(f"{role} cohort demographics width does not match the checkpoint")


def _cmd_synth_data(args) -> int:
    run = load_run_config(args.config)
    data_config = _override(
        run.data,
        num_patients=args.num_patients,
        num_modalities=args.modalities,
        max_visits=args.max_visits,
    )
    if args.vocab_size is not None:
        sizes = tuple(args.vocab_size)
        if len(sizes) == 1:
            sizes = sizes * data_config.num_modalities
        data_config = replace(data_config, vocab_sizes=sizes)
    data_config = replace(data_config, seed=_resolve_seed(args.seed, data_config.seed))
    cohort = generate_synthetic_cohort(data_config)
    write_cohort(cohort, args.out, extra_header={"config": to_jsonable(data_config)})
    visits = sum(len(p.visits) for p in cohort.patients)
    print(f"wrote {len(cohort.patients)} patients / {visits} visits to {args.out}")
    for vocab in cohort.vocabularies:
        print(f"  modality {vocab.modality_name}: {vocab.size} codes")
    return EXIT_OK


def _cmd_train(args) -> int:
    run = load_run_config(args.config)
    config = _override(
        run.train,
        epochs=args.epochs,
        batch_size=args.batch_size,
        threads=args.threads,
        precision=args.precision,
        dim=args.dim,
        num_steps=args.num_steps,
        learning_rate=args.learning_rate,
        weight_decay=args.weight_decay,
    )
    focal = _override(config.focal, alpha=args.focal_alpha, gamma=args.focal_gamma)
    weights = _override(config.loss_weights, reconstruction=args.weight_recon,
                        codes=args.weight_codes, interval=args.weight_time)
    config = replace(config, focal=focal, loss_weights=weights)
    if args.ablation:
        config = replace(config, **{ABLATIONS[name]: True for name in args.ablation})
    config = replace(config, seed=_resolve_seed(args.seed, config.seed))
    cohort = load_cohort(args.data)
    log_path = args.log or f"{args.out}.log.csv"
    result = train(cohort, config, log_path=log_path)
    save_checkpoint(result, args.out)
    if result.history:
        last = result.history[-1]
        print(f"epoch {last.epoch}: total={last.total:.6g} recon={last.reconstruction:.6g} "
              f"codes={last.codes:.6g} time={last.interval:.6g}")
    print(f"checkpoint written to {args.out} (+ .json manifest), log to {log_path}")
    return EXIT_OK


def _cmd_generate(args) -> int:
    run = load_run_config(args.config)
    options = _override(run.generate, horizon=args.horizon, mode=args.mode)
    options = replace(options, seed=_resolve_seed(args.seed, options.seed))
    bundle = load_checkpoint(args.checkpoint)
    seeds = load_cohort(args.data)
    _check_compatible(seeds, bundle.data_meta, "seed")
    synthetic = generate_cohort(bundle.model, bundle.schedule, seeds,
                                horizon=options.horizon, mode=options.mode,
                                seed=options.seed)
    write_cohort(synthetic, args.out,
                 extra_header={"config": {"generate": to_jsonable(options),
                                          "checkpoint": str(args.checkpoint)}})
    print(f"wrote {len(synthetic.patients)} synthetic patients to {args.out}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    run = load_run_config(args.config)
    options = run.evaluate
    if args.pd_fraction is not None:
        options = replace(options, pd_fractions=tuple(args.pd_fraction))
    options = replace(options, seed=_resolve_seed(args.seed, options.seed))
    bundle = load_checkpoint(args.checkpoint)
    real = load_cohort(args.real)
    _check_compatible(real, bundle.data_meta, "real")
    synthetic = load_cohort(args.synthetic) if args.synthetic else None
    report = evaluate(bundle.model, bundle.schedule, real, synthetic,
                      pd_fractions=options.pd_fractions, seed=options.seed)
    payload = report.to_json()
    payload["config"] = {"evaluate": to_jsonable(options),
                         "checkpoint": str(args.checkpoint)}
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.out:
        write_report(report, args.out, extra={"config": payload["config"]})
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    seed = _resolve_seed(args.seed, 0)
    result = gradient_check(kind=args.kind, seed=seed)
    print(f"max relative error {result.max_rel_error:.3e} over "
          f"{result.num_parameters} parameters (worst: {result.worst_parameter})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ehrsynth",
                     description=__doc__,
                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth-data", formatter_class=fmt,
                       help="generate an oracle cohort with learnable structure")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--num-patients", type=int, help=f"default {SyntheticCohortConfig.num_patients}")
    p.add_argument("--modalities", type=int, help=f"default {SyntheticCohortConfig.num_modalities}")
    p.add_argument("--vocab-size", type=int, nargs="+",
                   help="one size per modality, or one value for all")
    p.add_argument("--max-visits", type=int, help=f"default {SyntheticCohortConfig.max_visits}")
    p.add_argument("--seed", type=int, help="generator seed (EHRPD_SEED overrides)")
    p.add_argument("--out", required=True, help="output JSON-lines path")
    p.set_defaults(handler=_cmd_synth_data)

    p = sub.add_parser("train", formatter_class=fmt, help="train on a cohort file")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--data", required=True, help="training cohort JSON-lines path")
    p.add_argument("--out", required=True, help="checkpoint path (manifest at <out>.json)")
    p.add_argument("--log", help="metrics CSV path (default <out>.log.csv)")
    p.add_argument("--epochs", type=int, help=f"default {TrainConfig.epochs}")
    p.add_argument("--batch-size", type=int, help=f"default {TrainConfig.batch_size}")
    p.add_argument("--learning-rate", type=float, help=f"default {TrainConfig.learning_rate}")
    p.add_argument("--weight-decay", type=float, help=f"default {TrainConfig.weight_decay}")
    p.add_argument("--focal-alpha", type=float,
                   help=f"focal class balance, default {FocalParams.alpha}")
    p.add_argument("--focal-gamma", type=float,
                   help=f"focal focusing exponent, default {FocalParams.gamma}")
    p.add_argument("--weight-recon", type=float,
                   help=f"reconstruction loss weight, default {LossWeights.reconstruction}")
    p.add_argument("--weight-codes", type=float,
                   help=f"code loss weight, default {LossWeights.codes}")
    p.add_argument("--weight-time", type=float,
                   help=f"interval loss weight, default {LossWeights.interval}")
    p.add_argument("--dim", type=int, help=f"embedding width, default {TrainConfig.dim}")
    p.add_argument("--num-steps", type=int,
                   help=f"diffusion steps, default {TrainConfig.num_steps}")
    p.add_argument("--precision", type=int, choices=(32, 64),
                   help=f"default {TrainConfig.precision}")
    p.add_argument("--threads", type=int, help=f"default {TrainConfig.threads}")
    p.add_argument("--seed", type=int, help="training seed (EHRPD_SEED overrides)")
    p.add_argument("--ablation", choices=sorted(ABLATIONS), nargs="+",
                   help="disable components: as1 time-aware embedding, as2 interval "
                        "estimation, as3 demographics, as4 condition attention")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("generate", formatter_class=fmt,
                       help="roll synthetic visits forward from seed patients")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="seed cohort JSON-lines path")
    p.add_argument("--horizon", type=int, help=f"default {GenerateOptions.horizon}")
    p.add_argument("--mode", choices=("oneshot", "ancestral"),
                   help=f"default {GenerateOptions.mode}")
    p.add_argument("--seed", type=int, help="sampling seed (EHRPD_SEED overrides)")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_generate)

    p = sub.add_parser("evaluate", formatter_class=fmt,
                       help="fidelity/privacy/time metrics as JSON")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--real", required=True, help="real cohort JSON-lines path")
    p.add_argument("--synthetic", help="synthetic cohort path (enables the PD attack)")
    p.add_argument("--pd-fraction", type=float, nargs="+",
                   help=f"known-patient fractions, default {EvaluateOptions.pd_fractions}")
    p.add_argument("--seed", type=int, help="metric seed (EHRPD_SEED overrides)")
    p.add_argument("--out", help="also write the report JSON here")
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("grad-check", formatter_class=fmt,
                       help="finite-difference check of analytic gradients")
    p.add_argument("--kind", choices=("full", "linear"), default="full")
    p.add_argument("--seed", type=int, help="default 0 (EHRPD_SEED overrides)")
    p.set_defaults(handler=_cmd_grad_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CohortError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: ``fwens <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__, checkpoint, detection
from .decoding import DecodeConfig
from .errors import ConfigError, DataError, FwensError
from .experiment import (EXPERIMENTS, DataConfig, RunConfig, build_feature_rows, classifier_records,
                         detect, entropy_report, exact_match, format_classifier_table, generate_answers,
                         make_datasets, nll_table, read_datasets, read_feature_dump, run_experiment,
                         token_f1, write_datasets, write_feature_dump, write_run_config)
from .layers import InitSpec
from .tasks import read_records
from .training import NoiseInjection, TrainConfig, train

log = logging.getLogger("fwens")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--experiment", choices=EXPERIMENTS, default="faithfulness")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--members", type=int, default=4, help="ensemble size M")
    p.add_argument("--rank", type=int, default=8, help="adapter rank")
    p.add_argument("--alpha", type=float, default=32.0, help="adapter scaling numerator")
    p.add_argument("--unanswerable-frac", type=float, default=DataConfig.unanswerable_frac,
                   help="fraction of unanswerable fine-tuning questions (default 1/3 = 0.3333)")
    p.add_argument("--temp", type=float, default=0.5)
    p.add_argument("--top-p", type=float, default=0.99)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--decode", choices=("greedy", "sampled"), default="greedy")
    p.add_argument("--split-seed", type=int, default=42)
    p.add_argument("--n-pretrain", type=int, default=DataConfig.n_pretrain)
    p.add_argument("--n-finetune", type=int, default=DataConfig.n_finetune)
    p.add_argument("--n-eval", type=int, default=DataConfig.n_eval)
    p.add_argument("--pretrain-lr", type=float, default=1e-3)
    p.add_argument("--finetune-lr", type=float, default=3e-4)
    p.add_argument("--epochs", type=int, default=1, help="fine-tuning epochs")
    p.add_argument("--noise-sigma2", type=float, default=None, help="enable anchored noise injection")
    p.add_argument("--noise-strength", type=float, default=1.0)
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--sample-baseline", action="store_true")
    p.add_argument("--base-checkpoint", default=None)


def config_from_args(args, out_dir: str) -> RunConfig:
    if getattr(args, "config", None):
        return replace(RunConfig.load(args.config), out_dir=out_dir)
    noise = NoiseInjection(args.noise_sigma2, args.noise_strength) if args.noise_sigma2 is not None else None
    data = replace(DataConfig(), unanswerable_frac=args.unanswerable_frac, n_pretrain=args.n_pretrain,
                   n_finetune=args.n_finetune, n_eval=args.n_eval)
    return RunConfig(
        experiment=args.experiment, seed=args.seed, members=args.members, data=data,
        pretrain=TrainConfig(stage="pretrain", lr=args.pretrain_lr),
        finetune=TrainConfig(stage="finetune", lr=args.finetune_lr, epochs=args.epochs, rank=args.rank,
                             alpha=args.alpha, noise_injection=noise),
        decode=DecodeConfig(args.decode, args.temp, args.top_p, args.top_k),
        split_seed=args.split_seed, standardize=args.standardize, sample_baseline=args.sample_baseline,
        base_checkpoint=args.base_checkpoint, out_dir=out_dir)


def _run_config_near(path: str | Path) -> RunConfig:
    """RunConfig stored in the run directory that contains ``path``."""
    for parent in [Path(path).resolve(), *Path(path).resolve().parents][:4]:
        cand = parent / "run_config.json"
        if cand.is_file():
            return RunConfig.load(cand)
    return RunConfig()


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = config_from_args(args, args.out)
    write_run_config(cfg, Path(args.out))
    datasets = make_datasets(cfg)
    write_datasets(datasets, cfg.vocabulary(), Path(args.out) / "data")
    for name, recs in datasets.items():
        print(f"{name:<10}{len(recs):>8} records")
    return 0


def cmd_pretrain(args) -> int:
    from .experiment import pretrain_base

    cfg = _run_config_near(args.data)
    cfg = replace(cfg, pretrain=replace(cfg.pretrain, lr=args.lr, epochs=args.epochs, max_steps=args.max_steps))
    base = pretrain_base(cfg, read_records(args.data), log_path=args.log)
    checkpoint.save(base, args.out, extra={"stage": "pretrain", "code_version": __version__})
    print(f"wrote {args.out}")
    return 0


def cmd_finetune(args) -> int:
    from .experiment import finetune_ensemble

    cfg = _run_config_near(args.data)
    noise = NoiseInjection(args.noise_sigma2, args.noise_strength) if args.noise_sigma2 is not None else None
    cfg = replace(cfg, members=args.members, finetune=replace(
        cfg.finetune, lr=args.lr, epochs=args.epochs, rank=args.rank, alpha=args.alpha,
        noise_injection=noise, max_steps=args.max_steps))
    ens = finetune_ensemble(cfg, checkpoint.load(args.base), read_records(args.data), log_path=args.log)
    checkpoint.save(ens, args.out, extra={"stage": "finetune", "code_version": __version__})
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config_near(args.data)
    cfg = replace(cfg, decode=DecodeConfig(args.decode, args.temp, args.top_p, args.top_k),
                  max_new_tokens=args.max_new, seed=args.seed)
    model = checkpoint.load(args.checkpoint)
    records = read_records(args.data)
    gens = generate_answers(cfg, model, records)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for g in gens:
            fh.write(json.dumps(g, sort_keys=True) + "\n")
    answerable = [(r, g) for r, g in zip(records, gens) if getattr(r, "answerable", False)]
    if answerable:
        em = sum(exact_match(g["answer"], r.answer) for r, g in answerable) / len(answerable)
        f1 = sum(token_f1(g["answer"], r.answer) for r, g in answerable) / len(answerable)
        print(f"exact_match {em:.4f}  f1 {f1:.4f}  (n={len(answerable)})")
    if args.base:
        table = nll_table(cfg, checkpoint.load(args.base), model, records)
        print(f"nll base {table['base']:.4f}  ensemble {table['ensemble']:.4f}")
    print(f"wrote {len(gens)} generations to {args.out}")
    return 0


def cmd_features(args) -> int:
    records = read_records(args.data)
    with open(args.generations, encoding="utf-8") as fh:
        gens = [json.loads(line) for line in fh if line.strip()]
    rows = build_feature_rows(args.experiment, records, gens)
    write_feature_dump(Path(args.out), rows)
    n_h = sum(r.label == detection.HALLUCINATED for r in rows)
    print(f"wrote {len(rows)} rows ({n_h} hallucinated) to {args.out}")
    return 0


def cmd_detect(args) -> int:
    names = args.names or [Path(f).stem for f in args.features]
    if len(names) != len(args.features):
        raise ConfigError("--names must match --features one to one")
    tables = {n: detect(read_feature_dump(f), args.split_seed, args.standardize) for n, f in zip(names, args.features)}
    text = format_classifier_table(tables)
    print(text)
    if args.out:
        Path(args.out + ".txt").write_text(text + "\n", encoding="utf-8")
        with open(args.out + ".jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for rec in classifier_records(tables):
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return 0


def cmd_bench(args) -> int:
    from . import bench
    from .model import EnsembleTransformer
    from .tasks import Vocabulary, gen_qa_dataset, render_prompt

    cfg = RunConfig(experiment="bench")
    base = checkpoint.load(args.checkpoint) if args.checkpoint else EnsembleTransformer(cfg.model_config(M=1))
    vocab = Vocabulary()
    prompts = [render_prompt(r, vocab).ids for r in gen_qa_dataset(args.prompts, 1 / 3, seed=42, split="test")]
    Ms = [int(m) for m in args.M.split(",")]
    rows = bench.bench_inference(base, Ms, prompts, args.repetitions, args.warmup, args.max_new)
    params = bench.bench_params(base.config, range(1, max(Ms) + 1))
    print(bench.format_inference(rows))
    print()
    print(bench.format_params(params))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench_inference.csv").write_text(bench.inference_csv(rows), encoding="utf-8")
        (out / "bench_params.csv").write_text(bench.params_csv(params), encoding="utf-8")
    return 0


def cmd_report(args) -> int:
    target = Path(args.path)
    if target.is_dir():
        for name in ("classifiers.txt", "predictive.txt", "nll.txt", "bench.txt"):
            if (target / name).is_file():
                print(f"---- {name}")
                print("\n".join(l for l in (target / name).read_text(encoding="utf-8").splitlines()
                                if not l.startswith("# run config")))
        if (target / "FAILED").is_file():
            print("---- FAILED\n" + (target / "FAILED").read_text(encoding="utf-8"))
        target = target / "features.tsv"
        if not target.is_file():
            return 0
    print(entropy_report(read_feature_dump(target), args.examples))
    return 0


def cmd_run(args) -> int:
    cfg = config_from_args(args, args.out)
    report = run_experiment(cfg)
    if report.classifiers:
        print(format_classifier_table(report.classifiers))
    if report.nll:
        print(f"nll base {report.nll['base']:.4f}  ensemble {report.nll['ensemble']:.4f}")
    if report.predictive:
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in report.predictive.items()))
    if report.bench:
        from . import bench
        print(bench.format_inference(report.bench))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fwens", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fwens {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate datasets and a run config")
    _add_common(p)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train the single base model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a batch ensemble from a base checkpoint")
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--members", type=int, default=4)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--alpha", type=float, default=32.0)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--noise-sigma2", type=float, default=None)
    p.add_argument("--noise-strength", type=float, default=1.0)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="generate answers and per-step uncertainties")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--base", default=None, help="base checkpoint for an NLL comparison")
    p.add_argument("--decode", choices=("greedy", "sampled"), default="greedy")
    p.add_argument("--temp", type=float, default=0.5)
    p.add_argument("--top-p", type=float, default=0.99)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--max-new", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("features", help="label generations and dump uncertainty features")
    p.add_argument("--generations", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--experiment", choices=("faithfulness", "factual", "ood"), default="faithfulness")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("detect", help="fit and evaluate hallucination classifiers")
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--names", nargs="+", default=None)
    p.add_argument("--split-seed", type=int, default=42)
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--out", default=None, help="output prefix for .txt and .jsonl tables")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("bench", help="inference time and parameter count vs ensemble size")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--M", default="1,2,4,8")
    p.add_argument("--prompts", type=int, default=8)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--max-new", type=int, default=4)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="print run tables and the per-token entropy report")
    p.add_argument("path", help="run directory or feature dump")
    p.add_argument("--examples", type=int, default=3)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="run a whole experiment end to end")
    _add_common(p)
    p.add_argument("--config", default=None, help="RunConfig JSON (overrides the flags)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FwensError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())

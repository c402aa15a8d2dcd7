"""End-to-end experiment runs and their on-disk artefacts.

A run directory holds::

    run_config.json      full RunConfig plus code version
    data/                line-delimited datasets and the vocabulary manifest
    checkpoints/         base.fweb, ensemble.fweb
    metrics.jsonl        per-epoch training records
    generations.jsonl    generated answers with per-step uncertainty triples
    features.tsv         feature dump (id, 4 features, label, answer, entropies)
    classifiers.{txt,jsonl}   accuracy table over classifier kinds
    predictive.{txt,jsonl}    exact match / token F1 / MCQ accuracy
    nll.{txt,jsonl}      base vs fine-tuned answer NLL
    MANIFEST             layout of this directory

Every output except timings is a deterministic function of the RunConfig.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, checkpoint, detection
from .decoding import DecodeConfig, generate_batch
from .errors import ConfigError, DataError, FwensError
from .layers import InitSpec
from .model import EnsembleTransformer, ModelConfig
from .tasks import (IDK, LABELS, MCQRecord, QARecord, VocabSpec, Vocabulary, answer_symbols,
                    gen_mcq_dataset, gen_qa_dataset, ood_split, read_records, render_prompt,
                    write_records)
from .training import NoiseInjection, TrainConfig, evaluate_nll, train
from .uncertainty import (FEATURE_NAMES, UncertaintyTriple, sample_trajectories, step_triples,
                          summarize_sequence, trajectories_to_steps)

log = logging.getLogger(__name__)

EXPERIMENTS = ("faithfulness", "factual", "ood", "bench")
OOD_PRETRAIN_UNANSWERABLE = 0.1


@dataclass(frozen=True)
class DataConfig:
    n_pretrain: int = 48000
    # None resolves per experiment: 0 (answerable-only) except for ood, which
    # needs a base that has seen abstentions (see OOD_PRETRAIN_UNANSWERABLE)
    pretrain_unanswerable_frac: float | None = None
    pretrain_restate: bool = False
    pretrain_seed: int = 7
    n_finetune: int = 4800
    unanswerable_frac: float = 1 / 3
    finetune_seed: int = 50
    n_eval: int = 5000
    eval_seed: int = 42
    n_heldout: int = 1000
    heldout_seed: int = 43
    n_facts: int = 200
    vocab: VocabSpec = VocabSpec()


@dataclass(frozen=True)
class RunConfig:
    experiment: str = "faithfulness"
    seed: int = 0
    members: int = 4
    model: dict = field(default_factory=lambda: {"d_model": 64, "n_heads": 4, "n_layers": 2, "max_seq_len": 40})
    data: DataConfig = DataConfig()
    pretrain: TrainConfig = TrainConfig(stage="pretrain", epochs=1, batch_size=32, lr=1e-3)
    finetune: TrainConfig = TrainConfig(stage="finetune", epochs=1, batch_size=32, lr=3e-4)
    init: InitSpec = InitSpec()
    decode: DecodeConfig = DecodeConfig()
    max_new_tokens: int = 4
    split_seed: int = 42
    standardize: bool = False
    sample_baseline: bool = False
    base_checkpoint: str | None = None
    out_dir: str = "runs/faithfulness"

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.members < 1:
            raise ConfigError(f"members must be >= 1, got {self.members}")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be >= 1")
        if self.data.pretrain_unanswerable_frac is None:
            frac = OOD_PRETRAIN_UNANSWERABLE if self.experiment == "ood" else 0.0
            object.__setattr__(self, "data", replace(self.data, pretrain_unanswerable_frac=frac))

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.data.vocab)

    def model_config(self, M: int = 1) -> ModelConfig:
        return ModelConfig(vocab_size=len(self.vocabulary()), M=M, seed=self.seed, **self.model)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown RunConfig fields: {sorted(unknown)}")
        obj = dict(obj)
        if "data" in obj:
            d = dict(obj["data"])
            if "vocab" in d:
                d["vocab"] = VocabSpec(**d["vocab"])
            obj["data"] = DataConfig(**d)
        for key in ("pretrain", "finetune"):
            if key in obj:
                t = dict(obj[key])
                if t.get("noise_injection"):
                    t["noise_injection"] = NoiseInjection(**t["noise_injection"])
                if "betas" in t:
                    t["betas"] = tuple(t["betas"])
                obj[key] = TrainConfig(**t)
        if "init" in obj:
            obj["init"] = InitSpec(**obj["init"])
        if "decode" in obj:
            obj["decode"] = DecodeConfig(**obj["decode"])
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read run config {path}: {exc}") from None
        obj.pop("code_version", None)
        return cls.from_dict(obj)


class StageFailed(FwensError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)


# -- metrics -----------------------------------------------------------------


def _tokens(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def exact_match(prediction, gold) -> int:
    return int(_tokens(prediction) == _tokens(gold))


def token_f1(prediction, gold) -> float:
    """Bag-of-tokens F1 between prediction and gold answer."""
    p, g = _tokens(prediction), _tokens(gold)
    if not p and not g:
        return 1.0
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(p), common / len(g)
    return 2 * precision * recall / (precision + recall)


# -- datasets ----------------------------------------------------------------


def make_datasets(cfg: RunConfig) -> dict[str, list]:
    """All record sets a run needs, keyed by role."""
    d = cfg.data
    spec = d.vocab
    out = {"pretrain": gen_qa_dataset(d.n_pretrain, d.pretrain_unanswerable_frac, spec, d.pretrain_seed)}
    if cfg.experiment == "factual":
        out["finetune"] = gen_mcq_dataset(d.n_facts, d.n_finetune, d.eval_seed, "train", spec=spec)
        out["eval"] = gen_mcq_dataset(d.n_facts, d.n_eval, d.eval_seed, "test", spec=spec)
        out["heldout"] = gen_mcq_dataset(d.n_facts, d.n_heldout, d.eval_seed, "val", spec=spec)
        return out
    ft = gen_qa_dataset(d.n_finetune, d.unanswerable_frac, spec, d.finetune_seed)
    if cfg.experiment == "ood":
        ft, _ = ood_split(ft)
    out["finetune"] = ft
    # eval prompts for the classifier set are unanswerable only
    pool = gen_qa_dataset(int(np.ceil(d.n_eval / max(d.unanswerable_frac, 1e-9))) + 16, d.unanswerable_frac,
                          spec, d.eval_seed, split="test")
    out["eval"] = [r for r in pool if not r.answerable][: d.n_eval]
    if len(out["eval"]) < d.n_eval:
        raise DataError(f"could only draw {len(out['eval'])} unanswerable eval records")
    out["heldout"] = gen_qa_dataset(d.n_heldout, d.unanswerable_frac, spec, d.heldout_seed, split="val")
    return out


def write_datasets(datasets: dict[str, list], vocab: Vocabulary, data_dir: Path) -> None:
    data_dir.mkdir(parents=True, exist_ok=True)
    for name, records in datasets.items():
        write_records(data_dir / f"{name}.jsonl", records)
    vocab.write_manifest(data_dir / "vocab.json")


def read_datasets(data_dir: Path) -> dict[str, list]:
    return {p.stem: read_records(p) for p in sorted(Path(data_dir).glob("*.jsonl"))}


# -- model stages ------------------------------------------------------------


def pretrain_base(cfg: RunConfig, records: Sequence[QARecord], log_path: Path | None = None) -> EnsembleTransformer:
    vocab = cfg.vocabulary()
    base = EnsembleTransformer(cfg.model_config(M=1))
    seqs = [render_prompt(r, vocab, with_answer=True, restate=cfg.data.pretrain_restate) for r in records]
    train(base, seqs, replace(cfg.pretrain, stage="pretrain", seed=cfg.seed), log_path=log_path)
    return base


def finetune_ensemble(cfg: RunConfig, base: EnsembleTransformer, records: Sequence, M: int | None = None,
                      log_path: Path | None = None) -> EnsembleTransformer:
    vocab = cfg.vocabulary()
    M = cfg.members if M is None else M
    ens = EnsembleTransformer.from_base(base, M, cfg.init, seed=cfg.seed + 1)
    seqs = [render_prompt(r, vocab, with_answer=True) for r in records]
    train(ens, seqs, replace(cfg.finetune, stage="finetune", seed=cfg.seed + 1), log_path=log_path, init=cfg.init)
    return ens


def generate_answers(cfg: RunConfig, model: EnsembleTransformer, records: Sequence) -> list[dict]:
    """Greedy mixture decoding with per-step uncertainty triples."""
    vocab = cfg.vocabulary()
    prompts = [render_prompt(r, vocab).ids for r in records]
    gens = generate_batch(model, prompts, cfg.decode, cfg.max_new_tokens,
                          seeds=[cfg.seed + i for i in range(len(prompts))], stop_token=vocab["EOA"])
    out = []
    for i, g in enumerate(gens):
        triples = step_triples(g.member_probs)
        out.append({"id": i, "tokens": [int(t) for t in g.tokens], "answer": answer_symbols(g.tokens, vocab),
                    "triples": [[t.predictive, t.aleatoric, t.epistemic] for t in triples]})
    return out


def sample_based_answers(cfg: RunConfig, model: EnsembleTransformer, records: Sequence) -> list[dict]:
    """Sample-based pseudo-ensemble from a single model; answer = first trajectory."""
    vocab = cfg.vocabulary()
    prompts = [render_prompt(r, vocab).ids for r in records]
    trajs = sample_trajectories(model, prompts, cfg.members, DecodeConfig.sampled(
        cfg.decode.temperature, cfg.decode.top_p, cfg.decode.top_k), cfg.seed, cfg.max_new_tokens, vocab["EOA"])
    out = []
    for i, gens in enumerate(trajs):
        triples = step_triples([s.member_probs for s in trajectories_to_steps(gens)])
        out.append({"id": i, "tokens": [int(t) for t in gens[0].tokens],
                    "answer": answer_symbols(gens[0].tokens, vocab),
                    "triples": [[t.predictive, t.aleatoric, t.epistemic] for t in triples]})
    return out


def label_generation(experiment: str, record, answer: Sequence[str]) -> int | None:
    if experiment == "factual":
        return detection.label_factual(record, answer)
    return detection.label_faithfulness(record, answer)


@dataclass
class FeatureRow:
    id: int
    features: np.ndarray
    label: int
    answer: list[str]
    entropies: list[float]


def build_feature_rows(experiment: str, records: Sequence, generations: Sequence[dict]) -> list[FeatureRow]:
    if len(records) != len(generations):
        raise DataError(f"{len(records)} records but {len(generations)} generations")
    rows = []
    for rec, gen in zip(records, generations):
        label = label_generation(experiment, rec, gen["answer"])
        if label is None:
            continue
        triples = [UncertaintyTriple(*t) for t in gen["triples"]]
        feats = summarize_sequence(triples).as_array()
        rows.append(FeatureRow(gen["id"], feats, label, list(gen["answer"]), [t.predictive for t in triples]))
    return rows


# -- dumps and tables ----------------------------------------------------------


def _f(x: float) -> str:
    return repr(float(x))


def write_feature_dump(path: Path, rows: Sequence[FeatureRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(("id", *FEATURE_NAMES, "label", "answer", "entropies")) + "\n")
        for r in rows:
            fh.write("\t".join([str(r.id), *map(_f, r.features), str(r.label), " ".join(r.answer),
                                ",".join(map(_f, r.entropies))]) + "\n")


def read_feature_dump(path: str | Path) -> list[FeatureRow]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[: 1 + len(FEATURE_NAMES)] != ["id", *FEATURE_NAMES]:
            raise DataError(f"{path}: not a feature dump")
        for lineno, line in enumerate(fh, 2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 6:
                raise DataError(f"{path}:{lineno}: expected at least 6 columns")
            try:
                feats = np.array([float(x) for x in parts[1:5]])
                ent = [float(x) for x in parts[7].split(",")] if len(parts) > 7 and parts[7] else []
                rows.append(FeatureRow(int(parts[0]), feats, int(parts[5]),
                                       parts[6].split() if len(parts) > 6 else [], ent))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return rows


def detect(rows: Sequence[FeatureRow], split_seed: int = 42, standardize: bool = False) -> dict:
    """80/20 split, fit every classifier kind, evaluate; plus majority baseline."""
    train_rows, test_rows = detection.split_80_20(list(rows), seed=split_seed)
    Xtr = np.array([r.features for r in train_rows])
    ytr = np.array([r.label for r in train_rows])
    Xte = np.array([r.features for r in test_rows])
    yte = np.array([r.label for r in test_rows])
    results = detection.fit_all(Xtr, ytr, Xte, yte, seed=split_seed, standardize=standardize)
    best, acc = detection.top1(results)
    return {"results": results, "top1_kind": best, "top1_accuracy": acc,
            "majority_baseline": detection.majority_baseline(ytr, yte),
            "n_train": len(train_rows), "n_test": len(test_rows),
            "hallucination_rate": float(np.mean([r.label for r in rows]))}


def format_classifier_table(tables: dict[str, dict]) -> str:
    """Rows are classifier kinds, columns are experiments (accuracy in %)."""
    cols = list(tables)
    width = max(12, *(len(c) + 2 for c in cols))
    lines = ["classifier".ljust(22) + "".join(c.rjust(width) for c in cols)]
    for kind in detection.KINDS:
        lines.append(kind.ljust(22) + "".join(f"{100 * tables[c]['results'][kind]['accuracy']:.1f}".rjust(width)
                                              for c in cols))
    lines.append("top-1".ljust(22) + "".join(f"{100 * tables[c]['top1_accuracy']:.1f}".rjust(width) for c in cols))
    lines.append("majority".ljust(22) + "".join(f"{100 * tables[c]['majority_baseline']:.1f}".rjust(width)
                                                for c in cols))
    lines.append("(SVC not implemented; top-1 is over the four kinds above)")
    return "\n".join(lines)


def classifier_records(tables: dict[str, dict]) -> list[dict]:
    out = []
    for exp, t in tables.items():
        for kind, res in t["results"].items():
            out.append({"experiment": exp, "classifier": kind, **res})
        out.append({"experiment": exp, "classifier": "majority", "accuracy": t["majority_baseline"]})
    return out


def entropy_report(rows: Sequence[FeatureRow], n_each: int = 3) -> str:
    """Per-token predictive entropy for hallucinated and clean examples."""
    lines = []
    for label, title in ((detection.HALLUCINATED, "hallucinated"), (detection.CLEAN, "clean")):
        chosen = [r for r in rows if r.label == label][:n_each]
        lines.append(f"== {title} ({sum(r.label == label for r in rows)} examples) ==")
        for r in chosen:
            ent = ", ".join(f"{e:.2f}" for e in r.entropies)
            lines.append(f"#{r.id}  answer: {' '.join(r.answer) or '<empty>'}")
            lines.append(f"    entropy (bits) per token: [{ent}]")
            lines.append(f"    first-token entropy: {r.features[0]:.2f}   average entropy: {r.features[2]:.2f}")
    return "\n".join(lines)


def predictive_metrics(cfg: RunConfig, model: EnsembleTransformer, records: Sequence) -> dict:
    gens = generate_answers(cfg, model, records)
    if cfg.experiment == "factual":
        acc = float(np.mean([g["answer"][:1] == [r.correct] for r, g in zip(records, gens)]))
        return {"mcq_accuracy": acc, "n": len(records)}
    gold = [list(r.answer) for r in records]
    em = float(np.mean([exact_match(g["answer"], y) for g, y in zip(gens, gold)]))
    f1 = float(np.mean([token_f1(g["answer"], y) for g, y in zip(gens, gold)]))
    return {"exact_match": em, "f1": f1, "n": len(records)}


def nll_table(cfg: RunConfig, base: EnsembleTransformer, ens: EnsembleTransformer, records: Sequence) -> dict:
    vocab = cfg.vocabulary()
    seqs = [render_prompt(r, vocab, with_answer=True) for r in records]
    return {"base": evaluate_nll(base, seqs), "ensemble": evaluate_nll(ens, seqs), "n": len(records)}


# -- orchestration -------------------------------------------------------------

MANIFEST_TEXT = __doc__.split("A run directory holds::", 1)[1].split("Every output", 1)[0]


def _write_json_lines(path: Path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _write_tables(out: Path, name: str, text: str, records: Sequence[dict], cfg: RunConfig) -> None:
    header = f"# fwens {__version__}  experiment={cfg.experiment}\n# run config: {json.dumps(cfg.to_dict(), sort_keys=True)}\n"
    (out / f"{name}.txt").write_text(header + text + "\n", encoding="utf-8")
    _write_json_lines(out / f"{name}.jsonl", records)


def write_run_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    obj = {**cfg.to_dict(), "code_version": __version__}
    (out / "run_config.json").write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class RunReport:
    out_dir: Path
    classifiers: dict = field(default_factory=dict)
    predictive: dict = field(default_factory=dict)
    nll: dict = field(default_factory=dict)
    bench: list = field(default_factory=list)
    params: list = field(default_factory=list)


def run_experiment(cfg: RunConfig) -> RunReport:
    """Run every stage, writing artefacts as they become available.

    On failure a ``FAILED`` file naming the stage is left next to the
    partial outputs and :class:`StageFailed` is raised.
    """
    out = Path(cfg.out_dir)
    write_run_config(cfg, out)
    (out / "MANIFEST").write_text(f"fwens {__version__} run directory\n{MANIFEST_TEXT}", encoding="utf-8")
    failed = out / "FAILED"
    if failed.exists():
        failed.unlink()
    report = RunReport(out)
    stage = "setup"
    try:
        if cfg.experiment == "bench":
            stage = "bench"
            _run_bench(cfg, out, report)
            return report
        stage = "gen-data"
        datasets = make_datasets(cfg)
        write_datasets(datasets, cfg.vocabulary(), out / "data")
        (out / "checkpoints").mkdir(exist_ok=True)
        metrics = out / "metrics.jsonl"
        metrics.write_text("", encoding="utf-8")
        stage = "pretrain"
        if cfg.base_checkpoint:
            base = checkpoint.load(cfg.base_checkpoint)
        else:
            base = pretrain_base(cfg, datasets["pretrain"], metrics)
        checkpoint.save(base, out / "checkpoints" / "base.fweb")
        stage = "finetune"
        ens = finetune_ensemble(cfg, base, datasets["finetune"], log_path=metrics)
        checkpoint.save(ens, out / "checkpoints" / "ensemble.fweb")
        stage = "generate"
        gens = generate_answers(cfg, ens, datasets["eval"])
        _write_json_lines(out / "generations.jsonl", gens)
        stage = "features"
        rows = build_feature_rows(cfg.experiment, datasets["eval"], gens)
        write_feature_dump(out / "features.tsv", rows)
        stage = "detect"
        tables = {cfg.experiment: detect(rows, cfg.split_seed, cfg.standardize)}
        if cfg.sample_baseline:
            single = finetune_ensemble(cfg, base, datasets["finetune"], M=1)
            sgens = sample_based_answers(cfg, single, datasets["eval"])
            srows = build_feature_rows(cfg.experiment, datasets["eval"], sgens)
            write_feature_dump(out / "features_sample_based.tsv", srows)
            tables[f"{cfg.experiment}/sample_based"] = detect(srows, cfg.split_seed, cfg.standardize)
        report.classifiers = tables
        _write_tables(out, "classifiers", format_classifier_table(tables), classifier_records(tables), cfg)
        stage = "predictive"
        heldout = datasets["heldout"]
        scored = heldout if cfg.experiment == "factual" else [r for r in heldout if r.answerable]
        report.predictive = predictive_metrics(cfg, ens, scored)
        text = "\n".join(f"{k:<14}{v:.4f}" if isinstance(v, float) else f"{k:<14}{v}" for k, v in report.predictive.items())
        _write_tables(out, "predictive", text, [report.predictive], cfg)
        stage = "nll"
        report.nll = nll_table(cfg, base, ens, heldout)
        text = f"{'model':<10}{'NLL (nats/token)':>18}\nbase{report.nll['base']:>24.4f}\nensemble{report.nll['ensemble']:>20.4f}"
        _write_tables(out, "nll", text, [report.nll], cfg)
        (out / "entropy_report.txt").write_text(entropy_report(rows) + "\n", encoding="utf-8")
    except FwensError as exc:
        failed.write_text(f"stage: {stage}\nerror: {exc}\n", encoding="utf-8")
        raise StageFailed(stage, exc) from exc
    except Exception as exc:
        failed.write_text(f"stage: {stage}\nerror: {type(exc).__name__}: {exc}\n", encoding="utf-8")
        raise
    return report


def _run_bench(cfg: RunConfig, out: Path, report: RunReport) -> None:
    from . import bench

    vocab = cfg.vocabulary()
    base = checkpoint.load(cfg.base_checkpoint) if cfg.base_checkpoint else EnsembleTransformer(cfg.model_config(M=1))
    records = gen_qa_dataset(8, cfg.data.unanswerable_frac, cfg.data.vocab, cfg.data.eval_seed, split="test")
    prompts = [render_prompt(r, vocab).ids for r in records]
    report.bench = bench.bench_inference(base, prompts=prompts, max_new=cfg.max_new_tokens, seed=cfg.seed)
    report.params = bench.bench_params(cfg.model_config(M=1))
    (out / "bench_inference.csv").write_text(bench.inference_csv(report.bench), encoding="utf-8")
    (out / "bench_params.csv").write_text(bench.params_csv(report.params), encoding="utf-8")
    _write_tables(out, "bench", bench.format_inference(report.bench) + "\n\n" + bench.format_params(report.params),
                  [r.to_dict() for r in report.bench] + report.params, cfg)

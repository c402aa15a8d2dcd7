"""Synthetic symbolic tasks: key/value extractive QA and multiple-choice fact recall.

QA prompt layout::

    BOS CTX k v v  k v v ... Q k ANS   ->   v v EOA   |   IDK EOA

MCQ prompt layout::

    BOS Q k k OPT A v v B v v C v v D v v ANS   ->   <label> EOA

Records serialise as one JSON object per line with a fixed field order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

SPECIAL = ("PAD", "BOS", "CTX", "Q", "ANS", "EOA", "IDK", "OPT")
LABELS = ("A", "B", "C", "D")
IDK = "IDK"


@dataclass(frozen=True)
class VocabSpec:
    n_keys: int = 24
    n_values: int = 24
    value_len: int = 2
    min_pairs: int = 3
    max_pairs: int = 8


class Vocabulary:
    """Fixed symbolic vocabulary: reserved tokens, option labels, keys, values."""

    def __init__(self, spec: VocabSpec = VocabSpec()):
        self.spec = spec
        self.tokens = list(SPECIAL) + list(LABELS)
        self.tokens += [f"k{i}" for i in range(spec.n_keys)]
        self.tokens += [f"v{i}" for i in range(spec.n_values)]
        if len(self.tokens) > 256:
            raise ConfigError(f"vocabulary of {len(self.tokens)} tokens exceeds 256")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.index[token]

    def encode(self, symbols: Iterable[str]) -> list[int]:
        try:
            return [self.index[s] for s in symbols]
        except KeyError as exc:
            raise DataError(f"symbol {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def is_value(self, token_id: int) -> bool:
        return self.tokens[int(token_id)].startswith("v")

    def manifest(self) -> dict:
        return {
            "tokens": self.tokens,
            "reserved": {t: self.index[t] for t in SPECIAL},
            "labels": {t: self.index[t] for t in LABELS},
            "spec": self.spec.__dict__,
        }

    def write_manifest(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2) + "\n", encoding="utf-8")


@dataclass
class QARecord:
    context: list[tuple[str, tuple[str, ...]]]
    question: str
    answer: tuple[str, ...]
    answerable: bool
    split: str = "train"

    def to_json(self) -> str:
        obj = {
            "context": [[k, list(v)] for k, v in self.context],
            "question": self.question,
            "answer": list(self.answer),
            "answerable": self.answerable,
            "split": self.split,
        }
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_dict(cls, obj: dict) -> "QARecord":
        return cls([(k, tuple(v)) for k, v in obj["context"]], obj["question"], tuple(obj["answer"]),
                   bool(obj["answerable"]), obj["split"])


@dataclass
class MCQRecord:
    question: tuple[str, ...]
    options: tuple[tuple[str, ...], ...]
    correct: str
    split: str = "train"
    seen: bool = True

    def to_json(self) -> str:
        obj = {
            "question": list(self.question),
            "options": [list(o) for o in self.options],
            "correct": self.correct,
            "split": self.split,
            "seen": self.seen,
        }
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_dict(cls, obj: dict) -> "MCQRecord":
        return cls(tuple(obj["question"]), tuple(tuple(o) for o in obj["options"]), obj["correct"],
                   obj["split"], bool(obj.get("seen", True)))

    @property
    def answer_value(self) -> tuple[str, ...]:
        return self.options[LABELS.index(self.correct)]


@dataclass
class TokenSequence:
    """Token ids plus a role mask (True at answer / generated positions)."""

    ids: np.ndarray
    n_prompt: int
    role: np.ndarray = field(default=None)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.role is None:
            self.role = np.arange(self.ids.size) >= self.n_prompt

    def __len__(self) -> int:
        return int(self.ids.size)

    @property
    def prompt(self) -> np.ndarray:
        return self.ids[: self.n_prompt]


# -- generators -------------------------------------------------------------


def _value(rng: np.random.Generator, spec: VocabSpec) -> tuple[str, ...]:
    return tuple(f"v{i}" for i in rng.integers(0, spec.n_values, size=spec.value_len))


def gen_qa_dataset(n: int, unanswerable_fraction: float, spec: VocabSpec = VocabSpec(),
                   seed: int = 50, split: str = "train") -> list[QARecord]:
    """``n`` key/value QA records, ``round(n * fraction)`` of them unanswerable."""
    if not 0.0 <= unanswerable_fraction <= 1.0:
        raise ConfigError(f"unanswerable_fraction must lie in [0, 1], got {unanswerable_fraction}")
    if spec.n_keys <= spec.max_pairs:
        raise ConfigError(
            f"n_keys={spec.n_keys} must exceed max_pairs={spec.max_pairs} so an absent key always exists")
    if not 1 <= spec.min_pairs <= spec.max_pairs:
        raise ConfigError("need 1 <= min_pairs <= max_pairs")
    rng = np.random.default_rng(seed)
    n_unans = int(round(n * unanswerable_fraction))
    unans = np.zeros(n, dtype=bool)
    unans[rng.permutation(n)[:n_unans]] = True
    records = []
    for i in range(n):
        n_pairs = int(rng.integers(spec.min_pairs, spec.max_pairs + 1))
        keys = rng.choice(spec.n_keys, size=n_pairs, replace=False)
        context = [(f"k{k}", _value(rng, spec)) for k in keys]
        if unans[i]:
            absent = np.setdiff1d(np.arange(spec.n_keys), keys)
            question = f"k{int(rng.choice(absent))}"
            records.append(QARecord(context, question, (IDK,), False, split))
        else:
            j = int(rng.integers(n_pairs))
            records.append(QARecord(context, context[j][0], context[j][1], True, split))
    return records


def gen_mcq_dataset(n_facts: int, n_questions: int, seed: int = 42, split: str = "train",
                    held_out_fraction: float = 0.25, spec: VocabSpec = VocabSpec()) -> list[MCQRecord]:
    """Multiple-choice questions over a random fact table.

    The table (and which facts are held out) depends only on ``seed``;
    ``split`` picks the question stream. Train questions only ask in-training
    facts; test questions are drawn from all facts.
    """
    if n_facts < 8:
        raise ConfigError(f"need at least 8 facts, got {n_facts}")
    table = fact_table(n_facts, seed, spec)
    n_held = int(round(n_facts * held_out_fraction))
    held = set(np.random.default_rng([seed, 1]).permutation(n_facts)[:n_held].tolist())
    pool = [i for i in range(n_facts) if i not in held] if split == "train" else list(range(n_facts))
    rng = np.random.default_rng([seed, 2, hash_split(split)])
    records = []
    for _ in range(n_questions):
        f = pool[int(rng.integers(len(pool)))]
        key, value = table[f]
        others = [table[j][1] for j in range(n_facts) if table[j][1] != value]
        picks = rng.choice(len(others), size=3, replace=False)
        options = [value] + [others[p] for p in picks]
        order = rng.permutation(4)
        options = tuple(options[o] for o in order)
        correct = LABELS[int(np.flatnonzero(order == 0)[0])]
        records.append(MCQRecord(key, options, correct, split, f not in held))
    return records


def fact_table(n_facts: int, seed: int, spec: VocabSpec = VocabSpec()) -> list[tuple[tuple[str, ...], tuple[str, ...]]]:
    """Distinct two-key questions mapped to distinct values."""
    n_key_pairs = spec.n_keys * spec.n_keys
    n_vals = spec.n_values ** spec.value_len
    if n_facts > min(n_key_pairs, n_vals):
        raise ConfigError(f"vocabulary too small for {n_facts} distinct facts")
    rng = np.random.default_rng([seed, 0])
    keys = rng.choice(n_key_pairs, size=n_facts, replace=False)
    vals = rng.choice(n_vals, size=n_facts, replace=False)
    table = []
    for k, v in zip(keys, vals):
        kq = (f"k{k // spec.n_keys}", f"k{k % spec.n_keys}")
        digits = np.unravel_index(int(v), (spec.n_values,) * spec.value_len)
        table.append((kq, tuple(f"v{int(d)}" for d in digits)))
    return table


def hash_split(split: str) -> int:
    return {"train": 0, "val": 1, "test": 2}.get(split, sum(map(ord, split)))


def ood_split(records: Sequence[QARecord]) -> tuple[list[QARecord], list[QARecord]]:
    """Answerable records for training, unanswerable ones for evaluation."""
    train = [r for r in records if r.answerable]
    evaluation = [r for r in records if not r.answerable]
    if not train or not evaluation:
        raise DataError(f"ood_split needs both classes, got {len(train)} answerable / {len(evaluation)} unanswerable")
    return train, evaluation


# -- rendering --------------------------------------------------------------


def render_prompt(record, vocab: Vocabulary, with_answer: bool = False, restate: bool = False) -> TokenSequence:
    """Token layout for a QA or MCQ record.

    ``restate`` prefixes the answer with the question key(s), the answer
    style of the broad pre-training corpus.
    """
    if isinstance(record, QARecord):
        syms = ["BOS", "CTX"]
        for k, v in record.context:
            syms.append(k)
            syms.extend(v)
        syms += ["Q", record.question, "ANS"]
        answer = list(record.answer)
        question = [record.question]
    elif isinstance(record, MCQRecord):
        syms = ["BOS", "Q", *record.question, "OPT"]
        for label, opt in zip(LABELS, record.options):
            syms.append(label)
            syms.extend(opt)
        syms.append("ANS")
        answer = [record.correct]
        question = list(record.question)
    else:
        raise DataError(f"cannot render {type(record).__name__}")
    n_prompt = len(syms)
    if with_answer:
        syms += (question if restate else []) + answer + ["EOA"]
    return TokenSequence(vocab.encode(syms), n_prompt)


def parse_qa_prompt(ids: Sequence[int], vocab: Vocabulary) -> tuple[list[tuple[str, tuple[str, ...]]], str]:
    """Inverse of :func:`render_prompt` for QA prompts: (context, question)."""
    syms = vocab.decode(ids)
    if syms[:2] != ["BOS", "CTX"] or "Q" not in syms:
        raise DataError("not a QA prompt")
    q = syms.index("Q")
    body = syms[2:q]
    context = []
    i = 0
    while i < len(body):
        j = i + 1
        while j < len(body) and body[j].startswith("v"):
            j += 1
        context.append((body[i], tuple(body[i + 1: j])))
        i = j
    return context, syms[q + 1]


def answer_symbols(tokens: Sequence[int], vocab: Vocabulary) -> list[str]:
    """Generated symbols up to (excluding) the first EOA."""
    syms = vocab.decode(tokens)
    return syms[: syms.index("EOA")] if "EOA" in syms else syms


# -- io ---------------------------------------------------------------------


def write_records(path: str | Path, records: Iterable) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path: str | Path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            out.append(QARecord.from_dict(obj) if "context" in obj else MCQRecord.from_dict(obj))
    return out

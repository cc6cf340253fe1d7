"""Synthetic key -> value span extraction task.

A passage is a shuffled run of (key, value span) pairs, e.g.::

    k7 v3 v9 k2 v1 k11 v4 v4 v0

The question names one key (optionally followed by ``?``) and the answer is
the value span that follows that key in the passage. Finding the start needs
the question, so the task genuinely depends on question-passage attention.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .vocab import Vocab, build_vocab


@dataclass(frozen=True)
class SyntheticTaskSpec:
    n_keys: int = 12
    n_values: int = 12
    pairs_range: tuple[int, int] = (2, 4)
    span_range: tuple[int, int] = (1, 2)
    n_train: int = 4000
    n_dev: int = 400
    tune_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.pairs_range
        if not 1 <= lo <= hi <= self.n_keys:
            raise ValueError("pairs_range must satisfy 1 <= lo <= hi <= n_keys")
        slo, shi = self.span_range
        if not 1 <= slo <= shi:
            raise ValueError("span_range must satisfy 1 <= lo <= hi")

    @property
    def max_passage_len(self) -> int:
        return self.pairs_range[1] * (1 + self.span_range[1])

    @property
    def max_question_len(self) -> int:
        return 2

    def vocabulary(self) -> Vocab:
        corpus = [f"k{i}" for i in range(self.n_keys)] + [f"v{i}" for i in range(self.n_values)]
        return build_vocab(corpus + ["?"])


@dataclass(frozen=True)
class Example:
    id: str
    question: tuple[str, ...]
    passage: tuple[str, ...]
    answer_start: int
    answer_end: int  # inclusive

    def to_json(self) -> str:
        rec = asdict(self)
        rec["question"] = list(self.question)
        rec["passage"] = list(self.passage)
        return json.dumps(rec, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "Example":
        rec = json.loads(line)
        return cls(str(rec["id"]), tuple(rec["question"]), tuple(rec["passage"]),
                   int(rec["answer_start"]), int(rec["answer_end"]))


def _make_example(rng: np.random.Generator, spec: SyntheticTaskSpec, ident: str) -> Example:
    n_pairs = int(rng.integers(spec.pairs_range[0], spec.pairs_range[1] + 1))
    keys = rng.choice(spec.n_keys, size=n_pairs, replace=False)
    passage: list[str] = []
    spans = {}
    for key in keys:
        length = int(rng.integers(spec.span_range[0], spec.span_range[1] + 1))
        values = rng.integers(0, spec.n_values, size=length)
        passage.append(f"k{key}")
        spans[int(key)] = (len(passage), len(passage) + length - 1)
        passage.extend(f"v{v}" for v in values)
    target = int(keys[int(rng.integers(n_pairs))])
    question = (f"k{target}", "?") if rng.random() < 0.5 else (f"k{target}",)
    start, end = spans[target]
    return Example(ident, question, tuple(passage), start, end)


def generate(spec: SyntheticTaskSpec) -> dict[str, list[Example]]:
    """Build train/tune/dev splits; the tune split is carved out of train."""
    rng = np.random.default_rng(spec.seed)
    pool = [_make_example(rng, spec, f"ex{i:06d}") for i in range(spec.n_train)]
    dev = [_make_example(rng, spec, f"dev{i:06d}") for i in range(spec.n_dev)]
    n_tune = int(round(spec.tune_fraction * len(pool)))
    order = rng.permutation(len(pool))
    tune_idx = set(order[:n_tune].tolist())
    train = [ex for i, ex in enumerate(pool) if i not in tune_idx]
    tune = [ex for i, ex in enumerate(pool) if i in tune_idx]
    return {"train": train, "tune": tune, "dev": dev}


def check_example(ex: Example) -> None:
    """The gold span must be exactly the values after the question's key."""
    key = ex.question[0]
    if ex.passage.count(key) != 1:
        raise ValueError(f"{ex.id}: key {key} occurs {ex.passage.count(key)} times")
    pos = ex.passage.index(key)
    stop = pos + 1
    while stop < len(ex.passage) and ex.passage[stop].startswith("v"):
        stop += 1
    if (ex.answer_start, ex.answer_end) != (pos + 1, stop - 1):
        raise ValueError(f"{ex.id}: gold span does not match the key's values")


def write_jsonl(examples: Iterable[Example], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")


def read_jsonl(path: Path) -> list[Example]:
    with open(path, encoding="utf-8") as fh:
        return [Example.from_json(line) for line in fh if line.strip()]


def gen_data(spec: SyntheticTaskSpec, out_dir: Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    splits = generate(spec)
    paths = {}
    for name, examples in splits.items():
        for ex in examples:
            check_example(ex)
        paths[name] = out_dir / f"{name}.jsonl"
        write_jsonl(examples, paths[name])
    spec_rec = asdict(spec)
    (out_dir / "spec.json").write_text(json.dumps(spec_rec, sort_keys=True, indent=1) + "\n")
    spec.vocabulary().save(out_dir / "vocab.txt")
    return paths


@dataclass(frozen=True)
class EncodedExample:
    question: tuple[int, ...]
    passage: tuple[int, ...]
    start: int
    end: int


def encode_examples(examples: Sequence[Example], vocab: Vocab) -> list[EncodedExample]:
    return [EncodedExample(tuple(vocab.encode(ex.question)), tuple(vocab.encode(ex.passage)),
                           ex.answer_start, ex.answer_end) for ex in examples]

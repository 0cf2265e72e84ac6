"""Loading, validation, splitting, and statistics for multi-annotator datasets.

A dataset is a flat list of annotations: each record pairs one text with one
annotator's label. The on-disk format is JSON Lines (one annotation per line,
UTF-8) with string labels that must resolve against a declared label schema.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class CorpusError(ValueError):
    """Raised for malformed files, schema violations, and invalid splits."""


@dataclass(frozen=True)
class AnnotatedExample:
    """One (text, annotator, label) triple; the atomic training/eval unit."""

    example_id: str
    text: str
    annotator_id: str
    label: int
    demographics: Optional[dict] = None


@dataclass
class Dataset:
    examples: list[AnnotatedExample]
    label_names: list[str]
    annotator_ids: list[str]
    name: str = "dataset"

    def __post_init__(self):
        seen_pairs = set()
        known = set(self.annotator_ids)
        appearing = []
        appearing_set = set()
        for ex in self.examples:
            if not 0 <= ex.label < len(self.label_names):
                raise CorpusError(
                    f"label index {ex.label} out of range for {len(self.label_names)} labels"
                )
            if ex.annotator_id not in known:
                raise CorpusError(f"annotator {ex.annotator_id!r} missing from registry")
            key = (ex.example_id, ex.annotator_id)
            if key in seen_pairs:
                raise CorpusError(f"duplicate annotation {key}")
            seen_pairs.add(key)
            if ex.annotator_id not in appearing_set:
                appearing_set.add(ex.annotator_id)
                appearing.append(ex.annotator_id)
        if appearing_set != known:
            raise CorpusError("annotator registry does not match annotators in examples")

    @classmethod
    def from_examples(cls, examples, label_names, name="dataset"):
        """Build a dataset with the annotator registry in first-appearance order."""
        ids = []
        seen = set()
        for ex in examples:
            if ex.annotator_id not in seen:
                seen.add(ex.annotator_id)
                ids.append(ex.annotator_id)
        return cls(list(examples), list(label_names), ids, name)

    @property
    def n_annotators(self) -> int:
        return len(self.annotator_ids)

    @property
    def n_labels(self) -> int:
        return len(self.label_names)

    def __len__(self) -> int:
        return len(self.examples)


@dataclass
class Split:
    train: Dataset
    test: Dataset
    dev: Optional[Dataset] = None
    kind: str = "annotation"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("annotation", "annotator"):
            raise CorpusError(f"unknown split kind {self.kind!r}")
        train_ann = set(self.train.annotator_ids)
        test_ann = set(self.test.annotator_ids)
        if self.kind == "annotation" and not test_ann <= train_ann:
            raise CorpusError("annotation split: test annotators must appear in train")
        if self.kind == "annotator" and train_ann & test_ann:
            raise CorpusError("annotator split: train and test annotators must be disjoint")


def _parse_record(obj, label_names, line_no):
    if not isinstance(obj, dict):
        raise CorpusError(f"line {line_no}: record is not an object")
    for key in ("example_id", "text", "annotator_id", "label"):
        if key not in obj:
            raise CorpusError(f"line {line_no}: missing field {key!r}")
    label = obj["label"]
    if label not in label_names:
        raise CorpusError(f"line {line_no}: unknown label {label!r}")
    demo = obj.get("demographics")
    if demo is not None:
        if not isinstance(demo, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in demo.items()
        ):
            raise CorpusError(f"line {line_no}: demographics must map strings to strings")
    return AnnotatedExample(
        example_id=str(obj["example_id"]),
        text=str(obj["text"]),
        annotator_id=str(obj["annotator_id"]),
        label=label_names.index(label),
        demographics=demo,
    )


def load_dataset(path, label_names, name=None) -> Dataset:
    """Load a JSONL annotation file against a declared label schema.

    Registries come out in first-appearance order so that row indices into
    the embedding matrices are reproducible across runs.
    """
    label_names = list(label_names)
    examples = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise CorpusError(f"line {line_no}: malformed JSON ({err.msg})") from err
            examples.append(_parse_record(obj, label_names, line_no))
    if name is None:
        name = str(path)
    return Dataset.from_examples(examples, label_names, name)


def write_dataset(dataset: Dataset, path) -> None:
    """Write a dataset back to JSONL; load_dataset round-trips it record-for-record."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in dataset.examples:
            record = {
                "example_id": ex.example_id,
                "text": ex.text,
                "annotator_id": ex.annotator_id,
                "label": dataset.label_names[ex.label],
            }
            if ex.demographics is not None:
                record["demographics"] = ex.demographics
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")


def write_manifest(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {"name": dataset.name, "label_names": dataset.label_names},
            fh,
            ensure_ascii=False,
            sort_keys=True,
            indent=2,
        )
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if "label_names" not in obj:
        raise CorpusError(f"manifest {path} lacks label_names")
    return obj


def _positions_by_annotator(dataset: Dataset) -> dict[str, list[int]]:
    by_ann: dict[str, list[int]] = {a: [] for a in dataset.annotator_ids}
    for pos, ex in enumerate(dataset.examples):
        by_ann[ex.annotator_id].append(pos)
    return by_ann


def _subset(dataset: Dataset, positions, suffix) -> Dataset:
    keep = set(positions)
    examples = [ex for pos, ex in enumerate(dataset.examples) if pos in keep]
    return Dataset.from_examples(examples, dataset.label_names, f"{dataset.name}-{suffix}")


def make_annotation_split(dataset: Dataset, train_frac: float, seed: int,
                          dev_frac: float = 0.0) -> Split:
    """Split each annotator's annotations, keeping every annotator on both sides.

    Per annotator the examples are shuffled with one seeded generator
    (annotators visited in registry order) and the first ceil(train_frac * K)
    go to train. dev_frac, if nonzero, carves a dev set out of the train
    portion per annotator.
    """
    if not 0.0 < train_frac < 1.0:
        raise CorpusError("train_frac must lie strictly between 0 and 1")
    if not 0.0 <= dev_frac < 1.0:
        raise CorpusError("dev_frac must lie in [0, 1)")
    by_ann = _positions_by_annotator(dataset)
    for ann, positions in by_ann.items():
        if len(positions) < 2:
            raise CorpusError(f"annotator {ann!r} has a single annotation; filter it first")
    rng = np.random.default_rng(seed)
    train_pos: list[int] = []
    dev_pos: list[int] = []
    test_pos: list[int] = []
    for ann in dataset.annotator_ids:
        positions = by_ann[ann]
        order = rng.permutation(len(positions))
        shuffled = [positions[i] for i in order]
        n_train = math.ceil(train_frac * len(positions))
        head, tail = shuffled[:n_train], shuffled[n_train:]
        n_dev = int(dev_frac * len(head))
        if n_dev >= len(head):
            n_dev = len(head) - 1
        if n_dev > 0:
            dev_pos.extend(head[len(head) - n_dev:])
            head = head[:len(head) - n_dev]
        train_pos.extend(head)
        test_pos.extend(tail)
    dev = _subset(dataset, dev_pos, "dev") if dev_pos else None
    return Split(
        train=_subset(dataset, train_pos, "train"),
        test=_subset(dataset, test_pos, "test"),
        dev=dev,
        kind="annotation",
        seed=seed,
    )


def make_annotator_split(dataset: Dataset, train_frac: float, seed: int) -> Split:
    """Split by annotator: train and test annotator sets are disjoint.

    With N=3 and train_frac=0.7 this yields 2 train / 1 test annotators, so
    the train count is floor(train_frac * N) clamped to [1, N-1].
    """
    if not 0.0 < train_frac < 1.0:
        raise CorpusError("train_frac must lie strictly between 0 and 1")
    n = dataset.n_annotators
    if n < 2:
        raise CorpusError("annotator split needs at least 2 annotators")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = min(max(int(train_frac * n), 1), n - 1)
    train_ann = {dataset.annotator_ids[i] for i in order[:n_train]}
    by_ann = _positions_by_annotator(dataset)
    train_pos = [p for a in dataset.annotator_ids if a in train_ann for p in by_ann[a]]
    test_pos = [p for a in dataset.annotator_ids if a not in train_ann for p in by_ann[a]]
    return Split(
        train=_subset(dataset, train_pos, "train"),
        test=_subset(dataset, test_pos, "test"),
        dev=None,
        kind="annotator",
        seed=seed,
    )


def drop_unseen_annotators(dataset: Dataset, known_annotators) -> Dataset:
    """Keep only annotations whose annotator appears in known_annotators."""
    known = set(known_annotators)
    kept = [ex for ex in dataset.examples if ex.annotator_id in known]
    return Dataset.from_examples(kept, dataset.label_names, dataset.name + "-seen")


@dataclass
class StatisticsReport:
    """Per-annotator volumes and the distinct-label disagreement histogram."""

    annotations_per_annotator: dict[str, int]
    distinct_labels_per_example: dict[str, int]
    disagreement_histogram: dict[int, int]
    label_usage: dict[str, int]
    n_examples: int = field(default=0)
    n_annotations: int = field(default=0)

    def to_dict(self) -> dict:
        return {
            "n_examples": self.n_examples,
            "n_annotations": self.n_annotations,
            "annotations_per_annotator": dict(sorted(self.annotations_per_annotator.items())),
            "disagreement_histogram": {
                str(k): v for k, v in sorted(self.disagreement_histogram.items())
            },
            "label_usage": self.label_usage,
        }


def dataset_statistics(dataset: Dataset) -> StatisticsReport:
    """Count annotations per annotator and distinct labels per example."""
    if not dataset.examples:
        raise CorpusError("empty dataset")
    per_ann: dict[str, int] = {a: 0 for a in dataset.annotator_ids}
    labels_by_example: dict[str, set[int]] = {}
    label_usage = {name: 0 for name in dataset.label_names}
    for ex in dataset.examples:
        per_ann[ex.annotator_id] += 1
        labels_by_example.setdefault(ex.example_id, set()).add(ex.label)
        label_usage[dataset.label_names[ex.label]] += 1
    distinct = {eid: len(labels) for eid, labels in labels_by_example.items()}
    histogram: dict[int, int] = {}
    for count in distinct.values():
        histogram[count] = histogram.get(count, 0) + 1
    return StatisticsReport(
        annotations_per_annotator=per_ann,
        distinct_labels_per_example=distinct,
        disagreement_histogram=histogram,
        label_usage=label_usage,
        n_examples=len(distinct),
        n_annotations=len(dataset.examples),
    )

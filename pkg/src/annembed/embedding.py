"""Annotator and annotation embeddings with bilinear scalar gating.

Each annotator owns a learnable row; each label owns a learnable row. An
annotator's annotation embedding is the average of the label rows for their
other training annotations (leave-one-out during training, full training
average at test time). Both embeddings are scaled by bilinear gate weights
against the sentence embedding and added to the first ([CLS]) row of the
token embedding matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor
from .tensor import Node

INIT_STD = 0.02


class CombinationMode(str, Enum):
    TEXT_ONLY = "text_only"
    TEXT_PLUS_ANNOTATION = "text_plus_annotation"
    TEXT_PLUS_ANNOTATOR = "text_plus_annotator"
    TEXT_PLUS_BOTH = "text_plus_both"

    @property
    def uses_annotation(self) -> bool:
        return self in (CombinationMode.TEXT_PLUS_ANNOTATION, CombinationMode.TEXT_PLUS_BOTH)

    @property
    def uses_annotator(self) -> bool:
        return self in (CombinationMode.TEXT_PLUS_ANNOTATOR, CombinationMode.TEXT_PLUS_BOTH)


@dataclass
class EmbeddingBank:
    """Learnable annotator rows, label rows, and the three gate matrices."""

    annotator_rows: Node   # N x H
    label_rows: Node       # M x H
    w_sentence: Node       # H x H
    w_annotator: Node      # H x H
    w_annotation: Node     # H x H
    hidden: int

    @classmethod
    def init(cls, n_annotators: int, n_labels: int, hidden: int,
             rng: np.random.Generator) -> "EmbeddingBank":
        def normal(rows, cols):
            return tensor.parameter(rng.normal(0.0, INIT_STD, size=(rows, cols)))

        return cls(
            annotator_rows=normal(n_annotators, hidden),
            label_rows=normal(n_labels, hidden),
            w_sentence=normal(hidden, hidden),
            w_annotator=normal(hidden, hidden),
            w_annotation=normal(hidden, hidden),
            hidden=hidden,
        )

    def named_parameters(self, mode: CombinationMode) -> dict[str, Node]:
        """Parameters that receive gradient updates under the given mode."""
        params: dict[str, Node] = {}
        if mode.uses_annotator:
            params["bank.annotator_rows"] = self.annotator_rows
            params["bank.w_annotator"] = self.w_annotator
        if mode.uses_annotation:
            params["bank.label_rows"] = self.label_rows
            params["bank.w_annotation"] = self.w_annotation
        if mode.uses_annotator or mode.uses_annotation:
            params["bank.w_sentence"] = self.w_sentence
        return params


class AnnotationIndex:
    """Per-annotator training annotations: ordered ids, labels, and counts."""

    def __init__(self, dataset, n_labels: int):
        self.n_labels = n_labels
        self.examples: dict[str, list[tuple[str, int]]] = {}
        self.counts: dict[str, np.ndarray] = {}
        self._label_of: dict[tuple[str, str], int] = {}
        for ex in dataset.examples:
            self.examples.setdefault(ex.annotator_id, []).append((ex.example_id, ex.label))
            if ex.annotator_id not in self.counts:
                self.counts[ex.annotator_id] = np.zeros(n_labels)
            self.counts[ex.annotator_id][ex.label] += 1.0
            self._label_of[(ex.annotator_id, ex.example_id)] = ex.label

    def size(self, annotator_id: str) -> int:
        return len(self.examples.get(annotator_id, ()))

    def label_of(self, annotator_id: str, example_id: str) -> int:
        return self._label_of[(annotator_id, example_id)]

    def train_coefficients(self, annotator_id: str, example_id: str) -> np.ndarray:
        """Label-row weights for the leave-one-out average, as a 1 x M row.

        The current example's own label is excluded; an annotator with no
        other annotations falls back to the uniform label average.
        """
        counts = self.counts.get(annotator_id)
        if counts is None:
            return np.full((1, self.n_labels), 1.0 / self.n_labels)
        k = counts.sum()
        coeff = counts.copy()
        coeff[self.label_of(annotator_id, example_id)] -= 1.0
        if k <= 1:
            return np.full((1, self.n_labels), 1.0 / self.n_labels)
        return (coeff / (k - 1.0)).reshape(1, -1)

    def test_coefficients(self, annotator_id: str) -> np.ndarray:
        """Label-row weights averaging all training annotations, as 1 x M.

        Annotators unseen in training fall back to the uniform label average.
        """
        counts = self.counts.get(annotator_id)
        if counts is None or counts.sum() == 0:
            return np.full((1, self.n_labels), 1.0 / self.n_labels)
        return (counts / counts.sum()).reshape(1, -1)


def annotation_embedding_train(bank: EmbeddingBank, index: AnnotationIndex,
                               annotator_id: str, example_id: str) -> Node:
    """Mean of the label rows for the annotator's other training annotations."""
    coeff = index.train_coefficients(annotator_id, example_id)
    return tensor.matmul(tensor.constant(coeff), bank.label_rows)


def annotation_embedding_test(bank: EmbeddingBank, index: AnnotationIndex,
                              annotator_id: str) -> Node:
    """Mean of the label rows over all of the annotator's training annotations."""
    coeff = index.test_coefficients(annotator_id)
    return tensor.matmul(tensor.constant(coeff), bank.label_rows)


def sentence_embedding(token_embeddings: Node) -> Node:
    """Column-wise mean of the token embedding rows (the [CLS] row included)."""
    if token_embeddings.value.shape[0] < 1:
        raise ValueError("sentence embedding of an empty sequence")
    return tensor.row_mean(token_embeddings)


def gate_weight(w_sentence: Node, w_other: Node, e_sentence: Node, e_other: Node) -> Node:
    """Bilinear gate (W_s e_s^T)^T (W_x e_x^T), a differentiable 1x1 scalar."""
    left = tensor.transpose(tensor.matmul(w_sentence, tensor.transpose(e_sentence)))
    right = tensor.matmul(w_other, tensor.transpose(e_other))
    return tensor.matmul(left, right)


def combine(mode: CombinationMode, token_embeddings: Node, annotation_emb: Node | None,
            annotator_emb: Node | None, bank: EmbeddingBank | None) -> Node:
    """Add the gated embeddings to the [CLS] row; other rows pass through.

    TEXT_ONLY returns the token embeddings unchanged. The gates are computed
    against the sentence embedding of the raw summed token embeddings, before
    any layer norm or dropout.
    """
    if mode == CombinationMode.TEXT_ONLY:
        return token_embeddings
    if bank is None:
        raise ValueError(f"mode {mode.value} requires an embedding bank")
    if mode.uses_annotation and annotation_emb is None:
        raise ValueError(f"mode {mode.value} requires an annotation embedding")
    if mode.uses_annotator and annotator_emb is None:
        raise ValueError(f"mode {mode.value} requires an annotator embedding")

    rows = token_embeddings.value.shape[0]
    e_sent = sentence_embedding(token_embeddings)
    cls_row = tensor.gather_rows(token_embeddings, [0])
    if mode.uses_annotation:
        alpha_n = gate_weight(bank.w_sentence, bank.w_annotation, e_sent, annotation_emb)
        cls_row = tensor.add(cls_row, tensor.scalar_mul(alpha_n, annotation_emb))
    if mode.uses_annotator:
        alpha_a = gate_weight(bank.w_sentence, bank.w_annotator, e_sent, annotator_emb)
        cls_row = tensor.add(cls_row, tensor.scalar_mul(alpha_a, annotator_emb))
    if rows == 1:
        return cls_row
    rest = tensor.gather_rows(token_embeddings, list(range(1, rows)))
    return tensor.concat_rows(cls_row, rest)


@dataclass
class OverheadReport:
    added_parameters: int
    base_parameters: int | None
    ratio: float | None
    budget: int
    over_budget: bool

    def to_dict(self) -> dict:
        return {
            "added_parameters": self.added_parameters,
            "base_parameters": self.base_parameters,
            "ratio": self.ratio,
            "budget": self.budget,
            "over_budget": self.over_budget,
        }


def parameter_overhead(n_annotators: int, n_labels: int, hidden: int,
                       mode: CombinationMode, base_parameters: int | None = None,
                       budget: int = 1_000_000) -> OverheadReport:
    """Closed-form count of parameters the mechanism adds on top of the encoder.

    Both embedding tables plus three H x H gate matrices in the full mode;
    the single-embedding modes drop the unused table and its gate. The
    report flags counts exceeding the advertised budget (default one
    million) since large hidden sizes blow past it on the gate matrices
    alone.
    """
    if n_annotators <= 0 or n_labels <= 0 or hidden <= 0:
        raise ValueError("sizes must be positive")
    if mode == CombinationMode.TEXT_ONLY:
        added = 0
    elif mode == CombinationMode.TEXT_PLUS_ANNOTATOR:
        added = n_annotators * hidden + 2 * hidden * hidden
    elif mode == CombinationMode.TEXT_PLUS_ANNOTATION:
        added = n_labels * hidden + 2 * hidden * hidden
    else:
        added = (n_annotators + n_labels) * hidden + 3 * hidden * hidden
    ratio = added / base_parameters if base_parameters else None
    return OverheadReport(
        added_parameters=added,
        base_parameters=base_parameters,
        ratio=ratio,
        budget=budget,
        over_budget=added > budget,
    )

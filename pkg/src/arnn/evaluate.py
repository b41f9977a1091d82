"""Ranking metrics, the item-to-item baseline, and test-set evaluation.

Evaluation walks every test session left to right; from the second step on
the system scores all items conditioned on the observed prefix only.  The
recurrent systems carry hidden state within a session, the item-KNN and
context-encoder baselines condition on the previous step alone.  Ties in
the ranking break deterministically by ascending item index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .batching import SessionParallelIterator
from .data import SessionDataset
from .errors import EvaluationError
from .models import ArnnModel, GruSessionModel, PnnEncoder


# ---------------------------------------------------------------------------
# metrics


def recall_at_k(ranked_lists, targets, k: int) -> float:
    """Fraction of steps whose target appears in the step's top-k list."""
    if len(ranked_lists) == 0 or len(ranked_lists) != len(targets):
        raise EvaluationError(
            f"need matching non-empty lists, got {len(ranked_lists)} lists "
            f"and {len(targets)} targets"
        )
    hits = 0
    for items, target in zip(ranked_lists, targets):
        if len(set(items)) > k:
            raise EvaluationError(f"ranked list has more than k={k} distinct items")
        if target in items:
            hits += 1
    return hits / len(targets)


def mrr_at_k(ranked_lists, targets, k: int) -> float:
    """Mean reciprocal rank of the target within top-k, zero on miss."""
    if len(ranked_lists) == 0 or len(ranked_lists) != len(targets):
        raise EvaluationError(
            f"need matching non-empty lists, got {len(ranked_lists)} lists "
            f"and {len(targets)} targets"
        )
    total = 0.0
    for items, target in zip(ranked_lists, targets):
        if len(set(items)) > k:
            raise EvaluationError(f"ranked list has more than k={k} distinct items")
        items = list(items)
        if target in items:
            total += 1.0 / (items.index(target) + 1)
    return total / len(targets)


def rank_of(scores: np.ndarray, target: int) -> int:
    """1-based rank of the target under descending score, ties by index."""
    s = scores[target]
    better = int(np.sum(scores > s))
    equal_before = int(np.sum(scores[:target] == s))
    return better + equal_before + 1


def top_k_items(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best scores, descending, ties by ascending index."""
    order = np.argsort(-scores, kind="stable")
    return order[: min(k, len(scores))]


# ---------------------------------------------------------------------------
# item-KNN baseline


@dataclass
class ItemKnnIndex:
    """Cosine similarity over binary session-incidence vectors, top-M per item."""

    sim: np.ndarray  # [V,V], zero diagonal, zero outside each row's top-M
    lam: float
    top_m: int

    def scores(self, prev_item: int) -> np.ndarray:
        return self.sim[prev_item]


def build_itemknn(train: SessionDataset, lam: float = 20.0, top_m: int = 100
                  ) -> ItemKnnIndex:
    """sim(i,j) = |sessions with both| / (sqrt(n_i) * sqrt(n_j) + lam)."""
    if not train.sessions:
        raise EvaluationError("cannot build an item index from an empty dataset")
    n_items = len(train.schema.item_vocabulary)
    incidence = np.zeros((len(train.sessions), n_items))
    for row, session in enumerate(train.sessions):
        for _, item in session.steps:
            incidence[row, item] = 1.0
    co = incidence.T @ incidence
    counts = np.diag(co).copy()
    denom = np.sqrt(counts)[:, None] * np.sqrt(counts)[None, :] + lam
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(denom > 0, co / denom, 0.0)
    np.fill_diagonal(sim, 0.0)
    if top_m < n_items:
        kept = np.zeros_like(sim)
        for i in range(n_items):
            top = np.argsort(-sim[i], kind="stable")[:top_m]
            kept[i, top] = sim[i, top]
        sim = kept
    return ItemKnnIndex(sim=sim, lam=lam, top_m=top_m)


# ---------------------------------------------------------------------------
# system walkers


class _KnnScorer:
    name = "itemknn"

    def __init__(self, index: ItemKnnIndex):
        self.index = index

    def begin(self, n_lanes: int) -> None:
        pass

    def score(self, batch, active: np.ndarray) -> np.ndarray:
        return self.index.sim[batch.prev_items[active]]


class _GruScorer:
    name = "gru"

    def __init__(self, model: GruSessionModel):
        self.model = model

    def begin(self, n_lanes: int) -> None:
        self.model.reset(n_lanes)

    def score(self, batch, active: np.ndarray) -> np.ndarray:
        h = self.model.step(batch.prev_items[active],
                            batch.session_boundary[active], lane_ids=active)
        return self.model.scores(h).data


class _PnnScorer:
    name = "pnn"

    def __init__(self, model: PnnEncoder):
        self.model = model

    def begin(self, n_lanes: int) -> None:
        pass

    def score(self, batch, active: np.ndarray) -> np.ndarray:
        contexts = [batch.contexts[lane] for lane in active]
        c = self.model.encode(contexts, batch.prev_items[active], training=False)
        return self.model.scores(c).data


class _ArnnScorer:
    name = "arnn"

    def __init__(self, model: ArnnModel):
        self.model = model

    def begin(self, n_lanes: int) -> None:
        self.model.reset(n_lanes)

    def score(self, batch, active: np.ndarray) -> np.ndarray:
        contexts = [batch.contexts[lane] for lane in active]
        return self.model.step_scores(
            batch.prev_items[active], contexts,
            batch.session_boundary[active], lane_ids=active, training=False,
        ).data


def make_scorer(system):
    if isinstance(system, ItemKnnIndex):
        return _KnnScorer(system)
    if isinstance(system, ArnnModel):
        return _ArnnScorer(system)
    if isinstance(system, GruSessionModel):
        return _GruScorer(system)
    if isinstance(system, PnnEncoder):
        return _PnnScorer(system)
    raise EvaluationError(f"no scorer for {type(system).__name__}")


# ---------------------------------------------------------------------------
# reports


@dataclass
class SystemReport:
    system: str
    k: int
    recall: float
    mrr: float
    n_recs: int
    n_hits: int


@dataclass
class EvalReport:
    rows: list[SystemReport]

    HEADER = "system\tk\trecall\tmrr\tn_recs\tn_hits"

    def to_tsv(self) -> str:
        lines = [self.HEADER]
        for r in self.rows:
            lines.append(
                f"{r.system}\t{r.k}\t{r.recall:.6f}\t{r.mrr:.6f}\t{r.n_recs}\t{r.n_hits}"
            )
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        widths = (10, 4, 10, 10, 8, 8)
        cols = ("system", "k", "recall", "mrr", "n_recs", "n_hits")
        out = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
        for r in self.rows:
            cells = (r.system, str(r.k), f"{r.recall:.4f}", f"{r.mrr:.4f}",
                     str(r.n_recs), str(r.n_hits))
            out.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
        return "\n".join(out)


def evaluate_system(system, test: SessionDataset, k: int = 20,
                    lanes: int = 50, name: str | None = None) -> SystemReport:
    """Walk every test session and aggregate Recall@k and MRR@k.

    The first step of each session produces no prediction (there is no
    antecedent); every later step counts one recommendation attempt.
    """
    if not test.sessions:
        raise EvaluationError("empty test dataset")
    scorer = make_scorer(system)
    lanes = max(2, min(lanes, len(test.sessions)))
    scorer.begin(lanes)
    n_recs = n_hits = 0
    rr_sum = 0.0
    for batch in SessionParallelIterator(test, lanes):
        active = np.flatnonzero(batch.active)
        scores = scorer.score(batch, active)
        for row, lane in enumerate(active):
            rank = rank_of(scores[row], int(batch.target_items[lane]))
            n_recs += 1
            if rank <= k:
                n_hits += 1
                rr_sum += 1.0 / rank
    return SystemReport(system=name or scorer.name, k=k,
                        recall=n_hits / n_recs, mrr=rr_sum / n_recs,
                        n_recs=n_recs, n_hits=n_hits)

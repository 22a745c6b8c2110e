"""Retrieval metrics, significance testing, and the analysis reports.

Evaluation is text-to-image: each caption is one query and its paired
image is the gold document.  Significance is tested on per-query
reciprocal ranks, the statistic underlying MRR.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as _scipy_stats

from .data import EmbeddingTable, PairedDataset
from .errors import ConfigError, ShapeError
from .index import VocabMask, flops_from_matrices, mask_matrix
from .model import ParamSet, encode_batch


@dataclass
class QueryResult:
    query_id: str
    ranked_ids: list[str]
    gold_id: str

    def __post_init__(self):
        if len(set(self.ranked_ids)) != len(self.ranked_ids):
            raise ValueError("ranked ids must be unique")


@dataclass
class MetricReport:
    r_at_1: float
    r_at_5: float
    mrr_at_10: float
    reciprocal_ranks: list[float]


def recall_at_k(results: list[QueryResult], k: int) -> float:
    """Fraction of queries whose gold document appears in the top k."""
    if not results:
        return 0.0
    hits = sum(1 for r in results if r.gold_id in r.ranked_ids[:k])
    return hits / len(results)


def reciprocal_ranks(results: list[QueryResult], cutoff: int = 10) -> list[float]:
    out = []
    for r in results:
        rank = 0.0
        for position, doc_id in enumerate(r.ranked_ids[:cutoff], start=1):
            if doc_id == r.gold_id:
                rank = 1.0 / position
                break
        out.append(rank)
    return out


def mrr_at_10(results: list[QueryResult]) -> float:
    """Mean reciprocal rank, counting zero beyond rank 10."""
    if not results:
        return 0.0
    return float(np.mean(reciprocal_ranks(results, cutoff=10)))


def compute_metrics(results: list[QueryResult]) -> MetricReport:
    rr = reciprocal_ranks(results, cutoff=10)
    return MetricReport(
        r_at_1=recall_at_k(results, 1),
        r_at_5=recall_at_k(results, 5),
        mrr_at_10=float(np.mean(rr)) if rr else 0.0,
        reciprocal_ranks=rr,
    )


# ---------------------------------------------------------------------------
# Significance testing
# ---------------------------------------------------------------------------

@dataclass
class TTestResult:
    statistic: float
    p_value: float
    constant_difference: bool = False


def paired_t_test(scores_a: list[float], scores_b: list[float]) -> TTestResult:
    """Two-sided paired t-test on per-query score differences.

    Degenerate cases are explicit: identical inputs give (0, 1), and a
    constant nonzero difference (zero variance) is flagged with p -> 0
    rather than dividing by zero.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("paired samples must be matching 1-D sequences")
    if a.size < 2:
        raise ConfigError("need at least two paired observations")
    diff = a - b
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(statistic=0.0, p_value=1.0)
        return TTestResult(statistic=math.copysign(math.inf, mean),
                           p_value=0.0, constant_difference=True)
    t = mean / (sd / math.sqrt(a.size))
    p = 2.0 * float(_scipy_stats.t.sf(abs(t), df=a.size - 1))
    return TTestResult(statistic=t, p_value=p)


# ---------------------------------------------------------------------------
# Ranking harness
# ---------------------------------------------------------------------------

def rank_queries(params: ParamSet, images: EmbeddingTable,
                 captions: EmbeddingTable, pairs: PairedDataset, mode: str,
                 k_max: int | None = 10,
                 mask: VocabMask | None = None) -> list[QueryResult]:
    """Rank the split's image pool for every caption query.

    mode selects the scoring route: "dense", "sparse", or "integrated"
    is not offered here; integrated ranking lives in weight_sweep where
    it is an explicit analysis choice.  Ties break by ascending image
    id.  A mask, when given, is applied to the image-side sparse
    vectors, mirroring index-time masking.
    """
    if mode not in ("dense", "sparse"):
        raise ConfigError(f"unknown ranking mode {mode!r}")
    return _rank(params, images, captions, pairs, mode, k_max, mask)


def _rank(params: ParamSet, images: EmbeddingTable, captions: EmbeddingTable,
          pairs: PairedDataset, mode: str, k_max: int | None,
          mask: VocabMask | None,
          integration: tuple[float, float] | None = None) -> list[QueryResult]:
    pool = pairs.image_ids
    caption_ids = pairs.caption_ids
    gold = pairs.gold_image()
    h_i, z_i = encode_batch(images.gather(pool), "image", params)
    h_t, z_t = encode_batch(captions.gather(caption_ids), "text", params)
    if mask is not None:
        z_i = mask_matrix(z_i, mask)
    if mode == "dense":
        scores = (h_t @ h_i.T) / params.tau
    elif mode == "sparse":
        scores = z_t @ z_i.T
    else:  # integrated
        w_dense, w_sparse = integration
        scores = w_dense * (h_t @ h_i.T) / params.tau + w_sparse * (z_t @ z_i.T)
    id_rank = np.argsort(np.argsort(np.asarray(pool, dtype=object), kind="stable"))
    limit = len(pool) if k_max is None else min(k_max, len(pool))
    results = []
    for row, query_id in enumerate(caption_ids):
        order = np.lexsort((id_rank, -scores[row]))[:limit]
        results.append(QueryResult(
            query_id=query_id,
            ranked_ids=[pool[int(p)] for p in order],
            gold_id=gold[query_id],
        ))
    return results


# ---------------------------------------------------------------------------
# Analysis reports
# ---------------------------------------------------------------------------

def weight_sweep(base_config, data, w1_grid: list[float], w2_grid: list[float],
                 ranking: str = "sparse") -> list[tuple[float, float, float]]:
    """Retrain per (w_dense, w_sparse) cell and report R@1.

    Each cell trains from scratch with the same seed and data, changing
    only the integration weights, so the grid reflects training-time
    weighting.  ranking="sparse" scores cells by the sparse route;
    "integrated" scores with the cell's own weight mix.
    """
    import dataclasses

    from .scoring import IntegrationWeights
    from .train import fit

    if not w1_grid or not w2_grid:
        raise ConfigError("grids must be nonempty")
    if ranking not in ("sparse", "integrated"):
        raise ConfigError(f"unknown ranking {ranking!r}")
    rows = []
    for w1 in w1_grid:
        for w2 in w2_grid:
            config = dataclasses.replace(base_config,
                                         weights=IntegrationWeights(w1, w2))
            params, _ = fit(config, data)
            pairs = data.validation_pairs
            if ranking == "sparse":
                results = rank_queries(params, data.images, data.captions,
                                       pairs, "sparse")
            else:
                results = _rank(params, data.images, data.captions, pairs,
                                "integrated", 10, None, integration=(w1, w2))
            rows.append((w1, w2, recall_at_k(results, 1)))
    return rows


def sweep_csv(rows: list[tuple[float, float, float]]) -> str:
    lines = ["w1,w2,r_at_1"]
    for w1, w2, r1 in rows:
        lines.append(f"{w1:g},{w2:g},{r1:.6f}")
    return "".join(line + "\n" for line in lines)


def tradeoff_report(variants: list[tuple[str, ParamSet, VocabMask | None]],
                    images: EmbeddingTable, captions: EmbeddingTable,
                    pairs: PairedDataset) -> list[tuple[str, float | None, float]]:
    """Per-variant FLOPs and sparse R@1, plus the dense frozen baseline.

    The baseline row scores the raw input embeddings (what the frozen
    backbone would retrieve) and carries no FLOPs value.
    """
    if not variants:
        raise ConfigError("need at least one variant")
    rows: list[tuple[str, float | None, float]] = []
    for name, params, mask in variants:
        results = rank_queries(params, images, captions, pairs, "sparse", mask=mask)
        r1 = recall_at_k(results, 1)
        pool = pairs.image_ids
        _, z_i = encode_batch(images.gather(pool), "image", params)
        _, z_t = encode_batch(captions.gather(pairs.caption_ids), "text", params)
        if mask is not None:
            z_i = mask_matrix(z_i, mask)
        rows.append((name, flops_from_matrices(z_t, z_i).flops, r1))
    rows.append(("dense_baseline", None, _frozen_dense_r1(images, captions, pairs)))
    return rows


def _frozen_dense_r1(images: EmbeddingTable, captions: EmbeddingTable,
                     pairs: PairedDataset) -> float:
    pool = pairs.image_ids
    gold = pairs.gold_image()
    rows_i = images.gather(pool)
    rows_t = captions.gather(pairs.caption_ids)
    scores = rows_t @ rows_i.T
    id_rank = np.argsort(np.argsort(np.asarray(pool, dtype=object), kind="stable"))
    hits = 0
    for row, query_id in enumerate(pairs.caption_ids):
        best = np.lexsort((id_rank, -scores[row]))[0]
        hits += pool[int(best)] == gold[query_id]
    return hits / len(pairs.caption_ids)


def tradeoff_csv(rows: list[tuple[str, float | None, float]]) -> str:
    lines = ["variant,flops,r_at_1"]
    for name, flops, r1 in rows:
        flops_text = "" if flops is None else f"{flops:.6f}"
        lines.append(f"{name},{flops_text},{r1:.6f}")
    return "".join(line + "\n" for line in lines)

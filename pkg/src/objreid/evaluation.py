"""Retrieval-style evaluation: class-matched gallery construction with
illumination / viewpoint stratification, then mAP, top-k, and CMC.

The retrieval set for a query contains every other pool item of the same
class; same-instance items are removed when they share the query's sequence
or violate the configured illumination / viewpoint criterion. Items of other
instances are never filtered by those criteria, so they stay as distractors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigError
from .geometry import Pose, viewpoint_delta

ILLUMINATION_MODES = ("all", "similar", "different")
VIEWPOINT_GRADES = ("all", "easy", "medium", "hard")


@dataclass(frozen=True)
class EvalItem:
    obs_id: str
    embedding: np.ndarray
    instance_id: int
    cls: str
    sequence_id: str
    weather: str
    cam_pose: Pose
    object_center: np.ndarray


@dataclass(frozen=True)
class EvalConfig:
    similarity: str = "cosine"
    illumination: str = "all"
    viewpoint: str = "all"
    top_k: tuple = (1, 5)
    cmc_max_k: int = 50
    hard_rule: str = "disjunctive"

    def __post_init__(self):
        if self.similarity not in ("cosine", "euclidean"):
            raise ConfigError(f"unknown similarity {self.similarity!r}")
        if self.illumination not in ILLUMINATION_MODES:
            raise ConfigError(f"unknown illumination mode {self.illumination!r}")
        if self.viewpoint not in VIEWPOINT_GRADES:
            raise ConfigError(f"unknown viewpoint grade {self.viewpoint!r}")
        if any(k < 1 for k in self.top_k):
            raise ConfigError("top_k entries must be >= 1")
        if self.hard_rule not in ("disjunctive", "conjunctive"):
            raise ConfigError(f"unknown hard rule {self.hard_rule!r}")


@dataclass
class EvalReport:
    map: float
    top_k: dict
    cmc: list
    avg_matches: float
    avg_set_size: float
    n_queries: int
    n_skipped: int
    per_query: list = field(default_factory=list)

    def to_dict(self):
        return {"map": self.map, "top_k": {str(k): v for k, v in self.top_k.items()},
                "cmc": self.cmc, "avg_matches": self.avg_matches,
                "avg_set_size": self.avg_set_size, "n_queries": self.n_queries,
                "n_skipped": self.n_skipped, "per_query": self.per_query}


def similarity(a, b, mode="cosine"):
    """Similarity score where higher always means more similar (euclidean is
    returned negated)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("embedding dimension mismatch")
    if mode == "cosine":
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            raise ValueError("zero vector in cosine similarity")
        return float(a @ b / (na * nb))
    if mode == "euclidean":
        return -float(np.linalg.norm(a - b))
    raise ConfigError(f"unknown similarity {mode!r}")


def illumination_mode(query: EvalItem, ref: EvalItem):
    """similar iff the weather labels are equal."""
    return "similar" if query.weather == ref.weather else "different"


def viewpoint_grade(delta_d, alpha, hard_rule="disjunctive"):
    """Grade a viewpoint difference: easy iff dd <= 10 m and alpha <= 15 deg;
    hard iff dd > 30 m or alpha > 90 deg (disjunctive rule, so the three
    grades partition the space); medium otherwise. The conjunctive rule
    (dd > 30 and alpha > 90) is available for sensitivity runs, with medium
    absorbing the remainder."""
    if hard_rule == "disjunctive":
        hard = delta_d > 30.0 or alpha > 90.0
    else:
        hard = delta_d > 30.0 and alpha > 90.0
    if hard:
        return "hard"
    if delta_d <= 10.0 and alpha <= 15.0:
        return "easy"
    return "medium"


def _same_instance_keep(query: EvalItem, item: EvalItem, cfg: EvalConfig):
    if item.sequence_id == query.sequence_id:
        return False
    if cfg.illumination != "all" and illumination_mode(query, item) != cfg.illumination:
        return False
    if cfg.viewpoint != "all":
        dd, alpha = viewpoint_delta(query.cam_pose, item.cam_pose, query.object_center)
        if viewpoint_grade(dd, alpha, cfg.hard_rule) != cfg.viewpoint:
            return False
    return True


def build_retrieval_set(query: EvalItem, pool, cfg: EvalConfig):
    """Gallery and positives for one query (pool must exclude the query).

    Gallery = same-class pool items, minus same-instance items that share the
    query's sequence or fail the configured illumination/viewpoint criterion.
    """
    retrieval_set = []
    positives = []
    for item in pool:
        if item.cls != query.cls:
            continue
        if item.instance_id == query.instance_id:
            if not _same_instance_keep(query, item, cfg):
                continue
            positives.append(item)
        retrieval_set.append(item)
    return retrieval_set, positives


def average_precision(ranked_relevance, n_positives):
    """AP of a ranked boolean relevance list: mean over relevant ranks k of
    (relevant items in the top k) / k."""
    rel = np.asarray(ranked_relevance, dtype=bool)
    if n_positives < 1:
        raise ValueError("average_precision requires at least one positive")
    if int(rel.sum()) != n_positives:
        raise ValueError("n_positives does not match the relevance flags")
    ap, _ = _kernels.rank_stats(np.ascontiguousarray(rel, dtype=np.uint8))
    return float(ap)


class _PoolArrays:
    """Column-wise view of the pool for vectorized gallery masks."""

    def __init__(self, pool):
        self.obs_id = np.array([p.obs_id for p in pool])
        self.instance = np.array([p.instance_id for p in pool], dtype=np.int64)
        self.cls = np.array([p.cls for p in pool])
        self.sequence = np.array([p.sequence_id for p in pool])
        self.weather = np.array([p.weather for p in pool])
        self.cam_t = np.array([p.cam_pose.t for p in pool], dtype=np.float64)
        self.emb = np.array([np.asarray(p.embedding, dtype=np.float64) for p in pool])


def _gallery_mask(query: EvalItem, arrays: _PoolArrays, cfg: EvalConfig):
    mask = (arrays.cls == query.cls) & (arrays.obs_id != query.obs_id)
    same = mask & (arrays.instance == query.instance_id)
    drop = same & (arrays.sequence == query.sequence_id)
    if cfg.illumination == "similar":
        drop |= same & (arrays.weather != query.weather)
    elif cfg.illumination == "different":
        drop |= same & (arrays.weather == query.weather)
    if cfg.viewpoint != "all":
        idx = np.flatnonzero(same & ~drop)
        if idx.size:
            o = np.asarray(query.object_center, dtype=np.float64)
            rq = query.cam_pose.t - o
            nq = np.linalg.norm(rq)
            rr = arrays.cam_t[idx] - o
            nr = np.linalg.norm(rr, axis=1)
            dd = np.abs(nq - nr)
            cos = np.clip((rr @ rq) / np.maximum(nq * nr, 1e-300), -1.0, 1.0)
            alpha = np.degrees(np.arccos(cos))
            if cfg.hard_rule == "disjunctive":
                hard = (dd > 30.0) | (alpha > 90.0)
            else:
                hard = (dd > 30.0) & (alpha > 90.0)
            easy = ~hard & (dd <= 10.0) & (alpha <= 15.0)
            if cfg.viewpoint == "easy":
                keep = easy
            elif cfg.viewpoint == "hard":
                keep = hard
            else:
                keep = ~hard & ~easy
            bad = idx[~keep]
            drop_arr = np.zeros(mask.shape[0], dtype=bool)
            drop_arr[bad] = True
            drop |= drop_arr
    return mask & ~drop, same & ~drop


def _scores(query_emb, gallery_emb, mode):
    q = np.asarray(query_emb, dtype=np.float64)
    if mode == "cosine":
        nq = np.linalg.norm(q)
        ng = np.linalg.norm(gallery_emb, axis=1)
        if nq == 0.0 or np.any(ng == 0.0):
            raise ValueError("zero vector in cosine similarity")
        return (gallery_emb @ q) / (ng * nq)
    return -np.linalg.norm(gallery_emb - q, axis=1)


def evaluate(queries, pool, cfg: EvalConfig = EvalConfig(), keep_per_query=True):
    """Full protocol: per query, build the gallery, rank by similarity
    (ties broken by ascending obs_id), and aggregate AP / top-k / CMC.

    Queries whose gallery has no surviving positive are skipped and counted
    in n_skipped; mAP, top-k, avg_matches and avg_set_size average over the
    remaining queries. CMC(k) is the top-k rate for k = 1..cmc_max_k.
    """
    arrays = _PoolArrays(pool)
    ap_values = []
    first_hits = []
    n_matches = []
    set_sizes = []
    per_query = []
    n_skipped = 0
    for query in queries:
        mask, pos_mask = _gallery_mask(query, arrays, cfg)
        n_pos = int(pos_mask.sum())
        if n_pos == 0 or not mask.any():
            n_skipped += 1
            continue
        idx = np.flatnonzero(mask)
        scores = _scores(query.embedding, arrays.emb[idx], cfg.similarity)
        order = np.lexsort((arrays.obs_id[idx], -scores))
        ranked_pos = pos_mask[idx][order]
        ap, first = _kernels.rank_stats(np.ascontiguousarray(ranked_pos, dtype=np.uint8))
        ap_values.append(float(ap))
        first_hits.append(int(first))
        n_matches.append(n_pos)
        set_sizes.append(int(idx.size))
        if keep_per_query:
            per_query.append({"obs_id": query.obs_id, "ap": float(ap),
                              "first_hit": int(first), "n_positives": n_pos,
                              "set_size": int(idx.size)})

    n_queries = len(ap_values)
    if n_queries == 0:
        return EvalReport(0.0, {k: 0.0 for k in cfg.top_k},
                          [0.0] * cfg.cmc_max_k, 0.0, 0.0, 0, n_skipped, per_query)
    hits = np.array(first_hits)
    cmc = [float((hits <= k).mean()) for k in range(1, cfg.cmc_max_k + 1)]
    top_k = {k: float((hits <= k).mean()) for k in cfg.top_k}
    return EvalReport(
        map=float(np.mean(ap_values)),
        top_k=top_k,
        cmc=cmc,
        avg_matches=float(np.mean(n_matches)),
        avg_set_size=float(np.mean(set_sizes)),
        n_queries=n_queries,
        n_skipped=n_skipped,
        per_query=per_query,
    )

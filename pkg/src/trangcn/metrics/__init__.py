"""Gallery ranking and CMC / mAP evaluation.

The per-query scan runs in a compiled extension when it is available and
falls back to a pure-Python implementation otherwise. Set
``TRANGCN_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ContractError
from . import _eval_py

if os.environ.get("TRANGCN_PURE_PYTHON"):
    _eval_cy = None
else:
    try:
        from . import _eval_cy
    except ImportError:  # extension not built
        _eval_cy = None

BACKEND = "cython" if _eval_cy is not None else "python"
_BACKENDS = {"python": _eval_py.evaluate_order}
if _eval_cy is not None:
    _BACKENDS["cython"] = _eval_cy.evaluate_order

RANKS = (1, 5, 10)
REPORT_KEYS = ("rank1", "rank5", "rank10", "mAP", "skipped")


def available_backends() -> tuple[str, ...]:
    return tuple(_BACKENDS)


@dataclass
class RetrievalRun:
    query_embeddings: np.ndarray
    gallery_embeddings: np.ndarray
    query_ids: np.ndarray
    gallery_ids: np.ndarray
    query_cams: np.ndarray | None = None
    gallery_cams: np.ndarray | None = None
    distance: str = "euclidean"
    cam_filter: bool = True

    def __post_init__(self):
        self.query_embeddings = np.atleast_2d(np.asarray(self.query_embeddings, dtype=np.float64))
        self.gallery_embeddings = np.atleast_2d(np.asarray(self.gallery_embeddings, dtype=np.float64))
        self.query_ids = np.asarray(self.query_ids, dtype=np.int64)
        self.gallery_ids = np.asarray(self.gallery_ids, dtype=np.int64)
        nq, ng = len(self.query_embeddings), len(self.gallery_embeddings)
        if self.query_cams is None or self.gallery_cams is None:
            self.query_cams = np.zeros(nq, dtype=np.int64)
            self.gallery_cams = np.zeros(ng, dtype=np.int64)
            self.cam_filter = False
        self.query_cams = np.asarray(self.query_cams, dtype=np.int64)
        self.gallery_cams = np.asarray(self.gallery_cams, dtype=np.int64)
        if len(self.query_ids) != nq or len(self.query_cams) != nq:
            raise ContractError("query labels do not match the number of query embeddings")
        if len(self.gallery_ids) != ng or len(self.gallery_cams) != ng:
            raise ContractError("gallery labels do not match the number of gallery embeddings")


@dataclass
class MetricsReport:
    rank_k: dict[int, float]
    mAP: float
    skipped_queries: int
    evaluated_queries: int = 0
    cmc: np.ndarray = field(default=None, repr=False)

    def as_dict(self) -> dict[str, float | int]:
        out: dict[str, float | int] = {f"rank{k}": self.rank_k[k] for k in RANKS}
        out["mAP"] = self.mAP
        out["skipped"] = self.skipped_queries
        return out

    def to_text(self) -> str:
        lines = ["metric,value"]
        lines += [f"{k},{v!r}" for k, v in self.as_dict().items()]
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        """Write ``metrics.txt`` (metric,value rows) and ``metrics.json``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        text = out_dir / "metrics.txt"
        text.write_text(self.to_text())
        kv = out_dir / "metrics.json"
        kv.write_text(json.dumps(self.as_dict(), indent=1) + "\n")
        return text, kv


def pairwise_distance(queries: np.ndarray, gallery: np.ndarray, distance: str = "euclidean",
                      chunk: int = 256) -> np.ndarray:
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    gallery = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if distance == "euclidean":
        out = np.empty((len(queries), len(gallery)))
        # direct differences so each entry only depends on its own pair
        for s in range(0, len(queries), chunk):
            diff = queries[s:s + chunk, None, :] - gallery[None, :, :]
            out[s:s + chunk] = np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))
        return out
    if distance == "cosine":
        qn = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
        gn = gallery / np.maximum(np.linalg.norm(gallery, axis=1, keepdims=True), 1e-12)
        return 1.0 - qn @ gn.T
    raise ValueError(f"unknown distance {distance!r}")


def rank_gallery(query: np.ndarray, gallery: np.ndarray, distance: str = "euclidean") -> np.ndarray:
    """Gallery indices by ascending distance; ties keep the smaller index first."""
    gallery = np.asarray(gallery)
    if gallery.size == 0 or len(gallery) == 0:
        raise ContractError("gallery is empty")
    dist = pairwise_distance(np.asarray(query)[None, :], gallery, distance)[0]
    return np.argsort(dist, kind="stable")


def rank_all(run: RetrievalRun) -> np.ndarray:
    if len(run.gallery_embeddings) == 0:
        raise ContractError("gallery is empty")
    dist = pairwise_distance(run.query_embeddings, run.gallery_embeddings, run.distance)
    return np.ascontiguousarray(np.argsort(dist, axis=1, kind="stable").astype(np.int64))


def scan(run: RetrievalRun, backend: str | None = None):
    """Run the ranking scan; returns per-query (first match position, AP, relevant count)."""
    fn = _BACKENDS[backend or BACKEND]
    order = rank_all(run)
    return fn(order, np.ascontiguousarray(run.query_ids), np.ascontiguousarray(run.gallery_ids),
              np.ascontiguousarray(run.query_cams), np.ascontiguousarray(run.gallery_cams), bool(run.cam_filter))


def _cmc(first: np.ndarray, k: int, num_gallery: int) -> float:
    k = min(k, num_gallery)
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    valid = first >= 0
    if not valid.any():
        return 0.0
    return float(np.count_nonzero(first[valid] < k)) / float(np.count_nonzero(valid))


def cmc_at_k(run: RetrievalRun, k: int, backend: str | None = None) -> float:
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    first, _, _ = scan(run, backend)
    return _cmc(first, k, len(run.gallery_ids))


def mean_average_precision(run: RetrievalRun, backend: str | None = None) -> float:
    _, ap, _ = scan(run, backend)
    valid = ~np.isnan(ap)
    return float(ap[valid].mean()) if valid.any() else 0.0


def evaluate(run: RetrievalRun, ranks=RANKS, backend: str | None = None) -> MetricsReport:
    first, ap, _ = scan(run, backend)
    valid = first >= 0
    max_rank = min(max(ranks), len(run.gallery_ids))
    cmc = np.array([_cmc(first, k, len(run.gallery_ids)) for k in range(1, max_rank + 1)])
    return MetricsReport(
        rank_k={k: _cmc(first, k, len(run.gallery_ids)) for k in ranks},
        mAP=float(ap[valid].mean()) if valid.any() else 0.0,
        skipped_queries=int(np.count_nonzero(~valid)),
        evaluated_queries=int(np.count_nonzero(valid)),
        cmc=cmc,
    )

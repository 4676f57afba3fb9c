"""Recall@K retrieval evaluation.

Caption ``c`` belongs to image ``c // K``. A candidate's rank is the number of
candidates with a strictly higher score plus the number of equal-score
candidates with a lower index, so ties go to the lower candidate index.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb
from typing import Iterable, Sequence

import numpy as np

from .datagen import PairedDataset
from .experts import TrainConfig, run_training
from .model import BackboneSpec, VLModel

KS = (1, 5, 10)
CSV_COLUMNS = ["method", "pairs", "direction", "r1", "r1_std", "r5", "r5_std", "r10", "r10_std"]
_CHUNK = 256


@dataclass
class RetrievalReport:
    direction: str  # "TR" (image->text) or "IR" (text->image)
    recall: dict[int, float]  # mean over seeds
    n_queries: int
    seeds: list[int] = field(default_factory=list)
    std: dict[int, float] | None = None
    per_seed: list[dict[int, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "recall": {str(k): v for k, v in self.recall.items()},
            "n_queries": self.n_queries,
            "seeds": list(self.seeds),
            "std": None if self.std is None else {str(k): v for k, v in self.std.items()},
            "per_seed": [{str(k): v for k, v in r.items()} for r in self.per_seed],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RetrievalReport":
        return cls(
            direction=d["direction"],
            recall={int(k): v for k, v in d["recall"].items()},
            n_queries=d["n_queries"],
            seeds=list(d["seeds"]),
            std=None if d["std"] is None else {int(k): v for k, v in d["std"].items()},
            per_seed=[{int(k): v for k, v in r.items()} for r in d["per_seed"]],
        )


def _positions(scores: np.ndarray, own: np.ndarray) -> np.ndarray:
    """Rank (0-based) of candidates ``own[q, j]`` within row q of ``scores``."""
    q = np.arange(scores.shape[0])[:, None]
    own_scores = scores[q, own]  # Q x J
    cand = np.arange(scores.shape[1])
    better = (scores[:, None, :] > own_scores[:, :, None]).sum(axis=2)
    ties = ((scores[:, None, :] == own_scores[:, :, None]) & (cand[None, None, :] < own[:, :, None])).sum(axis=2)
    return better + ties


def best_positions_tr(scores: np.ndarray, K: int) -> np.ndarray:
    """For each image (row), the best rank among its K captions (columns)."""
    n = scores.shape[0]
    out = np.empty(n, dtype=np.int64)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        own = np.arange(lo, hi)[:, None] * K + np.arange(K)[None, :]
        out[lo:hi] = _positions(scores[lo:hi], own).min(axis=1)
    return out


def positions_ir(scores_t2i: np.ndarray, K: int) -> np.ndarray:
    """For each caption (row), the rank of its own image (column c // K)."""
    n = scores_t2i.shape[0]
    out = np.empty(n, dtype=np.int64)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        own = (np.arange(lo, hi) // K)[:, None]
        out[lo:hi] = _positions(scores_t2i[lo:hi], own)[:, 0]
    return out


def recall_from_scores(scores: np.ndarray, K: int, ks: Sequence[int] = KS) -> dict[str, dict[int, float]]:
    """``scores``: N_images x (N*K) captions."""
    tr = best_positions_tr(scores, K)
    ir = positions_ir(np.ascontiguousarray(scores.T), K)
    return {
        "TR": {k: float(np.mean(tr < k)) for k in ks},
        "IR": {k: float(np.mean(ir < k)) for k in ks},
    }


def embed(model: VLModel, ds: PairedDataset) -> tuple[np.ndarray, np.ndarray]:
    zi = model.encode_image(ds.images).value
    zt = model.encode_text(ds.captions).value
    return zi, zt


def recall_at_k(model: VLModel, ds: PairedDataset, ks: Sequence[int] = KS) -> tuple[RetrievalReport, RetrievalReport]:
    if len(ds) == 0:
        raise ValueError("empty evaluation split")
    zi, zt = embed(model, ds)
    res = recall_from_scores(zi @ zt.T, ds.K, ks)
    return (
        RetrievalReport("TR", res["TR"], n_queries=len(ds)),
        RetrievalReport("IR", res["IR"], n_queries=len(ds) * ds.K),
    )


def random_baseline_expectation(N: int, K: int, k: int, direction: str) -> float:
    """Expected R@k when every candidate ordering is equally likely."""
    if N < 1 or K < 1 or k < 0:
        raise ValueError("invalid counts")
    if direction == "TR":
        if k > N * K:
            raise ValueError("k exceeds the caption pool")
        return float(1 - Fraction(comb(N * K - K, k), comb(N * K, k)))
    if direction == "IR":
        if k > N:
            raise ValueError("k exceeds the image pool")
        return k / N
    raise ValueError(f"unknown direction {direction!r}")


def monte_carlo_baseline(N: int, K: int, k: int, direction: str, trials: int, seed: int = 0) -> tuple[float, float]:
    """(mean hit rate, standard error) for queries scored by uniform noise."""
    rng = np.random.default_rng(seed)
    hits = 0
    n_cand = N * K if direction == "TR" else N
    batch = max(1, min(trials, 2_000_000 // n_cand))
    done = 0
    while done < trials:
        b = min(batch, trials - done)
        scores = rng.random((b, n_cand))
        if direction == "TR":
            own = np.broadcast_to(np.arange(K), (b, K))  # query is image 0
            pos = _positions_flat(scores, own).min(axis=1)
        else:
            own = np.zeros((b, 1), dtype=np.int64)
            pos = _positions_flat(scores, own)[:, 0]
        hits += int((pos < k).sum())
        done += b
    p = hits / trials
    return p, float(np.sqrt(max(p * (1 - p), 1e-300) / trials))


def _positions_flat(scores: np.ndarray, own: np.ndarray) -> np.ndarray:
    q = np.arange(scores.shape[0])[:, None]
    own_scores = scores[q, own]
    out = np.empty(own.shape, dtype=np.int64)
    for j in range(own.shape[1]):
        s = own_scores[:, j : j + 1]
        idx = own[:, j : j + 1]
        cand = np.arange(scores.shape[1])[None, :]
        out[:, j] = (scores > s).sum(axis=1) + ((scores == s) & (cand < idx)).sum(axis=1)
    return out


# ---------------------------------------------------------------------------
# set evaluation


def aggregate(direction: str, runs: list[dict[int, float]], seeds: list[int], n_queries: int) -> RetrievalReport:
    ks = sorted(runs[0])
    mean = {k: float(np.mean([r[k] for r in runs])) for k in ks}
    std = {k: float(np.std([r[k] for r in runs], ddof=1)) for k in ks} if len(runs) >= 2 else None
    return RetrievalReport(direction, mean, n_queries, list(seeds), std, [dict(r) for r in runs])


def _train_eval_one(args):
    images, captions, K, spec, cfg, seed, ds_test, lr, ks = args
    model = VLModel(spec, captions.shape[1], init_seed=seed)
    run_training(model, images, captions, K, dataclasses.replace(cfg, seed=seed), lr=lr)
    tr, ir = recall_at_k(model, ds_test, ks)
    return tr.recall, ir.recall


def evaluate_set(
    train_set,
    eval_spec: BackboneSpec,
    cfg: TrainConfig,
    ds_test: PairedDataset,
    n_seeds: int = 5,
    seed0: int = 1000,
    ks: Sequence[int] = KS,
    jobs: int = 1,
) -> tuple[RetrievalReport, RetrievalReport]:
    """Train ``n_seeds`` fresh students on ``train_set`` and evaluate on ``ds_test``.

    ``train_set`` is a DistilledSet (trained with its own alpha as lr) or a
    PairedDataset (trained with ``cfg.lr``).
    """
    if ds_test.split != "test":
        raise ValueError(f"evaluation must use the test split, got '{ds_test.split}'")
    if isinstance(train_set, PairedDataset):
        images, captions, K, lr = train_set.images, train_set.captions, train_set.K, None
    else:
        images, captions, K, lr = train_set.images, train_set.texts, 1, float(train_set.alpha)
    seeds = [seed0 + i for i in range(n_seeds)]
    tasks = [(images, captions, K, eval_spec, cfg, s, ds_test, lr, tuple(ks)) for s in seeds]
    if jobs > 1 and n_seeds > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_eval_one, tasks))
    else:
        results = [_train_eval_one(t) for t in tasks]
    tr = aggregate("TR", [r[0] for r in results], seeds, len(ds_test))
    ir = aggregate("IR", [r[1] for r in results], seeds, len(ds_test) * ds_test.K)
    return tr, ir


# ---------------------------------------------------------------------------
# comparison tables


@dataclass
class MethodResult:
    method: str
    pairs: int
    reports: tuple[RetrievalReport, ...]
    provenance: dict = field(default_factory=dict)  # config / arch / set digests

    def to_dict(self) -> dict:
        return {"method": self.method, "pairs": self.pairs, "reports": [r.to_dict() for r in self.reports],
                "provenance": dict(self.provenance)}

    @classmethod
    def from_dict(cls, d: dict) -> "MethodResult":
        return cls(d["method"], d["pairs"], tuple(RetrievalReport.from_dict(r) for r in d["reports"]),
                   dict(d.get("provenance", {})))


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def report_rows(results: Iterable[MethodResult]) -> list[list[str]]:
    rows = []
    for res in results:
        for rep in res.reports:
            row = [res.method, str(res.pairs), rep.direction]
            for k in KS:
                row.append(_fmt(rep.recall.get(k)))
                row.append(_fmt(None if rep.std is None else rep.std.get(k)))
            rows.append(row)
    return rows


def compare_report(results: dict[str, MethodResult]) -> tuple[str, str]:
    """Render (csv_text, json_text) for a map of selector -> result."""
    if not results:
        raise ValueError("compare_report needs at least one result")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(report_rows(results.values()))
    js = json.dumps({k: v.to_dict() for k, v in results.items()}, indent=2, sort_keys=True)
    return buf.getvalue(), js


def parse_report_json(text: str) -> dict[str, MethodResult]:
    return {k: MethodResult.from_dict(v) for k, v in json.loads(text).items()}

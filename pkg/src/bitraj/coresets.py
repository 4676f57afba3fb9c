"""Coreset baselines: random, herding, k-center and forgetting selection.

Herding and k-center work on one feature row per training pair: the image
feature concatenated with the mean of its caption features.
"""

from __future__ import annotations

import numpy as np

from .datagen import PairedDataset
from .experts import TrainConfig, run_training
from .model import BackboneSpec, VLModel
from .retrieval import best_positions_tr, positions_ir

SELECTORS = ("random", "herding", "kcenter", "forgetting")


class SelectionError(ValueError):
    pass


def _check_budget(n: int, m: int) -> None:
    if m < 0 or m > n:
        raise SelectionError(f"cannot select {m} of {n} items")


def feature_table(ds: PairedDataset, model: VLModel | None = None) -> np.ndarray:
    """Raw dataset-space features, or encoded ones when ``model`` is given."""
    if model is None:
        return np.concatenate([ds.images, ds.mean_captions()], axis=1)
    zi = model.encode_image(ds.images).value
    zt = model.encode_text(ds.captions).value.reshape(len(ds), ds.K, -1).mean(axis=1)
    return np.concatenate([zi, zt], axis=1)


def random_select(n: int, m: int, seed: int) -> list[int]:
    _check_budget(n, m)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E]))
    return [int(i) for i in rng.choice(n, size=m, replace=False)]


def herding_select(features: np.ndarray, m: int) -> list[int]:
    """Greedily add the point that brings the coreset mean closest to the data mean."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] == 0:
        raise SelectionError("empty feature table")
    _check_budget(f.shape[0], m)
    center = f.mean(axis=0)
    chosen: list[int] = []
    available = np.ones(f.shape[0], dtype=bool)
    running = np.zeros(f.shape[1])
    for step in range(m):
        cand = (running[None, :] + f) / (step + 1)
        dist = np.linalg.norm(cand - center[None, :], axis=1)
        dist[~available] = np.inf
        i = int(np.argmin(dist))
        chosen.append(i)
        available[i] = False
        running += f[i]
    return chosen


def kcenter_select(features: np.ndarray, m: int, seed: int, start: int | None = None) -> list[int]:
    """Farthest-point greedy selection from a seeded random start."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    n = f.shape[0]
    _check_budget(n, m)
    if m == 0:
        return []
    if start is None:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCC]))
        start = int(rng.integers(n))
    chosen = [start]
    mind = np.linalg.norm(f - f[start], axis=1)
    mind[start] = -np.inf
    for _ in range(m - 1):
        i = int(np.argmax(mind))
        chosen.append(i)
        mind = np.minimum(mind, np.linalg.norm(f - f[i], axis=1))
        mind[chosen] = -np.inf
    return chosen


def learned_flags(model: VLModel, ds: PairedDataset) -> np.ndarray:
    """A pair is learned when its image retrieves one of its captions at rank 1
    over all training captions and its first caption retrieves its image at
    rank 1 over all training images."""
    zi = model.encode_image(ds.images).value
    zt = model.encode_text(ds.captions).value
    tr_ok = best_positions_tr(zi @ zt.T, ds.K) == 0
    first = zt[:: ds.K]
    ir_ok = positions_ir(first @ zi.T, 1) == 0
    return tr_ok & ir_ok


def forgetting_events(log: np.ndarray) -> np.ndarray:
    """Learned -> unlearned transitions per pair; ``log`` is epochs x pairs."""
    log = np.asarray(log, dtype=bool)
    if log.shape[0] < 2:
        return np.zeros(log.shape[1], dtype=np.int64)
    return (log[:-1] & ~log[1:]).sum(axis=0)


def rank_by_forgetting(log: np.ndarray, m: int) -> list[int]:
    """Fewest forgetting events first; never-learned pairs go last; then index.

    With fewer than two logged epochs nothing is known and the order is by index.
    """
    log = np.asarray(log, dtype=bool)
    n = log.shape[1]
    _check_budget(n, m)
    if log.shape[0] < 2:
        return list(range(m))
    events = forgetting_events(log)
    never = ~log.any(axis=0)
    order = np.lexsort((np.arange(n), events, never))
    return [int(i) for i in order[:m]]


def forgetting_select(ds: PairedDataset, spec: BackboneSpec, cfg: TrainConfig, m: int) -> list[int]:
    _check_budget(len(ds), m)
    model = VLModel(spec, ds.e_txt, init_seed=cfg.seed)
    log: list[np.ndarray] = []
    run_training(model, ds.images, ds.captions, ds.K, cfg, on_epoch=lambda ep, mm: log.append(learned_flags(mm, ds)))
    return rank_by_forgetting(np.array(log), m)


def select(method: str, ds: PairedDataset, m: int, seed: int, spec: BackboneSpec | None = None,
           cfg: TrainConfig | None = None, encoded: bool = False) -> list[int]:
    if method == "random":
        return random_select(len(ds), m, seed)
    if method in ("herding", "kcenter"):
        model = VLModel(spec, ds.e_txt, init_seed=seed) if encoded else None
        feats = feature_table(ds, model)
        return herding_select(feats, m) if method == "herding" else kcenter_select(feats, m, seed)
    if method == "forgetting":
        if spec is None or cfg is None:
            raise SelectionError("forgetting selection needs a backbone spec and a train config")
        return forgetting_select(ds, spec, cfg, m)
    raise SelectionError(f"unknown selector {method!r}")

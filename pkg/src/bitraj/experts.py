"""Expert training and the trajectory store."""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import container
from . import tensor as T
from .datagen import PairedDataset
from .model import BackboneSpec, ParamVector, VLModel, arch_digest, contrastive_loss

MAGIC = b"BTRJ"


class TrainingError(RuntimeError):
    pass


class NonFiniteTrainingError(TrainingError):
    """Training hit a NaN or infinity; carries the epoch and step."""


class ArchDigestError(container.DigestError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 100
    lr: float = 0.1
    momentum: float = 0.5
    seed: int = 0
    num_trajectories: int = 20
    caption_policy: str = "uniform-one-per-step"
    tau: float = 1.0

    def validate(self, n_train: int | None = None) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch_size must be >= 1 and lr > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.caption_policy != "uniform-one-per-step":
            raise ValueError(f"unknown caption policy {self.caption_policy!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train-config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Trajectory:
    snapshots: list[ParamVector]
    scope: str
    arch_digest: str
    seed: int
    loss_log: list[float] = field(default_factory=list)
    spec: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def epochs(self) -> int:
        return len(self.snapshots) - 1

    @property
    def layout(self):
        return self.snapshots[0].layout


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0xE9, epoch]))


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float) -> dict:
    """One SGD-with-momentum update (v <- mu*v + g; p <- p - lr*v). Returns new params."""
    new = {}
    for name, p in params.items():
        v = momentum * velocity[name] + grads[name] if name in velocity else grads[name]
        velocity[name] = v
        new[name] = p - lr * v
    return new


def loss_and_grads(model: VLModel, params: dict, images, texts, tau: float):
    g = T.Graph()
    vars_ = {k: g.variable(v, k) for k, v in params.items()}
    loss = contrastive_loss(model, T.Tensor(images), T.Tensor(texts), vars_, tau)
    grads = T.grad(loss, list(vars_.values()))
    return loss.item(), {k: gr.value for k, gr in zip(vars_, grads)}


def run_training(
    model: VLModel,
    images: np.ndarray,
    captions: np.ndarray,
    K: int,
    cfg: TrainConfig,
    lr: float | None = None,
    start_epoch: int = 0,
    epochs: int | None = None,
    on_epoch: Callable[[int, VLModel], None] | None = None,
) -> list[float]:
    """Train ``model`` in place and return per-epoch mean losses.

    Each epoch draws its permutation and caption choices from an RNG keyed
    by (seed, epoch) and starts with zero momentum, so training resumed from
    the snapshot after epoch s replays epochs s+1.. exactly. The trailing
    partial batch is dropped.
    """
    n = images.shape[0]
    b = min(cfg.batch_size, n)
    steps = n // b
    lr = cfg.lr if lr is None else lr
    epochs = cfg.epochs if epochs is None else epochs
    params = dict(model.params)
    log = []
    for epoch in range(start_epoch, start_epoch + epochs):
        rng = _epoch_rng(cfg.seed, epoch)
        perm = rng.permutation(n)
        pick = rng.integers(0, K, size=n)
        velocity: dict = {}
        total = 0.0
        for step in range(steps):
            idx = perm[step * b : (step + 1) * b]
            try:
                loss, grads = loss_and_grads(model, params, images[idx], captions[idx * K + pick[idx]], cfg.tau)
            except T.NonFiniteError as exc:
                raise NonFiniteTrainingError(f"non-finite value at epoch {epoch + 1}, step {step}: {exc}") from exc
            if not np.isfinite(loss):
                raise NonFiniteTrainingError(f"non-finite loss at epoch {epoch + 1}, step {step}")
            total += loss
            params = sgd_step(params, grads, velocity, lr, cfg.momentum)
        model.params = params
        log.append(total / steps)
        if on_epoch is not None:
            on_epoch(epoch + 1, model)
    return log


def train_expert(ds: PairedDataset, spec: BackboneSpec, cfg: TrainConfig) -> Trajectory:
    cfg.validate()
    if ds.d_img != spec.in_dim:
        raise TrainingError(f"dataset image dim {ds.d_img} != backbone in_dim {spec.in_dim}")
    model = VLModel(spec, ds.e_txt, init_seed=cfg.seed)
    snapshots = [model.param_vector()]
    log = run_training(
        model, ds.images, ds.captions, ds.K, cfg,
        on_epoch=lambda ep, m: snapshots.append(m.param_vector()),
    )
    return Trajectory(
        snapshots=snapshots,
        scope=model.scope,
        arch_digest=arch_digest(spec, ds.e_txt),
        seed=cfg.seed,
        loss_log=log,
        spec=spec.to_dict(),
        config=cfg.to_dict(),
    )


def _train_one(args):
    ds, spec, cfg = args
    return train_expert(ds, spec, cfg)


def train_experts(
    ds: PairedDataset,
    spec: BackboneSpec,
    cfg: TrainConfig,
    num_trajectories: int | None = None,
    jobs: int = 1,
) -> list[Trajectory]:
    """Independent experts with seeds ``cfg.seed + i``."""
    n = cfg.num_trajectories if num_trajectories is None else num_trajectories
    tasks = [(ds, spec, dataclasses.replace(cfg, seed=cfg.seed + i)) for i in range(n)]
    if jobs <= 1 or n <= 1:
        return [_train_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_train_one, tasks))


def save_trajectory(t: Trajectory, path) -> None:
    meta = {
        "kind": "trajectory",
        "scope": t.scope,
        "layout": t.snapshots[0].layout_json(),
        "T": t.epochs,
        "seed": t.seed,
        "arch_digest": t.arch_digest,
        "loss_log": t.loss_log,
        "spec": t.spec,
        "config": t.config,
    }
    stacked = np.stack([s.values for s in t.snapshots])
    container.save(path, MAGIC, meta, {"snapshots": stacked})


def load_trajectory(path, expect_arch: str | None = None) -> Trajectory:
    meta, blocks = container.load(path, MAGIC)
    if expect_arch is not None and meta["arch_digest"] != expect_arch:
        raise ArchDigestError(
            f"trajectory arch digest {meta['arch_digest'][:12]} does not match model {expect_arch[:12]}"
        )
    layout = [(n, tuple(s), o) for n, s, o in meta["layout"]]
    snaps = [ParamVector(row.copy(), layout, meta["scope"]) for row in blocks["snapshots"]]
    return Trajectory(
        snapshots=snaps,
        scope=meta["scope"],
        arch_digest=meta["arch_digest"],
        seed=meta["seed"],
        loss_log=meta["loss_log"],
        spec=meta["spec"],
        config=meta["config"],
    )

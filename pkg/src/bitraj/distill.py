"""Bi-trajectory co-distillation and the distribution-matching baseline.

One distillation step:

1. sample an expert trajectory and a start epoch s in {0..T_plus};
2. starting from the expert's parameters at s, take R_hat plain SGD steps
   (learning rate alpha) on the distilled pairs, keeping every update on the
   graph;
3. score the student against the expert at s+R with the normalized
   parameter distance, summed over the image-side and text-side groups;
4. back-propagate through the unroll into the distilled images, texts and
   alpha and apply an SGD-with-momentum update to each.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Literal, Mapping, Sequence

import numpy as np

from . import container
from . import tensor as T
from .datagen import PairedDataset
from .experts import Trajectory
from .model import (
    BackboneSpec,
    ParamVector,
    VLModel,
    arch_digest,
    contrastive_loss,
    split_sides,
)
from .tensor import Tensor

MAGIC = b"BDST"
ALPHA_FLOOR = 1e-6
DENOM_FLOOR = 1e-12
MAX_RESAMPLES = 16


class DistillError(RuntimeError):
    pass


class DegenerateSegmentError(DistillError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    M: int
    T_plus: int
    R: int
    R_hat: int
    outer_steps: int
    lr_img: float = 10.0
    lr_txt: float = 10.0
    lr_alpha: float = 1e-2
    momentum: float = 0.5
    inner_batch: int = 100
    alpha0: float = 0.1
    init_img: Literal["real", "gaussian"] = "real"
    init_txt: Literal["real", "gaussian"] = "real"
    match_scope: Literal["full", "lora"] = "full"
    freeze_img: bool = False
    freeze_txt: bool = False
    seed: int = 0
    tau: float = 1.0
    real_batch: int = 256  # distribution matching only

    def validate(self, n_epochs: int | None = None) -> None:
        if self.M < 1:
            raise DistillError("M must be >= 1")
        if self.R_hat < 1 or self.R < 1 or self.T_plus < 0 or self.outer_steps < 0:
            raise DistillError("invalid R / R_hat / T_plus / outer_steps")
        if self.inner_batch < 1:
            raise DistillError("inner_batch must be >= 1")
        if self.alpha0 < ALPHA_FLOOR:
            raise DistillError("alpha0 below the alpha floor")
        for name in ("init_img", "init_txt"):
            if getattr(self, name) not in ("real", "gaussian"):
                raise DistillError(f"{name} must be 'real' or 'gaussian'")
        if self.match_scope not in ("full", "lora"):
            raise DistillError("match_scope must be 'full' or 'lora'")
        if n_epochs is not None and self.T_plus + self.R > n_epochs:
            raise DistillError(f"T_plus + R = {self.T_plus + self.R} exceeds trajectory length T = {n_epochs}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DistillError(f"unknown distill keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DistilledSet:
    images: np.ndarray  # M x d_img
    texts: np.ndarray  # M x e_txt
    alpha: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.images.shape[0] != self.texts.shape[0] or self.images.shape[0] < 1:
            raise DistillError("a distilled set needs M >= 1 image rows and one text row per image")

    def __len__(self) -> int:
        return self.images.shape[0]

    def copy(self) -> "DistilledSet":
        return DistilledSet(self.images.copy(), self.texts.copy(), self.alpha, dict(self.provenance))


def init_distilled(ds: PairedDataset, cfg: DistillConfig) -> DistilledSet:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1A]))
    need_real = cfg.init_img == "real" or cfg.init_txt == "real"
    if need_real and cfg.M > len(ds):
        raise DistillError(f"M = {cfg.M} exceeds n_train = {len(ds)}")
    prov: dict = {"init_img": cfg.init_img, "init_txt": cfg.init_txt, "seed": cfg.seed}
    idx = None
    if need_real:
        idx = rng.choice(len(ds), size=cfg.M, replace=False)
        pick = rng.integers(0, ds.K, size=cfg.M)
        prov["source_indices"] = [int(i) for i in idx]
    images = ds.images[idx].copy() if cfg.init_img == "real" else rng.standard_normal((cfg.M, ds.d_img))
    if cfg.init_txt == "real":
        texts = ds.captions[idx * ds.K + pick].copy()
    else:
        texts = rng.standard_normal((cfg.M, ds.e_txt))
    return DistilledSet(images, texts, float(cfg.alpha0), prov)


def _on_graph(graph: T.Graph, x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return graph.variable(x)


def student_unroll(
    model: VLModel,
    images,
    texts,
    alpha,
    theta_s: ParamVector,
    cfg: DistillConfig,
    rng: np.random.Generator | None = None,
) -> dict[str, Tensor]:
    """R_hat differentiable SGD steps from ``theta_s`` on the distilled pairs.

    ``images``, ``texts`` and ``alpha`` may be graph tensors (the outer
    variables) or raw arrays; the returned parameters are nodes of the same
    graph and remain differentiable w.r.t. all three.
    """
    if [(n, tuple(s)) for n, s, _ in theta_s.layout] != [(n, a.shape) for n, a in model.params.items()]:
        raise DistillError("theta_s layout does not match the model's trainable scope")
    graph = next((t.graph for t in (images, texts, alpha) if isinstance(t, Tensor) and t.graph), None)
    graph = graph or T.Graph()
    images, texts = _on_graph(graph, images), _on_graph(graph, texts)
    alpha = _on_graph(graph, alpha)
    theta = {k: graph.variable(v, k) for k, v in theta_s.to_arrays().items()}
    m = images.rows
    rng = rng or np.random.default_rng(0)
    for _ in range(cfg.R_hat):
        if m <= cfg.inner_batch:
            xb, yb = images, texts
        else:
            idx = np.sort(rng.choice(m, size=cfg.inner_batch, replace=False))
            xb, yb = T.take_rows(images, idx), T.take_rows(texts, idx)
        loss = contrastive_loss(model, xb, yb, theta, cfg.tau)
        if not np.isfinite(loss.item()):
            raise T.NonFiniteError("student_unroll", "inner loss")
        grads = T.grad(loss, list(theta.values()), emit_graph=True)
        theta = {k: p - alpha * g for (k, p), g in zip(theta.items(), grads)}
    return theta


def segment_denominators(start: ParamVector, target: ParamVector) -> tuple[float, float]:
    s, t = start.to_arrays(), target.to_arrays()
    img, txt = split_sides(s)
    d_img = float(sum(np.sum((s[n] - t[n]) ** 2) for n in img))
    d_txt = float(sum(np.sum((s[n] - t[n]) ** 2) for n in txt))
    return d_img, d_txt


def trajectory_loss(theta_hat, theta_star_s: ParamVector, theta_star_sR: ParamVector) -> Tensor:
    """Sum over the image and text side of ||hat - target||^2 / ||start - target||^2."""
    if isinstance(theta_hat, ParamVector):
        theta_hat = {k: Tensor(v) for k, v in theta_hat.to_arrays().items()}
    target = theta_star_sR.to_arrays()
    if list(theta_hat) != list(target) or [n for n, _, _ in theta_star_s.layout] != list(target):
        raise DistillError("parameter layouts differ")
    d_img, d_txt = segment_denominators(theta_star_s, theta_star_sR)
    if d_img < DENOM_FLOOR or d_txt < DENOM_FLOOR:
        raise DegenerateSegmentError(f"expert segment has zero motion (img {d_img:.3e}, txt {d_txt:.3e})")
    img, txt = split_sides(target)
    total = None
    for names, denom in ((img, d_img), (txt, d_txt)):
        side = None
        for n in names:
            term = T.frobenius_sq(theta_hat[n] - Tensor(target[n]))
            side = term if side is None else side + term
        side = T.scale(side, 1.0 / denom)
        total = side if total is None else total + side
    return total


def _check_trajectories(trajs: Sequence[Trajectory], spec: BackboneSpec, e_txt: int, cfg: DistillConfig) -> int:
    if not trajs:
        raise DistillError("no expert trajectories")
    want = arch_digest(spec, e_txt)
    epochs = trajs[0].epochs
    for t in trajs:
        if t.arch_digest != want:
            raise DistillError("trajectory arch digest does not match the distillation backbone")
        if t.scope != cfg.match_scope:
            raise DistillError(f"trajectory scope '{t.scope}' != match_scope '{cfg.match_scope}'")
        if t.epochs != epochs:
            raise DistillError("trajectories have different lengths")
    return epochs


class _Momentum:
    def __init__(self, momentum: float):
        self.mu = momentum
        self.buf: dict[str, np.ndarray] = {}

    def step(self, name: str, value: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
        v = self.mu * self.buf[name] + g if name in self.buf else g
        self.buf[name] = v
        return value - lr * v


def distill(
    trajs: Sequence[Trajectory],
    ds: PairedDataset,
    spec: BackboneSpec,
    cfg: DistillConfig,
    init: DistilledSet | None = None,
) -> tuple[DistilledSet, dict]:
    """Run bi-trajectory co-distillation; returns (set, history)."""
    epochs = _check_trajectories(trajs, spec, ds.e_txt, cfg)
    cfg.validate(epochs)
    model = VLModel(spec, ds.e_txt, init_seed=0)
    frozen0 = model.frozen_digest()
    d = init.copy() if init is not None else init_distilled(ds, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD1]))
    opt = _Momentum(cfg.momentum)
    history: dict = {"loss": [], "alpha": [], "segments": []}
    for step in range(cfg.outer_steps):
        for _ in range(MAX_RESAMPLES):
            ti = int(rng.integers(len(trajs)))
            s = int(rng.integers(cfg.T_plus + 1))
            start, target = trajs[ti].snapshots[s], trajs[ti].snapshots[s + cfg.R]
            if min(segment_denominators(start, target)) >= DENOM_FLOOR:
                break
        else:
            raise DegenerateSegmentError(f"{MAX_RESAMPLES} consecutive degenerate segments at step {step}")
        g = T.Graph()
        x = g.variable(d.images, "images")
        y = g.variable(d.texts, "texts")
        a = g.variable([[d.alpha]], "alpha")
        theta_hat = student_unroll(model, x, y, a, start, cfg, rng)
        loss = trajectory_loss(theta_hat, start, target)
        gx, gy, ga = T.grad(loss, [x, y, a])
        if not cfg.freeze_img:
            d.images = opt.step("images", d.images, gx.value, cfg.lr_img)
        if not cfg.freeze_txt:
            d.texts = opt.step("texts", d.texts, gy.value, cfg.lr_txt)
        new_alpha = opt.step("alpha", np.array([[d.alpha]]), ga.value, cfg.lr_alpha)
        d.alpha = max(float(new_alpha[0, 0]), ALPHA_FLOOR)
        history["loss"].append(loss.item())
        history["alpha"].append(d.alpha)
        history["segments"].append((ti, s))
    if model.frozen_digest() != frozen0:
        raise DistillError("frozen backbone weights changed during distillation")
    d.provenance.update({"method": "trajectory", "config": cfg.to_dict()})
    return d, history


def mmd_distill(ds: PairedDataset, spec: BackboneSpec, cfg: DistillConfig, init: DistilledSet | None = None) -> tuple[DistilledSet, dict]:
    """Distribution matching: align mean embeddings of real and distilled data
    under a freshly initialized model at every step, per modality."""
    cfg.validate()
    d = init.copy() if init is not None else init_distilled(ds, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xDA]))
    opt = _Momentum(cfg.momentum)
    n = len(ds)
    b = min(cfg.real_batch, n)
    history: dict = {"loss": []}
    for step in range(cfg.outer_steps):
        model = VLModel(spec, ds.e_txt, init_seed=int(rng.integers(2**31)))
        idx = np.arange(n) if b == n else rng.choice(n, size=b, replace=False)
        pick = rng.integers(0, ds.K, size=idx.size)
        real_i = T.mean_rows(model.encode_image(ds.images[idx]))
        real_t = T.mean_rows(model.encode_text(ds.captions[idx * ds.K + pick]))
        g = T.Graph()
        x = g.variable(d.images, "images")
        y = g.variable(d.texts, "texts")
        syn_i = T.mean_rows(model.encode_image(x))
        syn_t = T.mean_rows(model.encode_text(y))
        loss = T.frobenius_sq(syn_i - real_i) + T.frobenius_sq(syn_t - real_t)
        gx, gy = T.grad(loss, [x, y])
        if not cfg.freeze_img:
            d.images = opt.step("images", d.images, gx.value, cfg.lr_img)
        if not cfg.freeze_txt:
            d.texts = opt.step("texts", d.texts, gy.value, cfg.lr_txt)
        history["loss"].append(loss.item())
    d.provenance.update({"method": "mmd", "config": cfg.to_dict()})
    return d, history


def save_distilled(d: DistilledSet, path) -> None:
    meta = {"kind": "distilled_set", "provenance": d.provenance}
    blocks = {"images": d.images, "texts": d.texts, "alpha": np.array([[d.alpha]])}
    container.save(path, MAGIC, meta, blocks)


def load_distilled(path) -> DistilledSet:
    meta, blocks = container.load(path, MAGIC)
    return DistilledSet(blocks["images"], blocks["texts"], float(blocks["alpha"][0, 0]), meta["provenance"])

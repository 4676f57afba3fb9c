"""Seeded synthetic paired-modality datasets.

Continuous mode: each item has a latent ``z ~ N(0, I_k)``; the image input is
``W_x z + sigma_img * noise`` and each of its K captions is
``W_y z + sigma_txt * noise``. ``W_x`` (d_img x k) and ``W_y`` (e_txt x k) have
unit-norm columns and are drawn once per seed.

Class-caption mode: the latent is one of C fixed class latents and every
caption is the class template embedding (or, with ``multi_caption``, one of K
fixed perturbed prompt variants of it).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import container

MAGIC = b"BVLD"
SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 500
    K: int = 5
    latent_dim: int = 16
    d_img: int = 64
    e_txt: int = 32
    sigma_img: float = 0.1
    sigma_txt: float = 0.1
    mode: Literal["continuous", "class"] = "continuous"
    n_classes: int = 10
    multi_caption: bool = False
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_train", "n_val", "n_test", "K", "latent_dim", "d_img", "e_txt"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.latent_dim > min(self.d_img, self.e_txt):
            raise ConfigError("latent_dim must not exceed min(d_img, e_txt)")
        if self.sigma_img < 0 or self.sigma_txt < 0:
            raise ConfigError("noise std-devs must be non-negative")
        if self.mode not in ("continuous", "class"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "class" and self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown datagen keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return container.config_digest(self.to_dict())


@dataclass
class PairedDataset:
    """N items; item i owns caption rows ``i*K .. i*K+K-1`` of ``captions``."""

    images: np.ndarray  # N x d_img
    captions: np.ndarray  # (N*K) x e_txt
    K: int
    split: str
    latents: np.ndarray | None = None  # N x k
    labels: np.ndarray | None = None  # class-caption mode only
    gen_config_hash: str = ""
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.captions.shape[0] != self.images.shape[0] * self.K:
            raise ValueError("every item must have exactly K captions")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def d_img(self) -> int:
        return self.images.shape[1]

    @property
    def e_txt(self) -> int:
        return self.captions.shape[1]

    def captions_of(self, i: int) -> np.ndarray:
        return self.captions[i * self.K : (i + 1) * self.K]

    def mean_captions(self) -> np.ndarray:
        return self.captions.reshape(len(self), self.K, self.e_txt).mean(axis=1)

    def subset(self, idx) -> "PairedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        cap_idx = (idx[:, None] * self.K + np.arange(self.K)[None, :]).ravel()
        return PairedDataset(
            images=self.images[idx],
            captions=self.captions[cap_idx],
            K=self.K,
            split=self.split,
            latents=None if self.latents is None else self.latents[idx],
            labels=None if self.labels is None else self.labels[idx],
            gen_config_hash=self.gen_config_hash,
            config=self.config,
        )


def _unit_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    w = rng.standard_normal((rows, cols))
    return w / np.linalg.norm(w, axis=0, keepdims=True)


def generate(config: GenConfig) -> dict[str, PairedDataset]:
    """Generate train/val/test splits; a pure function of ``config``."""
    config.validate()
    ss = np.random.SeedSequence(config.seed)
    proj_seq, class_seq, *split_seqs = ss.spawn(2 + len(SPLITS))
    proj_rng = np.random.default_rng(proj_seq)
    wx = _unit_columns(proj_rng, config.d_img, config.latent_dim)
    wy = _unit_columns(proj_rng, config.e_txt, config.latent_dim)

    class_latents = variants = None
    if config.mode == "class":
        crng = np.random.default_rng(class_seq)
        class_latents = crng.standard_normal((config.n_classes, config.latent_dim))
        # fixed per-class prompt variants, shared by every split
        variants = crng.standard_normal((config.n_classes, config.K, config.e_txt))

    sizes = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    digest = config.digest()
    out = {}
    for split, seq in zip(SPLITS, split_seqs):
        rng = np.random.default_rng(seq)
        n = sizes[split]
        labels = None
        if config.mode == "continuous":
            z = rng.standard_normal((n, config.latent_dim))
            img = z @ wx.T + config.sigma_img * rng.standard_normal((n, config.d_img))
            base = z @ wy.T
            noise = rng.standard_normal((n, config.K, config.e_txt))
            caps = base[:, None, :] + config.sigma_txt * noise
        else:
            labels = rng.integers(0, config.n_classes, size=n)
            z = class_latents[labels]
            img = z @ wx.T + config.sigma_img * rng.standard_normal((n, config.d_img))
            template = class_latents @ wy.T  # C x e_txt
            if config.multi_caption:
                per_class = template[:, None, :] + config.sigma_txt * variants
            else:
                per_class = np.repeat(template[:, None, :], config.K, axis=1)
            caps = per_class[labels]
        out[split] = PairedDataset(
            images=img,
            captions=caps.reshape(n * config.K, config.e_txt),
            K=config.K,
            split=split,
            latents=z,
            labels=None if labels is None else labels.astype(np.float64),
            gen_config_hash=digest,
            config=config.to_dict(),
        )
    return out


def save_dataset(ds: PairedDataset, path) -> None:
    blocks = {"images": ds.images, "captions": ds.captions}
    if ds.latents is not None:
        blocks["latents"] = ds.latents
    if ds.labels is not None:
        blocks["labels"] = ds.labels.reshape(-1, 1).astype(np.float64)
    meta = {
        "kind": "paired_dataset",
        "split": ds.split,
        "K": ds.K,
        "gen_config_hash": ds.gen_config_hash,
        "config": ds.config,
    }
    container.save(path, MAGIC, meta, blocks)


def load_dataset(path) -> PairedDataset:
    meta, blocks = container.load(path, MAGIC)
    labels = blocks.get("labels")
    return PairedDataset(
        images=blocks["images"],
        captions=blocks["captions"],
        K=int(meta["K"]),
        split=meta["split"],
        latents=blocks.get("latents"),
        labels=None if labels is None else labels.ravel(),
        gen_config_hash=meta["gen_config_hash"],
        config=meta["config"],
    )

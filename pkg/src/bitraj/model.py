"""Vision-language model family.

The image tower is a fixed-seed backbone (the "pretrained" stand-in) followed
by a trainable linear projection; the text side is a trainable projection of
embedding-space text. Both outputs are L2-normalized.

Trainable parameters depend on the matching scope:

* ``full``: every backbone layer weight, ``img_proj``, ``txt_proj``.
* ``lora``: backbone weights are frozen; each target layer gets adapters
  ``lora_A`` (d_out x r) and ``lora_B`` (r x d_in) with W' = W + A @ B,
  plus ``img_proj`` and ``txt_proj``.

Flattening order (ParamVector layout) is backbone layers in index order
(``weight`` for full scope, ``lora_A`` then ``lora_B`` for lora scope),
then ``img_proj``, then ``txt_proj``. Everything except ``txt_proj`` is on
the image side.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from typing import Literal, Mapping

import numpy as np

from . import container
from . import tensor as T
from .tensor import Tensor

BACKBONE_KINDS = ("identity", "random_linear", "one_hidden_tanh")
TEXT_PARAM = "txt_proj"
LORA_INIT_STD = 0.02


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class LoraSpec:
    rank: int
    targets: tuple[int, ...] = (0,)

    def to_dict(self) -> dict:
        return {"rank": self.rank, "targets": list(self.targets)}

    @classmethod
    def from_dict(cls, d: dict) -> "LoraSpec":
        unknown = set(d) - {"rank", "targets"}
        if unknown:
            raise ModelError(f"unknown lora keys: {sorted(unknown)}")
        return cls(rank=int(d["rank"]), targets=tuple(int(t) for t in d.get("targets", (0,))))


@dataclass(frozen=True)
class BackboneSpec:
    kind: Literal["identity", "random_linear", "one_hidden_tanh"] = "identity"
    in_dim: int = 64
    hidden_dim: int = 64
    out_dim: int = 64
    seed: int = 0
    lora: LoraSpec | None = None
    embed_dim: int = 32

    @property
    def scope(self) -> str:
        return "lora" if self.lora is not None else "full"

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(d_out, d_in) of every backbone weight matrix."""
        if self.kind == "identity":
            return []
        if self.kind == "random_linear":
            return [(self.out_dim, self.in_dim)]
        if self.kind == "one_hidden_tanh":
            return [(self.hidden_dim, self.in_dim), (self.out_dim, self.hidden_dim)]
        raise ModelError(f"unknown backbone kind {self.kind!r}")

    @property
    def feature_dim(self) -> int:
        return self.in_dim if self.kind == "identity" else self.out_dim

    def validate(self) -> None:
        if self.kind not in BACKBONE_KINDS:
            raise ModelError(f"unknown backbone kind {self.kind!r}")
        if min(self.in_dim, self.hidden_dim, self.out_dim, self.embed_dim) < 1:
            raise ModelError("backbone dims must be >= 1")
        if self.lora is not None:
            shapes = self.layer_shapes()
            if not shapes:
                raise ModelError("LoRA needs a backbone with weight layers")
            for t in self.lora.targets:
                if not 0 <= t < len(shapes):
                    raise ModelError(f"LoRA target layer {t} does not exist")
                if not 1 <= self.lora.rank < min(shapes[t]):
                    raise ModelError(
                        f"LoRA rank {self.lora.rank} must satisfy 1 <= r < {min(shapes[t])}"
                    )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lora"] = None if self.lora is None else self.lora.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown backbone keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("lora") is not None:
            d["lora"] = LoraSpec.from_dict(d["lora"])
        return cls(**d)


def arch_digest(spec: BackboneSpec, e_txt: int) -> str:
    return container.config_digest({"backbone": spec.to_dict(), "e_txt": e_txt})


@dataclass
class ParamVector:
    values: np.ndarray
    layout: list[tuple[str, tuple[int, int], int]]
    scope: str

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], scope: str) -> "ParamVector":
        layout, chunks, offset = [], [], 0
        for name, arr in arrays.items():
            layout.append((name, tuple(arr.shape), offset))
            chunks.append(np.asarray(arr, dtype=np.float64).ravel())
            offset += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, layout, scope)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, shape, off in self.layout:
            n = shape[0] * shape[1]
            out[name] = self.values[off : off + n].reshape(shape).copy()
        return out

    def layout_json(self) -> list:
        return [[n, list(s), o] for n, s, o in self.layout]

    def __len__(self) -> int:
        return self.values.size


def split_sides(names) -> tuple[list[str], list[str]]:
    """(image-side names, text-side names) in layout order."""
    img = [n for n in names if n != TEXT_PARAM]
    txt = [n for n in names if n == TEXT_PARAM]
    return img, txt


class VLModel:
    """Frozen backbone weights plus trainable parameters for one scope."""

    def __init__(self, spec: BackboneSpec, e_txt: int, init_seed: int = 0):
        spec.validate()
        self.spec = spec
        self.e_txt = e_txt
        self.init_seed = init_seed
        self.scope = spec.scope
        brng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xB0]))
        weights = [brng.standard_normal(s) / np.sqrt(s[1]) for s in spec.layer_shapes()]
        prng = np.random.default_rng(np.random.SeedSequence([init_seed, 0x9A]))
        self.frozen: dict[str, np.ndarray] = {}
        self.params: dict[str, np.ndarray] = {}
        h = spec.embed_dim
        targets = set(spec.lora.targets) if spec.lora is not None else set()
        for i, w in enumerate(weights):
            if self.scope == "full":
                self.params[f"backbone.{i}.weight"] = w
            else:
                self.frozen[f"backbone.{i}.weight"] = w
                if i in targets:
                    r = spec.lora.rank
                    self.params[f"backbone.{i}.lora_A"] = LORA_INIT_STD * prng.standard_normal((w.shape[0], r))
                    self.params[f"backbone.{i}.lora_B"] = np.zeros((r, w.shape[1]))
        fd = spec.feature_dim
        self.params["img_proj"] = prng.standard_normal((fd, h)) / np.sqrt(fd)
        self.params[TEXT_PARAM] = prng.standard_normal((e_txt, h)) / np.sqrt(e_txt)

    # -- parameters -----------------------------------------------------
    @property
    def param_names(self) -> list[str]:
        return list(self.params)

    def param_vector(self) -> ParamVector:
        return ParamVector.from_arrays(self.params, self.scope)

    def load_param_vector(self, pv: ParamVector) -> None:
        arrays = pv.to_arrays()
        if [(n, tuple(a.shape)) for n, a in arrays.items()] != [
            (n, a.shape) for n, a in self.params.items()
        ]:
            raise ModelError("parameter layout does not match this model")
        self.params = arrays

    def n_trainable(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def frozen_digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.frozen):
            h.update(name.encode())
            h.update(self.frozen[name].tobytes())
        return h.hexdigest()

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}

    # -- forward --------------------------------------------------------
    def _get(self, params: Mapping[str, Tensor] | None, name: str) -> Tensor:
        if params is not None and name in params:
            return params[name]
        if name in self.params:
            return Tensor(self.params[name])
        return Tensor(self.frozen[name])

    def backbone(self, x, params: Mapping[str, Tensor] | None = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if x.cols != self.spec.in_dim:
            raise ModelError(f"image input dim {x.cols} != backbone in_dim {self.spec.in_dim}")
        h = x
        n_layers = len(self.spec.layer_shapes())
        for i in range(n_layers):
            w = self._get(params, f"backbone.{i}.weight")
            a_name = f"backbone.{i}.lora_A"
            if a_name in self.params:
                w = w + self._get(params, a_name) @ self._get(params, f"backbone.{i}.lora_B")
            h = h @ w.T
            if self.spec.kind == "one_hidden_tanh" and i == 0:
                h = T.tanh(h)
        return h

    def encode_image(self, x, params: Mapping[str, Tensor] | None = None) -> Tensor:
        feats = self.backbone(x, params)
        return T.rowwise_l2_normalize(feats @ self._get(params, "img_proj"))

    def encode_text(self, y, params: Mapping[str, Tensor] | None = None) -> Tensor:
        y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float64))
        if y.cols != self.e_txt:
            raise ModelError(f"text dim {y.cols} != model e_txt {self.e_txt}")
        return T.rowwise_l2_normalize(y @ self._get(params, TEXT_PARAM))


def similarity_matrix(zi: Tensor, zt: Tensor) -> Tensor:
    if zi.shape != zt.shape:
        raise ModelError(f"similarity_matrix: shapes {zi.shape} and {zt.shape} differ")
    return zi @ zt.T


def bidirectional_contrastive_loss(sim: Tensor, tau: float = 1.0) -> Tensor:
    """Symmetric InfoNCE over a square similarity matrix.

    The positive pair is part of each softmax denominator.
    """
    if sim.rows != sim.cols:
        raise ModelError(f"similarity matrix must be square, got {sim.shape}")
    if tau <= 0:
        raise ModelError("tau must be positive")
    n = sim.rows
    s = sim if tau == 1.0 else T.scale(sim, 1.0 / tau)
    total = T.sum(T.row_logsumexp(s)) + T.sum(T.row_logsumexp(s.T)) - T.scale(T.trace(s), 2.0)
    return T.scale(total, 0.5 / n)


def contrastive_loss(model: VLModel, images, texts, params=None, tau: float = 1.0) -> Tensor:
    zi = model.encode_image(images, params)
    zt = model.encode_text(texts, params)
    return bidirectional_contrastive_loss(similarity_matrix(zi, zt), tau)


def lora_param_reduction(spec: BackboneSpec) -> tuple[int, int, float]:
    """(full target-layer count, adapter count, fraction removed); not clamped."""
    if spec.lora is None:
        raise ModelError("no LoRA configured")
    shapes = spec.layer_shapes()
    full = adapted = 0
    for t in spec.lora.targets:
        d_out, d_in = shapes[t]
        full += d_out * d_in
        adapted += spec.lora.rank * (d_out + d_in)
    return full, adapted, 1.0 - adapted / full

"""Field predictor and alignment network as pure parameterized functions.

The field maps (query embedding, displacement) to a unit-norm mean
embedding and a clamped scalar variance through an 8x256 ReLU MLP with
the inputs re-concatenated at the fifth layer. The alignment network
maps a full training triplet to an axis-angle rotation vector; its final
layer starts at zero so an untrained alignment is the identity rotation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor

CHECKPOINT_SCHEMA = "relfield/checkpoint/1"


@dataclass
class FieldConfig:
    embedding_dim: int = 32
    width: int = 256
    depth: int = 8
    skip_layer: int = 4          # activation entering this layer gets the input appended
    var_min: float = 1e-4
    var_max: float = 10.0

    def to_dict(self):
        return {
            "embedding_dim": self.embedding_dim,
            "width": self.width,
            "depth": self.depth,
            "skip_layer": self.skip_layer,
            "var_min": self.var_min,
            "var_max": self.var_max,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _he_uniform(rng, n_out, n_in):
    bound = np.sqrt(6.0 / n_in)
    return rng.uniform(-bound, bound, size=(n_out, n_in))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_queries(q: np.ndarray, dim: int, name: str):
    if not np.all(np.isfinite(q)):
        raise ContractViolation(f"{name} contains non-finite values")
    if q.shape[-1] != dim:
        raise ContractViolation(f"{name} has width {q.shape[-1]}, expected {dim}")
    norms = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ContractViolation(f"{name} rows must be unit-norm within 1e-9")


class FieldModel:
    """Predicts a mean embedding and variance for (query, displacement)."""

    def __init__(self, config: FieldConfig, weights, biases):
        self.config = config
        self.weights = weights   # depth hidden layers + output head
        self.biases = biases

    @classmethod
    def init(cls, config: FieldConfig, seed: int) -> "FieldModel":
        rng = np.random.default_rng(seed)
        in_dim = config.embedding_dim + 3
        weights, biases = [], []
        prev = in_dim
        for i in range(config.depth):
            fan_in = prev + (in_dim if i == config.skip_layer else 0)
            weights.append(Tensor(_he_uniform(rng, config.width, fan_in)))
            biases.append(Tensor(np.zeros(config.width)))
            prev = config.width
        # head emits mean logits plus one log-variance logit
        weights.append(Tensor(_he_uniform(rng, config.embedding_dim + 1, prev)))
        biases.append(Tensor(np.zeros(config.embedding_dim + 1)))
        return cls(config, weights, biases)

    def parameters(self):
        return self.weights + self.biases

    def copy(self) -> "FieldModel":
        return FieldModel(
            self.config,
            [Tensor(w.data.copy()) for w in self.weights],
            [Tensor(b.data.copy()) for b in self.biases],
        )


class AlignModel:
    """Maps a (query, displacement, target) triplet to a rotation vector."""

    def __init__(self, embedding_dim: int, width: int, weights, biases):
        self.embedding_dim = embedding_dim
        self.width = width
        self.weights = weights
        self.biases = biases

    @classmethod
    def init(cls, embedding_dim: int, seed: int, width: int = 256) -> "AlignModel":
        rng = np.random.default_rng(seed)
        in_dim = 2 * embedding_dim + 3
        weights = [Tensor(_he_uniform(rng, width, in_dim)),
                   Tensor(np.zeros((3, width)))]  # zero init: identity rotation at step 0
        biases = [Tensor(np.zeros(width)), Tensor(np.zeros(3))]
        return cls(embedding_dim, width, weights, biases)

    def parameters(self):
        return self.weights + self.biases

    def copy(self) -> "AlignModel":
        return AlignModel(
            self.embedding_dim, self.width,
            [Tensor(w.data.copy()) for w in self.weights],
            [Tensor(b.data.copy()) for b in self.biases],
        )


def field_forward(model: FieldModel, q, v, tape=None):
    """(mu, var) tensors; mu rows unit-norm, var clamped to the config bounds.

    No positional encoding is applied to the inputs.
    """
    cfg = model.config
    qt, vt = _as_tensor(q), _as_tensor(v)
    _check_queries(qt.data, cfg.embedding_dim, "query")
    if not np.all(np.isfinite(vt.data)) or vt.data.shape[-1] != 3:
        raise ContractViolation("displacement must be finite 3-vectors")
    x = ad.concat(tape, qt, vt)
    h = x
    for i in range(cfg.depth):
        inp = ad.concat(tape, h, x) if i == cfg.skip_layer else h
        h = ad.relu(tape, ad.dense(tape, inp, model.weights[i], model.biases[i]))
    head = ad.dense(tape, h, model.weights[-1], model.biases[-1])
    mu = ad.l2_normalize(tape, ad.slice_last(tape, head, 0, cfg.embedding_dim))
    logvar = ad.slice_last(tape, head, cfg.embedding_dim, cfg.embedding_dim + 1)
    logvar = ad.reshape(tape, logvar, head.data.shape[:-1])
    logvar = ad.clamp(tape, logvar, np.log(cfg.var_min), np.log(cfg.var_max))
    var = ad.exp(tape, logvar)
    return mu, var


def align_forward(model: AlignModel, q, v, q_t, tape=None):
    """Rotation vector for each triplet row."""
    qt, vt, tt = _as_tensor(q), _as_tensor(v), _as_tensor(q_t)
    _check_queries(qt.data, model.embedding_dim, "query")
    _check_queries(tt.data, model.embedding_dim, "target")
    if not np.all(np.isfinite(vt.data)) or vt.data.shape[-1] != 3:
        raise ContractViolation("displacement must be finite 3-vectors")
    x = ad.concat(tape, ad.concat(tape, qt, vt), tt)
    h = ad.relu(tape, ad.dense(tape, x, model.weights[0], model.biases[0]))
    return ad.dense(tape, h, model.weights[1], model.biases[1])


def augmented_forward(field: FieldModel, align: AlignModel, q, v, q_t, tape=None):
    """Field forward on the displacement rotated into the learned frame.

    Gradients flow into both networks through the rotation; the rotated
    displacement always keeps the norm of the input displacement.
    """
    qt, vt, tt = _as_tensor(q), _as_tensor(v), _as_tensor(q_t)
    r = align_forward(align, qt, vt, tt, tape)
    v_rot = ad.rodrigues(tape, r, vt)
    return field_forward(field, qt, v_rot, tape)


# ---------------------------------------------------------------------------
# checkpoints

def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, field: FieldModel, align: AlignModel | None,
                    meta: dict | None = None):
    arrays = {}
    for i, (w, b) in enumerate(zip(field.weights, field.biases)):
        arrays[f"field_w{i}"] = w.data
        arrays[f"field_b{i}"] = b.data
    if align is not None:
        for i, (w, b) in enumerate(zip(align.weights, align.biases)):
            arrays[f"align_w{i}"] = w.data
            arrays[f"align_b{i}"] = b.data
    header = {
        "schema": CHECKPOINT_SCHEMA,
        "field_config": field.config.to_dict(),
        "align_width": align.width if align is not None else None,
        "variant": "aligned" if align is not None else "base",
        "meta": meta or {},
    }
    arrays["header"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path, expect_embedding_dim: int | None = None):
    """Returns (field, align_or_none, header). Mismatched E is an error."""
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("schema") != CHECKPOINT_SCHEMA:
            raise ValueError(f"unsupported checkpoint schema in {path}")
        cfg = FieldConfig.from_dict(header["field_config"])
        if (expect_embedding_dim is not None
                and cfg.embedding_dim != expect_embedding_dim):
            raise ValueError(
                f"checkpoint embedding dim {cfg.embedding_dim} does not match "
                f"required {expect_embedding_dim}")
        n_layers = cfg.depth + 1
        weights = [Tensor(data[f"field_w{i}"]) for i in range(n_layers)]
        biases = [Tensor(data[f"field_b{i}"]) for i in range(n_layers)]
        field = FieldModel(cfg, weights, biases)
        align = None
        if header["variant"] == "aligned":
            aw = [Tensor(data["align_w0"]), Tensor(data["align_w1"])]
            ab = [Tensor(data["align_b0"]), Tensor(data["align_b1"])]
            align = AlignModel(cfg.embedding_dim, header["align_width"], aw, ab)
    return field, align, header

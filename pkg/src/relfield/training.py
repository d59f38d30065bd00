"""Triplet datasets, augmentation, the cosine NLL loss, and the training loop.

A viewpoint cloud of n sampled points yields all n^2 ordered pairs as
(query, displacement, target) triplets; training minimizes the mean of
(1 - cos)^2 / (2 var) + log(var)/2 over minibatches, optionally routing
each displacement through the alignment rotation first.
"""

from __future__ import annotations

import json
import tempfile
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, TrainingDivergence
from .models import (AlignModel, FieldConfig, FieldModel, augmented_forward,
                     field_forward)


class DatasetError(ValueError):
    """Not enough data to build the requested triplet set."""


@dataclass
class TrainConfig:
    points_per_viewpoint: int = 200
    perturb_scale: float = 0.05
    learning_rate: float = 1e-3
    batch_size: int = 1024
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    variant: str = "base"            # "base" or "aligned"
    augment: bool = True
    freeze_align: bool = False       # keep g pinned (used for equivalence checks)
    field: FieldConfig = dc_field(default_factory=FieldConfig)

    def to_dict(self):
        d = self.__dict__.copy()
        d["field"] = self.field.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["field"] = FieldConfig.from_dict(d["field"])
        return cls(**d)


@dataclass
class TripletSet:
    q: np.ndarray     # (M, E) unit rows
    v: np.ndarray     # (M, 3) meters
    q_t: np.ndarray   # (M, E) unit rows

    def __len__(self):
        return self.q.shape[0]

    @staticmethod
    def concatenate(sets):
        return TripletSet(
            q=np.concatenate([s.q for s in sets]),
            v=np.concatenate([s.v for s in sets]),
            q_t=np.concatenate([s.q_t for s in sets]),
        )


def build_triplets(positions: np.ndarray, embeddings: np.ndarray, n: int,
                   rng: np.random.Generator) -> TripletSet:
    """All n^2 ordered pairs (including i=j) over n sampled cloud points."""
    total = positions.shape[0]
    if total < n:
        raise DatasetError(f"cloud has {total} points, need at least {n}")
    idx = rng.choice(total, size=n, replace=False)
    p = positions[idx]
    e = embeddings[idx]
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    return TripletSet(q=e[ii], v=p[jj] - p[ii], q_t=e[jj])


def random_rotations(rng: np.random.Generator, count: int) -> np.ndarray:
    """Uniform rotation matrices from normalized Gaussian quaternions."""
    quat = rng.normal(size=(count, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    w, x, y, z = quat[:, 0], quat[:, 1], quat[:, 2], quat[:, 3]
    m = np.empty((count, 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def augment_displacements(v: np.ndarray, rng: np.random.Generator,
                          perturb_scale: float, rotate: bool = True) -> np.ndarray:
    """Perturb then rotate: R_random(v + eps), eps ~ N(0, perturb_scale^2 I)."""
    out = v + rng.normal(scale=perturb_scale, size=v.shape) if perturb_scale > 0 \
        else v.copy()
    if rotate:
        rot = random_rotations(rng, v.shape[0])
        out = np.einsum("nij,nj->ni", rot, out)
    return out


def nll_loss(tape, mu, var, q_t) -> Tensor:
    """Mean of (1 - cos(q_t, mu))^2 / (2 var) + log(var) / 2 over the batch."""
    q_t = q_t if isinstance(q_t, Tensor) else Tensor(q_t)
    cos = ad.cosine(tape, q_t, mu)
    resid = ad.rsub_const(tape, cos, 1.0)
    num = ad.mul(tape, resid, resid)
    ratio = ad.div(tape, num, ad.scale(tape, var, 2.0))
    per = ad.add(tape, ratio, ad.scale(tape, ad.log(tape, var), 0.5))
    return ad.mean_all(tape, per)


@dataclass
class TrainResult:
    field: FieldModel                 # best-validation parameters
    align: AlignModel | None
    log: list                         # per-epoch records
    best_epoch: int
    best_val: float
    bad_epochs: int
    optimizer_state: dict
    last_field: FieldModel            # live parameters, for exact resume
    last_align: AlignModel | None
    last_epoch: int


def _forward(config: TrainConfig, field, align, q, v, q_t, tape=None):
    if config.variant == "aligned":
        return augmented_forward(field, align, q, v, q_t, tape)
    return field_forward(field, q, v, tape)


def evaluate_split(config: TrainConfig, field, align, data: TripletSet,
                   batch_size: int = 4096) -> dict:
    losses, cosines, variances = [], [], []
    for lo in range(0, len(data), batch_size):
        hi = min(lo + batch_size, len(data))
        mu, var = _forward(config, field, align, data.q[lo:hi], data.v[lo:hi],
                           data.q_t[lo:hi])
        cos = np.sum(mu.data * data.q_t[lo:hi], axis=-1)
        loss = np.mean((1 - cos) ** 2 / (2 * var.data) + 0.5 * np.log(var.data))
        losses.append(loss * (hi - lo))
        cosines.append(cos.sum())
        variances.append(var.data.sum())
    n = len(data)
    return {
        "loss": float(sum(losses) / n),
        "mean_cos": float(sum(cosines) / n),
        "mean_var": float(sum(variances) / n),
    }


def _dump_diagnostic(batch: dict) -> str:
    handle = tempfile.NamedTemporaryFile(prefix="relfield-diverged-",
                                         suffix=".npz", delete=False)
    np.savez(handle, **batch)
    handle.close()
    return handle.name


def train(train_set: TripletSet, val_set: TripletSet | None,
          config: TrainConfig, resume: dict | None = None) -> TrainResult:
    """Minibatch Adam on the NLL; early-stops on validation plateau.

    Deterministic given config.seed: per-epoch shuffling and augmentation
    draw from generators keyed by (seed, epoch), so a run resumed from a
    checkpointed epoch continues the exact trajectory of an uninterrupted
    run (optimizer moments are part of the resume state).
    """
    if resume is not None:
        field = resume["field"]
        align = resume.get("align")
        start_epoch = resume["epoch"]
        log = list(resume.get("log", []))
        best_val = resume.get("best_val", np.inf)
        bad_epochs = resume.get("bad_epochs", 0)
    else:
        field = FieldModel.init(config.field, seed_of(config.seed, 1))
        align = (AlignModel.init(config.field.embedding_dim, seed_of(config.seed, 2))
                 if config.variant == "aligned" else None)
        start_epoch = 0
        log = []
        best_val = np.inf
        bad_epochs = 0
    params = list(field.parameters())
    if config.variant == "aligned" and not config.freeze_align:
        params += align.parameters()
    opt = ad.Adam(params, lr=config.learning_rate)
    if resume is not None and resume.get("adam"):
        opt.t = resume["adam"]["t"]
        opt.m = [m.copy() for m in resume["adam"]["m"]]
        opt.v = [v.copy() for v in resume["adam"]["v"]]

    best_field, best_align = field.copy(), align.copy() if align else None
    best_epoch = start_epoch - 1
    epoch = start_epoch - 1
    for epoch in range(start_epoch, config.max_epochs):
        shuffle_rng = np.random.default_rng([config.seed, 11, epoch])
        aug_rng = np.random.default_rng([config.seed, 7, epoch])
        order = shuffle_rng.permutation(len(train_set))
        epoch_loss = 0.0
        for lo in range(0, len(order), config.batch_size):
            sel = order[lo:lo + config.batch_size]
            q, v, q_t = train_set.q[sel], train_set.v[sel], train_set.q_t[sel]
            if config.augment:
                v = augment_displacements(v, aug_rng, config.perturb_scale)
            tape = ad.Tape()
            mu, var = _forward(config, field, align, q, v, q_t, tape)
            loss = nll_loss(tape, mu, var, q_t)
            if not np.isfinite(loss.data):
                path = _dump_diagnostic({"q": q, "v": v, "q_t": q_t})
                raise TrainingDivergence(
                    f"non-finite loss at epoch {epoch}; offending batch saved "
                    f"to {path}")
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
            epoch_loss += float(loss.data) * len(sel)
        record = {"epoch": epoch, "split": "train",
                  "loss": epoch_loss / len(train_set)}
        log.append(record)
        if val_set is not None and len(val_set):
            metrics = evaluate_split(config, field, align, val_set)
            log.append({"epoch": epoch, "split": "val", **metrics})
            if metrics["loss"] < best_val - 1e-9:
                best_val = metrics["loss"]
                best_field, best_align = field.copy(), align.copy() if align else None
                best_epoch = epoch
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= config.patience:
                    break
        else:
            best_field, best_align = field.copy(), align.copy() if align else None
            best_epoch = epoch
    opt_state = {"t": opt.t, "m": [m.copy() for m in opt.m],
                 "v": [v.copy() for v in opt.v]}
    return TrainResult(field=best_field, align=best_align, log=log,
                       best_epoch=best_epoch, best_val=best_val,
                       bad_epochs=bad_epochs, optimizer_state=opt_state,
                       last_field=field, last_align=align, last_epoch=epoch)


def seed_of(*parts) -> int:
    """Stable derived seed from integer parts."""
    h = 0
    for p in parts:
        h = (h * 1000003 + int(p)) % (2 ** 63)
    return h


def write_log(path, log):
    with open(path, "w") as fh:
        for record in log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

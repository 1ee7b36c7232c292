"""Projection head and metric training: a single-hidden-layer MLP with
unit-norm output, supervised-contrastive / triplet losses with analytic
gradients, cosine-annealed SGD, and early stopping on validation mAP.

All trainer math is float64 so the finite-difference gradient checks are
meaningful; feature files store float32.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

FEATURES_MAGIC = b"CLVR"
CHECKPOINT_MAGIC = b"CLVH"
NORM_EPS = 1e-12


# ---------------------------------------------------------------------------
# projection head

@dataclass
class HeadParams:
    """MLP weights: z = normalize(relu(h @ w1 + b1) @ w2 + b2)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @staticmethod
    def init(in_dim, hidden_dim, out_dim, rng):
        return HeadParams(
            w1=rng.standard_normal((in_dim, hidden_dim)) * math.sqrt(2.0 / in_dim),
            b1=np.zeros(hidden_dim),
            w2=rng.standard_normal((hidden_dim, out_dim)) * math.sqrt(2.0 / hidden_dim),
            b2=np.zeros(out_dim),
        )

    @property
    def dims(self):
        return self.w1.shape[0], self.w1.shape[1], self.w2.shape[1]

    def copy(self):
        return HeadParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


def _forward_cache(h, params):
    """Batch forward pass keeping intermediates for the backward pass."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    a = h @ params.w1 + params.b1
    r = np.maximum(a, 0.0)
    u = r @ params.w2 + params.b2
    norms = np.linalg.norm(u, axis=1)
    guarded = norms < NORM_EPS
    safe = np.where(guarded, NORM_EPS, norms)
    z = u / safe[:, None]
    if guarded.any():
        log.warning("epsilon-guarded normalization on %d embeddings", int(guarded.sum()))
    return z, {"h": h, "a": a, "r": r, "u": u, "safe": safe, "guarded": guarded,
               "params": params}


def head_forward(h, params: HeadParams):
    """Representation(s) -> unit-norm embedding(s); accepts (d,) or (n, d)."""
    single = np.asarray(h).ndim == 1
    z, _ = _forward_cache(h, params)
    return z[0] if single else z


def head_backward(cache, dz):
    """Gradients of a scalar loss w.r.t. parameters and inputs, given dL/dz.

    Returns (HeadParams of gradients, dL/dh). ReLU uses subgradient 0 at the
    kink; guarded rows (near-zero pre-normalization) differentiate z = u/eps.
    """
    params = cache["params"]
    z = cache["u"] / cache["safe"][:, None]
    dot = (z * dz).sum(axis=1, keepdims=True)
    du = (dz - z * dot) / cache["safe"][:, None]
    du[cache["guarded"]] = dz[cache["guarded"]] / NORM_EPS
    dw2 = cache["r"].T @ du
    db2 = du.sum(axis=0)
    dr = du @ params.w2.T
    da = dr * (cache["a"] > 0.0)
    dw1 = cache["h"].T @ da
    db1 = da.sum(axis=0)
    dh = da @ params.w1.T
    return HeadParams(dw1, db1, dw2, db2), dh


# ---------------------------------------------------------------------------
# losses and schedule

def supcon_loss(embeddings, labels, tau, apply_log=True):
    """Supervised-contrastive loss over a labeled batch of embeddings.

    Mean over anchors with at least one same-label positive of the per-anchor
    term -(1/|P(i)|) sum_p log softmax ratio (see _kernels for the exact
    definition). Returns (loss, gradient w.r.t. embeddings).
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    z = np.ascontiguousarray(np.asarray(embeddings, dtype=np.float64))
    labs = np.ascontiguousarray(np.asarray(labels, dtype=np.int64))
    loss, grad, _ = _kernels.supcon_loss_grad(z, labs, float(tau), bool(apply_log))
    return float(loss), np.asarray(grad)


def triplet_loss(anchor, positive, negative, margin):
    """max(0, ||a-p|| - ||a-n|| + margin) with analytic (sub)gradients.

    Returns (loss, (da, dp, dn)); the subgradient is 0 at the hinge kink and
    where a pair distance is exactly zero.
    """
    if margin < 0:
        raise ConfigError("margin must be nonnegative")
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(positive, dtype=np.float64)
    n = np.asarray(negative, dtype=np.float64)
    dp = float(np.linalg.norm(a - p))
    dn = float(np.linalg.norm(a - n))
    loss = dp - dn + margin
    zeros = np.zeros_like(a)
    if loss <= 0.0:
        return 0.0, (zeros, zeros.copy(), zeros.copy())
    up = (a - p) / dp if dp > 0 else zeros
    un = (a - n) / dn if dn > 0 else zeros
    return loss, (up - un, -up, un)


def cosine_lr(t, total, lr_max, lr_min=0.0):
    """Cosine annealing: lr_min + (lr_max - lr_min) (1 + cos(pi t / total)) / 2,
    clamped to lr_min past the horizon."""
    if t < 0:
        raise ConfigError("step must be nonnegative")
    if t == 0:
        return lr_max
    if t >= total:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    lr: float = 0.01
    lr_min: float = 0.0
    temperature: float = 0.07
    epochs_max: int = 100
    patience: int = 10
    instances_per_batch: int = 8
    views_per_instance: int = 4
    seed: int = 0
    loss: str = "supcon"
    triplet_margin: float = 0.3
    momentum: float = 0.0
    hidden_dim: int = 768
    embed_dim: int = 128
    supcon_log: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.loss not in ("supcon", "triplet"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.instances_per_batch < 1 or self.views_per_instance < 1:
            raise ConfigError("batch composition must be positive")


def _epoch_batches(by_label, labels_sorted, p, k, rng):
    """P instances x K views per batch; views drawn without replacement
    within the batch (with replacement when an instance has < K views)."""
    order = rng.permutation(len(labels_sorted))
    batches = []
    for g0 in range(0, len(order), p):
        idxs = []
        for li in order[g0:g0 + p]:
            pool = by_label[labels_sorted[li]]
            if pool.shape[0] >= k:
                pick = rng.permutation(pool.shape[0])[:k]
            else:
                pick = rng.integers(0, pool.shape[0], k)
            idxs.extend(int(pool[j]) for j in pick)
        batches.append(np.array(idxs, dtype=np.intp))
    return batches


def _triplet_batch(z, labels, margin, rng):
    """Random positive/negative per anchor; mean loss and embedding grads."""
    n = z.shape[0]
    dz = np.zeros_like(z)
    total = 0.0
    count = 0
    for i in range(n):
        pos = np.flatnonzero((labels == labels[i]) & (np.arange(n) != i))
        neg = np.flatnonzero(labels != labels[i])
        if pos.size == 0 or neg.size == 0:
            continue
        pi = int(pos[rng.integers(0, pos.size)])
        ni = int(neg[rng.integers(0, neg.size)])
        loss, (da, dp, dn) = triplet_loss(z[i], z[pi], z[ni], margin)
        total += loss
        dz[i] += da
        dz[pi] += dp
        dz[ni] += dn
        count += 1
    if count == 0:
        return 0.0, dz
    return total / count, dz / count


def train(train_h, train_labels, val_h, val_labels, cfg: TrainConfig, evaluator):
    """Train the projection head; returns (best params, history).

    evaluator(val_embeddings) must return the validation mAP. Training stops
    at epochs_max or after cfg.patience consecutive epochs without
    improvement; the returned parameters are from the best-mAP epoch. The
    whole run is a deterministic function of (inputs, cfg).
    """
    train_h = np.asarray(train_h, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    val_h = np.asarray(val_h, dtype=np.float64)
    if val_h.shape[0] == 0:
        raise ConfigError("validation set must be nonempty")

    rng = np.random.default_rng(cfg.seed)
    params = HeadParams.init(train_h.shape[1], cfg.hidden_dim, cfg.embed_dim, rng)
    velocity = HeadParams(np.zeros_like(params.w1), np.zeros_like(params.b1),
                          np.zeros_like(params.w2), np.zeros_like(params.b2))

    labels_sorted = sorted(set(int(l) for l in train_labels))
    by_label = {lab: np.flatnonzero(train_labels == lab) for lab in labels_sorted}
    for lab in labels_sorted:
        if by_label[lab].shape[0] < cfg.views_per_instance:
            log.warning("instance %d has %d < %d views; sampling with replacement",
                        lab, by_label[lab].shape[0], cfg.views_per_instance)

    history = []
    best_map = -math.inf
    best_params = params.copy()
    bad_epochs = 0
    for epoch in range(1, cfg.epochs_max + 1):
        lr = cosine_lr(epoch - 1, cfg.epochs_max, cfg.lr, cfg.lr_min)
        losses = []
        for idxs in _epoch_batches(by_label, labels_sorted,
                                   cfg.instances_per_batch,
                                   cfg.views_per_instance, rng):
            z, cache = _forward_cache(train_h[idxs], params)
            if cfg.loss == "supcon":
                loss, dz = supcon_loss(z, train_labels[idxs], cfg.temperature,
                                       cfg.supcon_log)
            else:
                loss, dz = _triplet_batch(z, train_labels[idxs],
                                          cfg.triplet_margin, rng)
            grads, _ = head_backward(cache, dz)
            for name in ("w1", "b1", "w2", "b2"):
                g = getattr(grads, name)
                if cfg.momentum > 0.0:
                    v = getattr(velocity, name)
                    v *= cfg.momentum
                    v += g
                    g = v
                getattr(params, name)[...] -= lr * g
            losses.append(loss)

        val_z = head_forward(val_h, params)
        val_map = float(evaluator(val_z))
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_map": val_map, "lr": lr})
        if val_map > best_map:
            best_map = val_map
            best_params = params.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
    return best_params, history


# ---------------------------------------------------------------------------
# encoders (the backbone itself is external; these provide h vectors)

class FileFeatures:
    """Precomputed representations read from a feature file + row sidecar."""

    def __init__(self, matrix, obs_ids):
        self.matrix = np.asarray(matrix)
        self.obs_ids = list(obs_ids)
        self._row = {o: i for i, o in enumerate(self.obs_ids)}

    @staticmethod
    def load(path, sidecar_path=None):
        m, ids = read_features(path, sidecar_path)
        return FileFeatures(m, ids)

    def get(self, obs_id):
        try:
            return self.matrix[self._row[obs_id]]
        except KeyError:
            raise DataError(f"no feature row for observation {obs_id!r}") from None

    def for_ids(self, obs_ids):
        return np.stack([self.get(o) for o in obs_ids])


class ReferenceEncoder:
    """Tiny deterministic stand-in encoder for tests: 16x16 grayscale
    downsample, flatten, fixed seeded random projection."""

    def __init__(self, dim=768, seed=0):
        self.dim = dim
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((256, dim)) / 16.0

    def encode(self, img):
        from .patches import resize_patch
        img = np.asarray(img)
        small = resize_patch(img, 16).astype(np.float64)
        gray = small.mean(axis=2).reshape(-1) / 255.0
        return gray @ self._proj


# ---------------------------------------------------------------------------
# binary formats owned by this module

def write_features(path, matrix, obs_ids, sidecar_path=None):
    """Feature file: magic CLVR, u32 version/count/dim (LE), float32 rows;
    JSON Lines sidecar maps row -> obs_id."""
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.ndim != 2 or matrix.shape[0] != len(obs_ids):
        raise ValueError("matrix must be (n_obs, dim)")
    with open(path, "wb") as f:
        f.write(FEATURES_MAGIC)
        f.write(struct.pack("<III", 1, matrix.shape[0], matrix.shape[1]))
        f.write(matrix.astype("<f4").tobytes(order="C"))
    sidecar = sidecar_path or _sidecar_path(path)
    with open(sidecar, "w") as f:
        for i, obs_id in enumerate(obs_ids):
            f.write(json.dumps({"row": i, "obs_id": obs_id}) + "\n")


def _sidecar_path(path):
    return str(path) + ".rows.jsonl"


def read_features(path, sidecar_path=None):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FEATURES_MAGIC:
            raise DataError(f"{path}: bad feature-file magic {magic!r}")
        version, count, dim = struct.unpack("<III", f.read(12))
        if version != 1:
            raise DataError(f"{path}: unsupported feature-file version {version}")
        data = np.frombuffer(f.read(count * dim * 4), dtype="<f4")
        if data.size != count * dim:
            raise DataError(f"{path}: truncated feature file")
    matrix = data.reshape(count, dim)
    obs_ids = [None] * count
    sidecar = sidecar_path or _sidecar_path(path)
    with open(sidecar) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                obs_ids[rec["row"]] = rec["obs_id"]
            except (ValueError, KeyError, IndexError) as exc:
                raise DataError(f"{sidecar}:{lineno}: bad sidecar row ({exc})") from None
    if any(o is None for o in obs_ids):
        raise DataError(f"{sidecar}: missing rows for {path}")
    return matrix, obs_ids


def write_checkpoint(path, params: HeadParams, state=None):
    """Checkpoint: magic CLVH, u32 version + dims header, float64 params,
    plus a JSON training-state sidecar (epoch, best mAP, rng state)."""
    in_dim, hidden, out_dim = params.dims
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IIII", 1, in_dim, hidden, out_dim))
        for arr in (params.w1, params.b1, params.w2, params.b2):
            f.write(np.asarray(arr, dtype="<f8").tobytes(order="C"))
    with open(str(path) + ".state.json", "w") as f:
        json.dump(state or {}, f, sort_keys=True)
        f.write("\n")


def read_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: bad checkpoint magic {magic!r}")
        version, in_dim, hidden, out_dim = struct.unpack("<IIII", f.read(16))
        if version != 1:
            raise DataError(f"{path}: unsupported checkpoint version {version}")

        def block(shape):
            n = int(np.prod(shape))
            buf = np.frombuffer(f.read(n * 8), dtype="<f8")
            if buf.size != n:
                raise DataError(f"{path}: truncated checkpoint")
            return buf.reshape(shape).copy()

        params = HeadParams(block((in_dim, hidden)), block((hidden,)),
                            block((hidden, out_dim)), block((out_dim,)))
    state = {}
    try:
        with open(str(path) + ".state.json") as f:
            state = json.load(f)
    except FileNotFoundError:
        pass
    return params, state

"""Per-class prototype codebook trained with distance-based cross-entropy.

A codebook holds K prototype vectors per class in the embedding space of a
frozen feature extractor. Class membership is scored by a softmin over
squared Euclidean distances; the training objective combines the resulting
distance-based cross-entropy with a compactness term pulling each sample
toward its nearest same-class prototype. Gradients are written out by hand
so they can be cross-checked against finite differences.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict

import numpy as np

from .fileio import atomic_write_bytes, atomic_write_json

CODEBOOK_SCHEMA_VERSION = 1

# Class probabilities are clamped here before taking logs, so a fully
# mismatched sample yields a large finite loss instead of infinity.
PROB_FLOOR = 1e-30
_LOG_PROB_FLOOR = float(np.log(PROB_FLOOR))

__all__ = [
    "Codebook",
    "PrototypeTrainConfig",
    "assignment_probabilities",
    "class_probability",
    "dce_loss",
    "dce_loss_grads",
    "prototype_loss",
    "prototype_loss_grads",
    "total_loss",
    "total_loss_grad_prototypes",
    "train_prototypes",
    "nearest_prototype_class",
    "save_codebook",
    "load_codebook",
]


@dataclass
class Codebook:
    """Prototype tensor (C, K, D) with its class ids and assignment hardness."""

    prototypes: np.ndarray          # (C, K, D) float64
    class_ids: np.ndarray           # (C,) int
    gamma: float = 1.0
    class_names: dict | None = None  # class id -> display name

    def __post_init__(self) -> None:
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if self.prototypes.ndim != 3:
            raise ValueError("prototypes must have shape (C, K, D)")
        if not np.all(np.isfinite(self.prototypes)):
            raise ValueError("prototypes must be finite")
        if self.class_ids.shape != (self.prototypes.shape[0],):
            raise ValueError("class_ids length must match prototype rows")
        if len(np.unique(self.class_ids)) != len(self.class_ids):
            raise ValueError("class_ids must be unique")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def prototypes_per_class(self) -> int:
        return self.prototypes.shape[1]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[2]

    def class_index(self, class_id: int) -> int:
        rows = np.nonzero(self.class_ids == class_id)[0]
        if rows.size == 0:
            raise KeyError(f"unknown class id {class_id}")
        return int(rows[0])


@dataclass
class PrototypeTrainConfig:
    gamma: float = 1.0
    lam: float = 0.01                 # weight of the compactness term
    prototypes_per_class: int = 1
    learning_rate: float = 0.05
    epochs: int = 200
    batch_size: int | None = None     # None = full batch
    init_jitter: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.lam < 0:
            raise ValueError("lambda weight must be non-negative")
        if self.prototypes_per_class < 1:
            raise ValueError("need at least one prototype per class")
        if self.learning_rate <= 0 or self.epochs < 1:
            raise ValueError("learning rate and epochs must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive or None")


def _check_embedding(f: np.ndarray, codebook: Codebook) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (codebook.dim,):
        raise ValueError(f"embedding shape {f.shape} does not match codebook D={codebook.dim}")
    if not np.all(np.isfinite(f)):
        raise ValueError("embedding must be finite")
    return f


def _sq_dists(f: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance from f to every prototype, shape (C, K)."""
    diff = prototypes - f
    return np.einsum("ckd,ckd->ck", diff, diff)


def assignment_probabilities(f: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Softmin-of-distances membership probabilities over all (C, K) prototypes."""
    f = _check_embedding(f, codebook)
    logits = -codebook.gamma * _sq_dists(f, codebook.prototypes)
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


def class_probability(f: np.ndarray, y: int, codebook: Codebook) -> float:
    """Probability of class y: sum of its K prototype assignment probabilities."""
    row = codebook.class_index(y)
    return float(assignment_probabilities(f, codebook)[row].sum())


def _log_class_probability(f: np.ndarray, row: int, codebook: Codebook) -> float:
    """log p(y|f) via two log-sum-exps, stable for arbitrarily large distances."""
    logits = -codebook.gamma * _sq_dists(f, codebook.prototypes)
    m = logits.max()
    lse_all = m + np.log(np.exp(logits - m).sum())
    my = logits[row].max()
    lse_y = my + np.log(np.exp(logits[row] - my).sum())
    return float(lse_y - lse_all)


def dce_loss(f: np.ndarray, y: int, codebook: Codebook) -> float:
    """Distance-based cross-entropy: -log of the class probability."""
    f = _check_embedding(f, codebook)
    row = codebook.class_index(y)
    log_p = max(_log_class_probability(f, row, codebook), _LOG_PROB_FLOOR)
    return -log_p


def dce_loss_grads(f: np.ndarray, y: int,
                   codebook: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of dce_loss w.r.t. the embedding and the prototype tensor.

    With p the (C, K) assignment probabilities and r the within-class
    renormalization of the true class's row (zero elsewhere), the loss
    gradient w.r.t. each squared distance is gamma * (r - p), which chains
    through d(f, m) = ||f - m||^2.
    """
    f = _check_embedding(f, codebook)
    row = codebook.class_index(y)
    p = assignment_probabilities(f, codebook)
    r = np.zeros_like(p)
    s = p[row].sum()
    r[row] = p[row] / s
    w = codebook.gamma * (r - p)                      # dL/dd, shape (C, K)
    diff = f - codebook.prototypes                    # (C, K, D)
    grad_f = 2.0 * np.einsum("ck,ckd->d", w, diff)
    grad_m = -2.0 * w[:, :, None] * diff
    return grad_f, grad_m


def prototype_loss(f: np.ndarray, y: int, codebook: Codebook) -> float:
    """Squared distance to the nearest same-class prototype (lowest index on ties)."""
    f = _check_embedding(f, codebook)
    row = codebook.class_index(y)
    return float(_sq_dists(f, codebook.prototypes)[row].min())


def prototype_loss_grads(f: np.ndarray, y: int,
                         codebook: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of prototype_loss w.r.t. the embedding and prototype tensor."""
    f = _check_embedding(f, codebook)
    row = codebook.class_index(y)
    dists = _sq_dists(f, codebook.prototypes)[row]
    j = int(np.argmin(dists))
    diff = f - codebook.prototypes[row, j]
    grad_f = 2.0 * diff
    grad_m = np.zeros_like(codebook.prototypes)
    grad_m[row, j] = -2.0 * diff
    return grad_f, grad_m


def _batch_stats(embeddings: np.ndarray, rows: np.ndarray, codebook: Codebook,
                 lam: float) -> tuple[float, np.ndarray]:
    """Mean loss and prototype gradient over a batch, fully vectorized.

    ``rows`` are codebook row indices (not raw class ids).
    """
    M = codebook.prototypes
    C, K, D = M.shape
    N = embeddings.shape[0]
    diff = embeddings[:, None, None, :] - M[None]          # (N, C, K, D)
    d = np.einsum("nckd,nckd->nck", diff, diff)            # (N, C, K)
    logits = -codebook.gamma * d
    m = logits.max(axis=(1, 2), keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=(1, 2))                                 # (N,)
    p = e / z[:, None, None]                               # (N, C, K)
    own = p[np.arange(N), rows]                            # (N, K)
    s = own.sum(axis=1)                                    # class probability per sample
    log_p = np.maximum(np.log(np.maximum(s, PROB_FLOOR)), _LOG_PROB_FLOOR)

    r = np.zeros_like(p)
    r[np.arange(N), rows] = own / s[:, None]
    w = codebook.gamma * (r - p)                           # (N, C, K)
    grad_m = -2.0 * np.einsum("nck,nckd->ckd", w, diff)

    j_near = np.argmin(d[np.arange(N), rows], axis=1)      # (N,)
    near_diff = embeddings - M[rows, j_near]               # (N, D)
    pl = np.einsum("nd,nd->n", near_diff, near_diff)
    np.add.at(grad_m, (rows, j_near), lam * -2.0 * near_diff)

    loss = float(np.mean(-log_p + lam * pl))
    return loss, grad_m / N


def total_loss(embeddings: np.ndarray, labels: np.ndarray, codebook: Codebook,
               lam: float) -> float:
    """Mean over the batch of DCE loss plus lam times the compactness term."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if embeddings.ndim != 2 or embeddings.shape[0] == 0:
        raise ValueError("batch must be a non-empty (N, D) array")
    if labels.shape != (embeddings.shape[0],):
        raise ValueError("labels must align with the embedding rows")
    rows = np.array([codebook.class_index(y) for y in labels])
    loss, _ = _batch_stats(embeddings, rows, codebook, lam)
    return loss


def total_loss_grad_prototypes(embeddings: np.ndarray, labels: np.ndarray,
                               codebook: Codebook, lam: float) -> np.ndarray:
    """Gradient of total_loss w.r.t. the prototype tensor, shape (C, K, D)."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if embeddings.ndim != 2 or embeddings.shape[0] == 0:
        raise ValueError("batch must be a non-empty (N, D) array")
    rows = np.array([codebook.class_index(y) for y in labels])
    _, grad = _batch_stats(embeddings, rows, codebook, lam)
    return grad


def nearest_prototype_class(f: np.ndarray, codebook: Codebook) -> int:
    """Class id of the globally nearest prototype."""
    f = _check_embedding(f, codebook)
    d = _sq_dists(f, codebook.prototypes)
    row = int(np.unravel_index(np.argmin(d), d.shape)[0])
    return int(codebook.class_ids[row])


def train_prototypes(embeddings: np.ndarray, labels: np.ndarray,
                     config: PrototypeTrainConfig,
                     class_names: dict | None = None,
                     ) -> tuple[Codebook, np.ndarray]:
    """Fit the codebook by plain gradient descent on the total loss.

    Prototypes start at the per-class sample means plus a small seeded
    Gaussian jitter. Returns the codebook and the per-epoch loss history
    (loss evaluated on the full data after each update).
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if embeddings.ndim != 2:
        raise ValueError("embeddings must be (N, D)")
    if labels.shape != (embeddings.shape[0],):
        raise ValueError("labels must align with the embedding rows")
    class_ids = np.unique(labels)
    if len(class_ids) < 2:
        raise ValueError("training needs at least two classes to discriminate")
    counts = np.array([(labels == c).sum() for c in class_ids])
    if np.any(counts == 0):
        empty = class_ids[counts == 0]
        raise ValueError(f"classes with zero samples: {empty.tolist()}")
    if embeddings.shape[0] < len(class_ids):
        raise ValueError("need at least one sample per class")
    if len(set(counts.tolist())) > 1:
        warnings.warn("per-class sample counts are unequal", stacklevel=2)

    N, D = embeddings.shape
    K = config.prototypes_per_class
    rng = np.random.default_rng(config.seed)
    protos = np.empty((len(class_ids), K, D))
    for i, c in enumerate(class_ids):
        mean = embeddings[labels == c].mean(axis=0)
        protos[i] = mean + config.init_jitter * rng.standard_normal((K, D))

    codebook = Codebook(prototypes=protos, class_ids=class_ids,
                        gamma=config.gamma, class_names=class_names)
    rows_all = np.searchsorted(class_ids, labels)

    history = np.empty(config.epochs)
    for epoch in range(config.epochs):
        if config.batch_size is None or config.batch_size >= N:
            _, grad = _batch_stats(embeddings, rows_all, codebook, config.lam)
            codebook.prototypes -= config.learning_rate * grad
        else:
            order = rng.permutation(N)
            for start in range(0, N, config.batch_size):
                idx = order[start:start + config.batch_size]
                _, grad = _batch_stats(embeddings[idx], rows_all[idx],
                                       codebook, config.lam)
                codebook.prototypes -= config.learning_rate * grad
        history[epoch], _ = _batch_stats(embeddings, rows_all, codebook,
                                         config.lam)
    return codebook, history


def save_codebook(codebook: Codebook, base_path, train_config=None,
                  seed: int | None = None) -> None:
    """Write <base>.npy (prototype tensor) plus <base>.json metadata."""
    base = str(base_path)
    import io

    buf = io.BytesIO()
    np.save(buf, codebook.prototypes)
    atomic_write_bytes(base + ".npy", buf.getvalue())
    meta = {
        "schema_version": CODEBOOK_SCHEMA_VERSION,
        "num_classes": codebook.num_classes,
        "prototypes_per_class": codebook.prototypes_per_class,
        "dim": codebook.dim,
        "gamma": codebook.gamma,
        "class_ids": codebook.class_ids.tolist(),
        "class_names": ({str(k): v for k, v in codebook.class_names.items()}
                        if codebook.class_names else None),
        "train_config": asdict(train_config) if train_config is not None else None,
        "seed": seed,
    }
    atomic_write_json(base + ".json", meta)


def load_codebook(base_path) -> Codebook:
    base = str(base_path)
    with open(base + ".json") as fh:
        meta = json.load(fh)
    if meta.get("schema_version") != CODEBOOK_SCHEMA_VERSION:
        raise ValueError(f"unsupported codebook schema: {meta.get('schema_version')}")
    protos = np.load(base + ".npy")
    names = meta.get("class_names")
    return Codebook(
        prototypes=protos,
        class_ids=np.array(meta["class_ids"]),
        gamma=meta["gamma"],
        class_names={int(k): v for k, v in names.items()} if names else None,
    )

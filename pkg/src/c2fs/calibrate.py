"""Fine-grained classifier debiasing.

Each fine-class prototype gets a coarse label by kNN vote over the feature
repository, then grows an additional support set from that coarse class's
pool in rounds of ``m`` nearest entries, re-centering after every round.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .repository import FeatureRepository, normalize_rows


class DegeneratePrototype(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationConfig:
    k: int = 10
    m: int = 20
    n: int = 100
    use_true_coarse: bool = False
    pool: str = "coarse"  # "coarse": T_y of the assigned class; "all": the whole repository
    prototype_update: str = "sum_of_means"  # or "pooled_mean"

    def __post_init__(self):
        if self.k <= 0 or self.m <= 0 or self.n < 0:
            raise ValueError("k and m must be positive and n non-negative")
        if self.n > 0 and self.m > self.n:
            raise ValueError(f"m={self.m} must not exceed n={self.n}")
        if self.pool not in ("coarse", "all"):
            raise ValueError(f"unknown pool {self.pool!r}")
        if self.prototype_update not in ("sum_of_means", "pooled_mean"):
            raise ValueError(f"unknown prototype_update {self.prototype_update!r}")


@dataclass
class Prototype:
    fine_label: int
    vector: np.ndarray
    assigned_coarse: Optional[int] = None


@dataclass
class AugmentedSupport:
    original: dict[int, np.ndarray] = field(default_factory=dict)
    additional: dict[int, np.ndarray] = field(default_factory=dict)
    prototypes: dict[int, Prototype] = field(default_factory=dict)
    rounds: dict[int, int] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted(self.original)


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        raise DegeneratePrototype("degenerate prototype: the centroid has zero norm")
    return v / norm


def init_prototype(support: np.ndarray, fine_label: int = 0) -> Prototype:
    """Normalized centroid of the class's support embeddings."""
    s = np.atleast_2d(np.asarray(support, dtype=np.float64))
    if s.shape[0] == 0 or s.size == 0:
        raise ValueError(f"fine class {fine_label}: empty support set")
    return Prototype(fine_label, _unit(s.mean(axis=0)))


def assign_coarse(proto: Prototype, repo: FeatureRepository, k: int = 10) -> int:
    """Majority coarse label among the k nearest entries.

    Vote ties go to the tied class that owns the nearest neighbour.
    """
    nn = repo.knn(proto.vector, k)
    labels = repo.coarse[nn]
    counts = np.bincount(labels, minlength=repo.coarse_count)
    tied = np.flatnonzero(counts == counts.max())
    if len(tied) == 1:
        y = int(tied[0])
    else:
        y = int(next(lab for lab in labels if lab in tied))
    proto.assigned_coarse = y
    return y


def calibrate_class(proto: Prototype, repo: FeatureRepository, config: CalibrationConfig,
                    support: Optional[np.ndarray] = None):
    """Iteratively build S_add for one fine class and correct its prototype.

    ``support`` are the class's (normalized) support embeddings; when omitted
    the initial prototype stands in for their mean. Returns
    ``(prototype, selected indices in selection order, rounds)``.
    """
    if config.pool == "coarse" and proto.assigned_coarse is None:
        raise ValueError(f"fine class {proto.fine_label}: no coarse label assigned")
    restrict = proto.assigned_coarse if config.pool == "coarse" else None
    available = len(repo) if restrict is None else len(repo.subset_by_coarse(restrict))
    if available < config.n:
        raise ValueError(f"fine class {proto.fine_label}: pool has {available} entries, "
                         f"n={config.n} requested")
    sup = proto.vector[None] if support is None else np.atleast_2d(np.asarray(support, np.float64))
    sup_sum, sup_mean = sup.sum(axis=0), sup.mean(axis=0)
    vec = proto.vector
    selected: list[int] = []
    add_sum = np.zeros_like(vec)
    rounds = 0
    while len(selected) < config.n:
        take = min(config.m, config.n - len(selected))
        new = repo.knn(vec, take, restrict_to=restrict, exclude=selected)
        selected.extend(int(i) for i in new)
        add_sum = add_sum + repo.vectors(new).sum(axis=0)
        if config.prototype_update == "sum_of_means":
            vec = _unit(sup_mean + add_sum / len(selected))
        else:
            vec = _unit((sup_sum + add_sum) / (len(sup) + len(selected)))
        rounds += 1
    out = Prototype(proto.fine_label, vec, proto.assigned_coarse)
    return out, np.asarray(selected, dtype=np.int64), rounds


def calibrate_support(support: np.ndarray, labels: np.ndarray, repo: FeatureRepository,
                      config: CalibrationConfig,
                      true_coarse: Optional[dict[int, int]] = None) -> AugmentedSupport:
    """Run the full debiasing path for every fine class of an episode, in label order."""
    support = normalize_rows(support)
    labels = np.asarray(labels)
    aug = AugmentedSupport()
    for y in sorted(set(labels.tolist())):
        s = support[labels == y]
        proto = init_prototype(s, y)
        if config.use_true_coarse:
            if true_coarse is None:
                raise ValueError("use_true_coarse needs the support set's coarse labels")
            proto.assigned_coarse = int(true_coarse[y])
        elif config.pool == "coarse":
            assign_coarse(proto, repo, config.k)
        aug.original[y] = s
        if config.n == 0:
            aug.prototypes[y] = proto
            aug.additional[y] = np.zeros(0, dtype=np.int64)
            aug.rounds[y] = 0
            continue
        final, idx, rounds = calibrate_class(proto, repo, config, s)
        aug.prototypes[y] = final
        aug.additional[y] = idx
        aug.rounds[y] = rounds
    return aug


# ---------------------------------------------------------------- classifiers


def fit_logistic(x: np.ndarray, y: np.ndarray, num_classes: int, l2: float = 1e-3,
                 steps: int = 500, lr: float = 0.5, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Multinomial logistic regression by full-batch gradient descent from zero.

    Minimizes mean cross-entropy + (l2 / 2) * ||W||^2; the bias is not penalized.
    Runs in float32 by default, which is what dominates episode cost.
    """
    x = np.asarray(x, dtype=dtype)
    n, d = x.shape
    onehot = np.zeros((n, num_classes), dtype=dtype)
    onehot[np.arange(n), y] = 1.0
    w = np.zeros((d, num_classes), dtype=dtype)
    b = np.zeros(num_classes, dtype=dtype)
    xt = np.ascontiguousarray(x.T)
    p = np.empty((n, num_classes), dtype=dtype)
    for _ in range(steps):
        np.matmul(x, w, out=p)
        p += b
        p -= p.max(axis=1, keepdims=True)
        np.exp(p, out=p)
        p /= p.sum(axis=1, keepdims=True)
        p -= onehot
        p *= 1.0 / n
        w -= lr * (xt @ p + l2 * w)
        b -= lr * p.sum(axis=0)
    return w, b


@dataclass
class FineClassifier:
    classes: np.ndarray
    head: str
    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    prototypes: Optional[np.ndarray] = None

    def scores(self, queries: np.ndarray) -> np.ndarray:
        q = normalize_rows(queries)
        if self.head == "prototype":
            return q @ self.prototypes.T
        return q @ self.weight + self.bias

    def predict(self, queries: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.scores(queries), axis=1)]


def train_fine_classifier(aug: AugmentedSupport, repo: Optional[FeatureRepository],
                          head: str = "logistic", l2: float = 1e-3, steps: int = 500,
                          lr: float = 0.5) -> FineClassifier:
    """Fit the episode classifier on S_sup plus S_add, each extra entry taking its class's label."""
    classes = np.asarray(aug.classes)
    if head == "prototype":
        protos = []
        for y in classes:
            p = aug.prototypes.get(int(y))
            protos.append(p.vector if p is not None else init_prototype(aug.original[y]).vector)
        return FineClassifier(classes, head, prototypes=np.stack(protos))
    if head != "logistic":
        raise ValueError(f"unknown classifier head {head!r}")
    xs, ys = [], []
    for j, y in enumerate(classes):
        parts = [np.atleast_2d(aug.original[int(y)])]
        extra = aug.additional.get(int(y))
        if extra is not None and len(extra):
            parts.append(repo.vectors(extra))
        block = np.concatenate(parts)
        if len(block) == 0:
            raise ValueError(f"fine class {y}: empty training set")
        xs.append(block)
        ys.append(np.full(len(block), j))
    x = normalize_rows(np.concatenate(xs))
    w, b = fit_logistic(x, np.concatenate(ys), len(classes), l2, steps, lr)
    return FineClassifier(classes, head, weight=w, bias=b)

"""Episodic few-shot evaluation, per-layer fine probes and ablation grids."""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence, Union

import numpy as np
import torch

from .calibrate import (AugmentedSupport, CalibrationConfig, calibrate_support, fit_logistic,
                        train_fine_classifier)
from .data import Dataset
from .repository import FeatureRepository, embed_dataset, normalize_rows

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Episode:
    way: int
    shot: int
    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    episode_seed: int


@dataclass
class EvalReport:
    episode_count: int
    mean_accuracy: float
    ci95_halfwidth: float
    per_episode: list[float]
    errors: list[str] = field(default_factory=list)

    @classmethod
    def from_accuracies(cls, accs: Sequence[float], errors=()) -> "EvalReport":
        a = np.asarray(accs, dtype=np.float64)
        if len(a) == 0:
            return cls(0, float("nan"), float("nan"), [], list(errors))
        return cls(len(a), float(a.mean()), ci95(a), a.tolist(), list(errors))

    def as_dict(self, per_episode: bool = False) -> dict:
        out = {"episode_count": self.episode_count, "mean_accuracy": self.mean_accuracy,
               "ci95_halfwidth": self.ci95_halfwidth, "errors": len(self.errors)}
        if per_episode:
            out["per_episode"] = self.per_episode
        return out


def ci95(accs) -> float:
    a = np.asarray(accs, dtype=np.float64)
    return float(1.96 * a.std() / np.sqrt(len(a)))


# ---------------------------------------------------------------- episodes


def sample_episodes(fine_labels: np.ndarray, way: Union[int, str], shot: int, queries_per_class: int,
                    count: int = 1000, seed: int = 0) -> Iterator[Episode]:
    """Deterministic stream of w-way k-shot episodes over a labeled test set.

    ``way="all"`` uses every fine class. Episode ``i`` draws from
    ``default_rng([seed, i])`` so any prefix of the stream is reproducible.
    """
    labels = np.asarray(fine_labels)
    classes = np.unique(labels[labels >= 0])
    by_class = {int(c): np.flatnonzero(labels == c) for c in classes}
    need = shot + queries_per_class
    n_way = len(classes) if way == "all" else int(way)
    if n_way > len(classes) or n_way <= 0:
        raise ValueError(f"way={way} but the test set has {len(classes)} fine classes")
    for c, idx in by_class.items():
        if len(idx) < need and (way == "all"):
            raise ValueError(f"fine class {c} has {len(idx)} examples, needs {need}")
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        chosen = classes if way == "all" else np.sort(rng.choice(classes, n_way, replace=False))
        sup, sup_y, qry, qry_y = [], [], [], []
        for c in chosen:
            pool = by_class[int(c)]
            if len(pool) < need:
                raise ValueError(f"fine class {c} has {len(pool)} examples, needs {need}")
            pick = rng.choice(pool, need, replace=False)
            sup.append(pick[:shot])
            qry.append(pick[shot:])
            sup_y.append(np.full(shot, c))
            qry_y.append(np.full(queries_per_class, c))
        yield Episode(n_way, shot, np.concatenate(sup), np.concatenate(sup_y),
                      np.concatenate(qry), np.concatenate(qry_y), i)


# ---------------------------------------------------------------- evaluation


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("C2FS_THREADS", "1")))
    except ValueError:
        return 1


def run_episode(features: np.ndarray, ep: Episode, repo: Optional[FeatureRepository],
                calib: Optional[CalibrationConfig], fine_to_coarse=None,
                head: str = "logistic", memo: Optional[dict] = None) -> float:
    """Accuracy on one episode.

    ``memo`` caches results by the exact classifier training set (episode,
    support and selected repository indices), so configurations that select
    the same entries reuse the fit. Callers must keep one memo per
    (features, repository) pair.
    """
    sup = features[ep.support]
    if calib is not None:
        if repo is None:
            raise ValueError("calibration needs a feature repository")
        true_coarse = None
        if fine_to_coarse is not None:
            true_coarse = {int(y): int(fine_to_coarse[y]) for y in np.unique(ep.support_labels)}
        aug = calibrate_support(sup, ep.support_labels, repo, calib, true_coarse)
    else:
        aug = AugmentedSupport()
        for y in np.unique(ep.support_labels):
            aug.original[int(y)] = normalize_rows(sup[ep.support_labels == y])
    key = None
    if memo is not None:
        key = (ep.episode_seed, ep.support.tobytes(), ep.query.tobytes(), head,
               tuple((y, aug.additional[y].tobytes() if y in aug.additional else b"",
                      aug.prototypes[y].vector.tobytes() if head == "prototype" and y in aug.prototypes
                      else b"") for y in aug.classes))
        if key in memo:
            return memo[key]
    clf = train_fine_classifier(aug, repo, head=head)
    pred = clf.predict(features[ep.query])
    acc = float(np.mean(pred == ep.query_labels))
    if key is not None:
        memo[key] = acc
    return acc


def evaluate(model, repo: Optional[FeatureRepository], episodes, calib_config: Optional[CalibrationConfig] = None,
             *, dataset: Optional[Dataset] = None, features: Optional[np.ndarray] = None,
             head: str = "logistic", memo: Optional[dict] = None) -> EvalReport:
    """Mean episode accuracy with a 95% interval.

    Test embeddings come from ``features`` if given, else from embedding
    ``dataset`` with the model's backbone. Episode failures are recorded in
    ``errors`` and excluded from the mean.
    """
    if features is None:
        if dataset is None or model is None:
            raise ValueError("evaluate needs precomputed features or a model and dataset")
        features = embed_dataset(model, dataset)
    f2c = dataset.hierarchy.fine_to_coarse if dataset is not None else None
    episodes = list(episodes)

    def one(ep):
        try:
            return run_episode(features, ep, repo, calib_config, f2c, head, memo), None
        except ValueError as exc:
            return None, f"episode {ep.episode_seed}: {exc}"

    n = _threads()
    if n > 1:
        with ThreadPoolExecutor(n) as pool:
            results = list(pool.map(one, episodes))
    else:
        results = [one(ep) for ep in episodes]
    accs = [a for a, _ in results if a is not None]
    errors = [e for _, e in results if e is not None]
    for e in errors[:3]:
        logger.warning(e)
    return EvalReport.from_accuracies(accs, errors)


# ---------------------------------------------------------------- probe

LAYER_NAMES = ("f1", "f2", "f3", "f4", "embedding")


def _probe_accuracy(tr_x, tr_y, te_x, te_y, num_classes, steps, lr, l2):
    mu = tr_x.mean(axis=0)
    sd = tr_x.std(axis=0) + 1e-8
    w, b = fit_logistic((tr_x - mu) / sd, tr_y, num_classes, l2=l2, steps=steps, lr=lr)
    pred = np.argmax(((te_x - mu) / sd) @ w + b, axis=1)
    return float(np.mean(pred == te_y))


def layer_probe(model, probe_train: Dataset, probe_test: Dataset, steps: int = 300,
                lr: float = 0.5, l2: float = 1e-3) -> dict[str, float]:
    """Fine-label linear-probe accuracy of each pooled stage map and the embedding.

    Features are standardized with the probe-train statistics. The model is
    only read.
    """
    dtype = next(model.parameters()).dtype
    labels = np.unique(np.concatenate([probe_train.fine, probe_test.fine]))
    remap = {int(c): j for j, c in enumerate(labels)}
    tr_y = np.array([remap[int(c)] for c in probe_train.fine])
    te_y = np.array([remap[int(c)] for c in probe_test.fine])
    tr = model.stage_features(torch.from_numpy(np.array(probe_train.inputs)).to(dtype))
    te = model.stage_features(torch.from_numpy(np.array(probe_test.inputs)).to(dtype))
    return {name: _probe_accuracy(a.double().numpy(), tr_y, b.double().numpy(), te_y, len(labels),
                                  steps, lr, l2)
            for name, a, b in zip(LAYER_NAMES, tr, te)}


# ---------------------------------------------------------------- ablation


@dataclass(frozen=True)
class AblationRow:
    name: str
    rec: bool = False
    align: bool = False
    cd: bool = False
    contrastive: bool = True
    calibration: Optional[CalibrationConfig] = None

    def train_key(self):
        return (self.rec, self.align, self.contrastive)


@dataclass
class AblationGrid:
    """Rows sharing one dataset, one episode stream and per-configuration models.

    ``train_seeds`` lists model seeds; with several, each row is evaluated on
    every seed's model over the same episodes and per-episode accuracies are
    averaged across seeds.
    """

    rows: list[AblationRow]
    train: Dataset
    test: Dataset
    encoder: "object"
    train_config: "object"
    alpha: float = 1.0
    way: Union[int, str] = "all"
    shot: int = 1
    queries: int = 15
    episodes: int = 500
    episode_seed: int = 0
    train_seeds: tuple[int, ...] = (0,)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)


def toggle_warnings(row: AblationRow) -> list[str]:
    out = []
    if row.align and not row.rec:
        out.append(f"row {row.name!r}: ALIGN without REC is an untested combination")
    return out


def run_ablation(grid: AblationGrid, model_cache: Optional[dict] = None) -> list[dict]:
    """Evaluate every row on a shared episode stream; returns one record per row."""
    from .losses import LossWeights
    from .model import build_model
    from .trainer import train

    cache = {} if model_cache is None else model_cache
    for row in grid.rows:
        for msg in toggle_warnings(row):
            warnings.warn(msg)
    episodes = list(sample_episodes(grid.test.fine, grid.way, grid.shot, grid.queries,
                                    grid.episodes, grid.episode_seed))
    per_seed = {}
    for seed in grid.train_seeds:
        for key in sorted({r.train_key() for r in grid.rows}):
            ck = (key, seed)
            if ck not in cache:
                rec, align, cont = key
                weights = LossWeights(grid.alpha if rec else 0.0, grid.alpha if align else 0.0,
                                      tie_alpha_beta=rec == align)
                cfg = replace(grid.train_config, weights=weights, contrastive=cont, seed=seed)
                model = build_model(grid.encoder, seed)
                train(grid.train, model, cfg)
                cache[ck] = model
            model = cache[ck]
            if (ck, "features") not in cache:
                cache[(ck, "features")] = (embed_dataset(model, grid.test),
                                           _repo(model, grid.train))
            per_seed[ck] = cache[(ck, "features")]
    out = []
    for row in grid.rows:
        calib = None
        if row.cd:
            calib = row.calibration or grid.calibration
        accs = []
        errors = []
        for seed in grid.train_seeds:
            feats, repo = per_seed[(row.train_key(), seed)]
            memo = cache.setdefault(((row.train_key(), seed), "memo"), {})
            rep = evaluate(None, repo, episodes, calib, dataset=grid.test, features=feats, memo=memo)
            accs.append(rep.per_episode)
            errors.extend(rep.errors)
        lengths = {len(a) for a in accs}
        if len(lengths) != 1:
            raise RuntimeError(f"row {row.name!r}: episode failures differ across seeds")
        report = EvalReport.from_accuracies(np.mean(np.asarray(accs), axis=0), errors)
        out.append({"name": row.name, "rec": row.rec, "align": row.align, "cd": row.cd,
                    "contrastive": row.contrastive,
                    "calibration": None if calib is None else vars(calib).copy(),
                    "report": report})
    return out


def _repo(model, train: Dataset) -> FeatureRepository:
    from .repository import build_repository
    return build_repository(train, model)


def format_table(rows: list[dict]) -> str:
    headers = ("name", "REC", "ALIGN", "CD", "acc", "ci95")
    body = []
    for r in rows:
        rep = r["report"]
        mark = lambda b: "x" if b else ""
        body.append((r["name"], mark(r["rec"]), mark(r["align"]), mark(r["cd"]),
                     f"{100 * rep.mean_accuracy:.2f}", f"{100 * rep.ci95_halfwidth:.2f}"))
    widths = [max(len(str(x)) for x in col) for col in zip(headers, *body)]
    lines = ["  ".join(str(h).ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(str(c).ljust(w) for c, w in zip(line, widths)) for line in body)
    return "\n".join(lines)

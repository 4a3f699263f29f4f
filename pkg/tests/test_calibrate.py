import math

import numpy as np
import pytest

from c2fs.calibrate import (AugmentedSupport, CalibrationConfig, DegeneratePrototype, Prototype,
                            assign_coarse, calibrate_class, calibrate_support, fit_logistic,
                            init_prototype, train_fine_classifier)
from c2fs.repository import FeatureRepository, normalize_rows

from oracles import brute_calibration_trace, brute_vote, random_repository


def all_vectors(repo):
    return repo.vectors(np.arange(len(repo)))


def random_instance(rng):
    coarse_count = int(rng.integers(1, 4))
    dim = int(rng.integers(2, 9))
    repo = random_repository(rng, int(rng.integers(30, 120)), dim, coarse_count)
    y = int(rng.integers(0, coarse_count))
    pool = len(repo.subset_by_coarse(y))
    n = int(rng.integers(1, min(20, pool) + 1))
    m = int(rng.integers(1, min(5, n) + 1))
    support = normalize_rows(rng.standard_normal((int(rng.integers(1, 4)), dim)))
    return repo, y, m, n, support


def test_calibrate_class_matches_brute_force_trace(rng):
    for _ in range(25):
        repo, y, m, n, support = random_instance(rng)
        proto = init_prototype(support)
        proto.assigned_coarse = y
        out, idx, rounds = calibrate_class(proto, repo, CalibrationConfig(k=1, m=m, n=n), support)
        want_idx, want_proto = brute_calibration_trace(all_vectors(repo), repo.coarse, support, y, m, n)
        assert idx.tolist() == want_idx
        np.testing.assert_allclose(out.vector, want_proto, atol=1e-10, rtol=0)
        assert rounds == math.ceil(n / m)


def test_exact_contracts(rng):
    repo = random_repository(rng, 300, 6, 3)
    for n, m in [(100, 20), (37, 5), (20, 20), (7, 3)]:
        support = normalize_rows(rng.standard_normal((1, 6)))
        aug = calibrate_support(support, np.array([4]), repo, CalibrationConfig(k=5, m=m, n=n))
        sel = aug.additional[4]
        y = aug.prototypes[4].assigned_coarse
        assert len(sel) == n and len(set(sel.tolist())) == n
        assert aug.rounds[4] == math.ceil(n / m)
        assert set(repo.coarse[sel].tolist()) == {y}
        assert np.linalg.norm(aug.prototypes[4].vector) == pytest.approx(1.0)


def test_all_pool_draws_across_classes(rng):
    repo = random_repository(rng, 200, 4, 4)
    support = normalize_rows(rng.standard_normal((1, 4)))
    cfg = CalibrationConfig(pool="all", n=60, m=20)
    aug = calibrate_support(support, np.array([0]), repo, cfg)
    want, _ = brute_calibration_trace(all_vectors(repo), repo.coarse, support, None, 20, 60, pool="all")
    assert aug.additional[0].tolist() == want
    assert len(set(repo.coarse[aug.additional[0]].tolist())) > 1


def test_vote_matches_brute_force_with_nearest_tie_break(rng):
    for _ in range(30):
        repo = random_repository(rng, 60, 3, 3)
        proto = init_prototype(rng.standard_normal((1, 3)))
        k = int(rng.integers(1, 12))
        assert assign_coarse(proto, repo, k) == brute_vote(all_vectors(repo), repo.coarse, proto.vector, k, 3)


def test_tie_goes_to_class_of_nearest_neighbour():
    e = np.array([[1.0, 0.1], [1.0, 0.3], [1.0, -0.5], [1.0, 0.9], [-1.0, 0.0]])
    repo = FeatureRepository.from_raw(e, [1, 0, 0, 1, 2], 3)
    proto = Prototype(0, np.array([1.0, 0.0]))
    # 4 nearest: 0 (c1), 1 (c0), 2 (c0), 3 (c1) -> 2-2 tie, entry 0 is nearest
    assert assign_coarse(proto, repo, 4) == 1


def test_n_zero_keeps_support_only(rng):
    repo = random_repository(rng, 40, 3, 2)
    s = rng.standard_normal((2, 3))
    aug = calibrate_support(s, np.array([1, 1]), repo, CalibrationConfig(n=0))
    assert len(aug.additional[1]) == 0 and aug.rounds[1] == 0
    np.testing.assert_allclose(aug.prototypes[1].vector, init_prototype(normalize_rows(s)).vector)


def test_true_coarse_overrides_vote(rng):
    repo = random_repository(rng, 100, 3, 3)
    s = rng.standard_normal((1, 3))
    aug = calibrate_support(s, np.array([9]), repo, CalibrationConfig(n=10, m=5, use_true_coarse=True),
                            true_coarse={9: 2})
    assert aug.prototypes[9].assigned_coarse == 2
    assert set(repo.coarse[aug.additional[9]].tolist()) == {2}
    with pytest.raises(ValueError, match="use_true_coarse"):
        calibrate_support(s, np.array([9]), repo, CalibrationConfig(use_true_coarse=True, n=5, m=5))


def test_pool_too_small_and_degenerate_support(rng):
    repo = FeatureRepository.from_raw(np.eye(3), [0, 0, 1])
    with pytest.raises(ValueError, match="pool has 1 entries"):
        proto = Prototype(0, np.array([0.0, 0.0, 1.0]), assigned_coarse=1)
        calibrate_class(proto, repo, CalibrationConfig(n=2, m=1))
    with pytest.raises(DegeneratePrototype):
        init_prototype(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    with pytest.raises(ValueError):
        CalibrationConfig(m=30, n=20)


def test_pooled_mean_variant_gives_same_direction(rng):
    repo = random_repository(rng, 150, 5, 2)
    s = normalize_rows(rng.standard_normal((1, 5)))
    a = calibrate_support(s, np.array([0]), repo, CalibrationConfig(n=40, m=10))
    b = calibrate_support(s, np.array([0]), repo, CalibrationConfig(n=40, m=10, prototype_update="pooled_mean"))
    assert isinstance(a, AugmentedSupport) and len(b.additional[0]) == 40


def logistic_reference(x, y, classes, l2, steps, lr):
    """Plain float64 gradient descent on the same objective, written out with loops over classes."""
    n, d = x.shape
    w = np.zeros((d, classes))
    b = np.zeros(classes)
    for _ in range(steps):
        z = x @ w + b
        z = z - z.max(axis=1)[:, None]
        p = np.exp(z) / np.exp(z).sum(axis=1)[:, None]
        for c in range(classes):
            r = p[:, c] - (y == c)
            w[:, c] -= lr * (x.T @ r / n + l2 * w[:, c])
            b[c] -= lr * r.mean()
    return w, b


def test_fit_logistic_matches_reference(rng):
    x = normalize_rows(rng.standard_normal((40, 6)))
    y = rng.integers(0, 4, 40)
    w_ref, b_ref = logistic_reference(x, y, 4, 1e-3, 200, 0.5)
    w, b = fit_logistic(x, y, 4, 1e-3, 200, 0.5, dtype=np.float64)
    np.testing.assert_allclose(w, w_ref, atol=1e-10)
    np.testing.assert_allclose(b, b_ref, atol=1e-10)
    w32, b32 = fit_logistic(x, y, 4, 1e-3, 200, 0.5)
    np.testing.assert_allclose(w32, w_ref, atol=1e-4)


def test_fine_classifier_uses_additional_entries(rng):
    e = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]])
    repo = FeatureRepository.from_raw(e, [0, 0, 1, 1])
    aug = AugmentedSupport()
    aug.original = {3: normalize_rows(np.array([[1.0, 0.2]])), 8: normalize_rows(np.array([[0.2, 1.0]]))}
    aug.additional = {3: np.array([0, 1]), 8: np.array([2, 3])}
    clf = train_fine_classifier(aug, repo)
    assert clf.predict(np.array([[1.0, 0.0], [0.0, 1.0]])).tolist() == [3, 8]
    proto = train_fine_classifier(aug, repo, head="prototype")
    assert proto.predict(np.array([[0.0, 1.0]])).tolist() == [8]

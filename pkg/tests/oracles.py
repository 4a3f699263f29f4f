"""Independent brute-force reference implementations used as test oracles."""

import math

import numpy as np


def brute_knn(entries, coarse, query, k, restrict_to=None, exclude=()):
    exclude = set(int(i) for i in exclude)
    scored = []
    for i, e in enumerate(entries):
        if restrict_to is not None and coarse[i] != restrict_to:
            continue
        if i in exclude:
            continue
        sim = sum(float(a) * float(b) for a, b in zip(e, query))
        scored.append((-sim, i))
    scored.sort()
    return [i for _, i in scored[:k]]


def _unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def brute_calibration_trace(entries, coarse, support, y, m, n, pool="coarse"):
    """Selection order and final prototype of the iterative debiasing loop."""
    support = [list(map(float, s)) for s in support]
    d = len(support[0])
    sup_mean = [sum(s[j] for s in support) / len(support) for j in range(d)]
    proto = _unit(sup_mean)
    selected = []
    while len(selected) < n:
        take = min(m, n - len(selected))
        picks = brute_knn(entries, coarse, proto, take,
                          restrict_to=y if pool == "coarse" else None, exclude=selected)
        selected.extend(picks)
        add_mean = [sum(float(entries[i][j]) for i in selected) / len(selected) for j in range(d)]
        proto = _unit([a + b for a, b in zip(sup_mean, add_mean)])
    return selected, np.array(proto)


def brute_vote(entries, coarse, query, k, coarse_count):
    nn = brute_knn(entries, coarse, query, k)
    counts = [0] * coarse_count
    for i in nn:
        counts[coarse[i]] += 1
    best = max(counts)
    for i in nn:
        if counts[coarse[i]] == best:
            return coarse[i]


def random_repository(rng, size, dim, coarse_count, duplicates=0):
    from c2fs.repository import FeatureRepository

    e = rng.standard_normal((size, dim))
    if duplicates:
        src = rng.integers(0, size, duplicates)
        dst = rng.integers(0, size, duplicates)
        e[dst] = e[src]
    coarse = rng.integers(0, coarse_count, size)
    coarse[:coarse_count] = np.arange(coarse_count)
    return FeatureRepository.from_raw(e, coarse, coarse_count)


def ci95_reference(accs):
    a = [float(x) for x in accs]
    mean = sum(a) / len(a)
    var = sum((x - mean) ** 2 for x in a) / len(a)
    return 1.96 * math.sqrt(var) / math.sqrt(len(a))

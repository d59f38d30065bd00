"""Independent oracles shared by the test suite.

Everything here is deliberately dumb and slow: central finite
differences, brute-force enumeration, direct formula evaluation.
None of it may import shortcuts from the code paths it checks.
"""

import itertools

import numpy as np


def numerical_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic, numeric):
    """max |a-n| / max(1, |n|), elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def brute_force_assignment(cost):
    """Minimum-cost perfect matching by trying every permutation."""
    cost = np.asarray(cost, dtype=np.float64)
    k = cost.shape[0]
    best_perm, best_total = None, np.inf
    for perm in itertools.permutations(range(k)):
        total = sum(cost[i, perm[i]] for i in range(k))
        if total < best_total:
            best_total = total
            best_perm = perm
    return list(best_perm), float(best_total)


def angular_std_direct(centroid, members):
    """Root-mean-square arccos deviation, written out longhand."""
    total = 0.0
    for e in members:
        d = float(np.dot(centroid, e))
        d = min(1.0, max(-1.0, d))
        total += np.arccos(d) ** 2
    return float(np.sqrt(total / len(members)))


def bfs_distance(edges, n_nodes, source, targets):
    """Fewest-hops distance from source to the nearest node in targets."""
    adj = [[] for _ in range(n_nodes)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    targets = set(targets)
    if source in targets:
        return 0
    seen = {source}
    frontier = [source]
    dist = 0
    while frontier:
        dist += 1
        nxt = []
        for u in frontier:
            for w in adj[u]:
                if w in seen:
                    continue
                if w in targets:
                    return dist
                seen.add(w)
                nxt.append(w)
        frontier = nxt
    return None

"""Landmark data association: individual (ICNN) and joint (JCBB) compatibility."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.stats import chi2


@dataclass
class Association:
    pairs: list[tuple[int, int]] = field(default_factory=list)  # (measurement, landmark)
    unmatched: list[int] = field(default_factory=list)
    joint_distance: float = 0.0
    fallback: bool = False
    nodes: int = 0

    def as_dict(self) -> dict[int, int]:
        return dict(self.pairs)


@lru_cache(maxsize=1024)
def _gate(level: float, dof: int) -> float:
    if not 0.0 < level < 1.0:
        raise ValueError("gate level must be in (0, 1)")
    return float(chi2.ppf(level, dof))


def individual_distances(predicted, measured, S) -> np.ndarray:
    """Squared Mahalanobis distance of every (measurement, landmark) pair, shape (K, M)."""
    pred = np.asarray(predicted, dtype=float).reshape(-1, 2)
    meas = np.asarray(measured, dtype=float).reshape(-1, 2)
    S = np.asarray(S, dtype=float).reshape(-1, 2, 2)
    if len(meas) == 0 or len(pred) == 0:
        return np.zeros((len(meas), len(pred)))
    Sinv = np.linalg.inv(S)
    nu = meas[:, None, :] - pred[None, :, :]
    return np.einsum("kmi,mij,kmj->km", nu, Sinv, nu)


def icnn_associate(predicted, measured, S, gate: float = 0.95, compatible=None) -> Association:
    """Greedy one-to-one nearest-neighbour association under an individual chi-square gate.

    Pairs are committed in order of increasing Mahalanobis distance; exact ties
    go to the lower landmark index, then the lower measurement index.
    """
    d2 = individual_distances(predicted, measured, S)
    K, M = d2.shape
    thr = _gate(gate, 2)
    ok = d2 <= thr
    if compatible is not None:
        ok &= np.asarray(compatible, bool)
    ks, ms = np.nonzero(ok)
    order = np.lexsort((ks, ms, d2[ks, ms]))
    used_k, used_m = set(), set()
    pairs = []
    for o in order:
        k, m = int(ks[o]), int(ms[o])
        if k in used_k or m in used_m:
            continue
        used_k.add(k)
        used_m.add(m)
        pairs.append((k, m))
    pairs.sort()
    return Association(pairs, [k for k in range(K) if k not in used_k])


class JointCompatibility:
    """Joint Mahalanobis distance of a hypothesis from the pose covariance.

    Landmarks are fixed, so the joint innovation covariance of a set of pairs
    is ``H P H^T + blockdiag(R)`` with H stacked from the matched landmarks.
    """

    def __init__(self, predicted, measured, H, P, R):
        self.pred = np.asarray(predicted, dtype=float).reshape(-1, 2)
        self.meas = np.asarray(measured, dtype=float).reshape(-1, 2)
        self.H = np.asarray(H, dtype=float).reshape(-1, 2, 3)
        self.P = np.asarray(P, dtype=float)
        self.R = np.asarray(R, dtype=float)
        # landmark-landmark cross terms H_i P H_j^T, computed lazily per landmark
        self._HP = np.einsum("mij,jk->mik", self.H, self.P)

    def individual_S(self) -> np.ndarray:
        return np.einsum("mik,mjk->mij", self._HP, self.H) + self.R

    def distance(self, pairs) -> float:
        if not pairs:
            return 0.0
        ks = [p[0] for p in pairs]
        ms = [p[1] for p in pairs]
        nu = (self.meas[ks] - self.pred[ms]).reshape(-1)
        Hs = self.H[ms].reshape(-1, 3)
        S = Hs @ self.P @ Hs.T
        n = len(pairs)
        S.reshape(n, 2, n, 2)[np.arange(n), :, np.arange(n), :] += self.R
        try:
            return float(nu @ np.linalg.solve(S, nu))
        except np.linalg.LinAlgError:
            return float("inf")


def jcbb_associate(predicted, measured, H, P, R, individual_gate: float = 0.95,
                   joint_gate: float = 0.99, max_nodes: int = 100_000,
                   compatible=None) -> Association:
    """Joint Compatibility Branch and Bound.

    Finds the one-to-one hypothesis with the most pairings such that every
    pair is individually compatible and the hypothesis passes the joint
    chi-square gate for its size. Ties in pairing count go to the smaller
    joint distance. The joint distance never decreases when pairs are added,
    so a partial hypothesis is pruned once it exceeds the gate of the largest
    hypothesis it could still grow into. If more than ``max_nodes`` nodes are
    expanded the ICNN result is returned with ``fallback=True``.
    """
    jc = JointCompatibility(predicted, measured, H, P, R)
    K, M = len(jc.meas), len(jc.pred)
    if K == 0:
        return Association()
    S_ind = jc.individual_S()
    d2 = individual_distances(jc.pred, jc.meas, S_ind)
    ok = d2 <= _gate(individual_gate, 2)
    if compatible is not None:
        ok &= np.asarray(compatible, bool)
    cands = [list(np.flatnonzero(ok[k])) for k in range(K)]
    # remaining[k] = measurements from k on that still have a candidate
    has = np.array([bool(c) for c in cands])
    remaining = np.concatenate([np.cumsum(has[::-1])[::-1], [0]])
    thresholds = [0.0] + [_gate(joint_gate, 2 * n) for n in range(1, K + 1)]

    best = {"pairs": [], "d": 0.0}
    nodes = 0

    class Budget(Exception):
        pass

    def better(n, d):
        nb = len(best["pairs"])
        return n > nb or (n == nb and d < best["d"])

    def recurse(k, pairs, used, d):
        nonlocal nodes
        nodes += 1
        if nodes > max_nodes:
            raise Budget
        if k == K:
            if d <= thresholds[len(pairs)] and better(len(pairs), d):
                best["pairs"], best["d"] = list(pairs), d
            return
        for m in cands[k]:
            if m in used:
                continue
            bound = len(pairs) + 1 + remaining[k + 1]
            nb = len(best["pairs"])
            if bound < nb:
                continue
            trial = pairs + [(k, m)]
            dj = jc.distance(trial)
            if dj > thresholds[bound]:
                continue
            if bound == nb and dj >= best["d"]:
                continue
            used.add(m)
            recurse(k + 1, trial, used, dj)
            used.discard(m)
        # leave measurement k unmatched
        bound = len(pairs) + remaining[k + 1]
        nb = len(best["pairs"])
        if bound > nb or (bound == nb and d < best["d"]):
            recurse(k + 1, pairs, used, d)

    try:
        recurse(0, [], set(), 0.0)
    except Budget:
        res = icnn_associate(jc.pred, jc.meas, S_ind, individual_gate, compatible)
        res.fallback = True
        res.nodes = nodes
        res.joint_distance = jc.distance(res.pairs)
        return res
    pairs = sorted(best["pairs"])
    matched = {p[0] for p in pairs}
    return Association(pairs, [k for k in range(K) if k not in matched], best["d"], False, nodes)

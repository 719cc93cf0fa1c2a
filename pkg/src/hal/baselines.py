"""Heuristic query strategies used as comparison points."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import classifier as C
from . import features as F


@dataclass
class QueryResult:
    indices: list
    scores: list


def _check(pool, b):
    if b < 1:
        raise ValueError("batch size must be positive")
    if len(pool.unlabeled) < b:
        raise ValueError(f"pool has {len(pool.unlabeled)} items, need {b}")


def _top_b(indices, scores, b):
    # descending score, ties to the lower pool index
    indices = np.asarray(indices)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((indices, -scores))[:b]
    return QueryResult(indices[order].tolist(), scores[order].tolist())


def random_query(pool, b, seed):
    _check(pool, b)
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(pool.unlabeled), size=b, replace=False)
    return QueryResult([pool.unlabeled[i] for i in pick], [0.0] * b)


def entropy_query(pool, store, clf, b):
    """Highest predictive entropy first."""
    _check(pool, b)
    probs = C.predict_proba(clf, store, pool.unlabeled)
    return _top_b(pool.unlabeled, F.entropy(probs), b)


def dbal_scores(pool, store, clf, n_mc, seed):
    clean, noisy = C.mc_dropout_predict(clf, clf.inputs(store, pool.unlabeled), n_mc, seed,
                                        row_keys=pool.unlabeled)
    return F.mutual_information(clean, noisy)


def dbal_query(pool, store, clf, b, n_mc, seed):
    """Highest MC-dropout mutual information first (masks keyed per item)."""
    _check(pool, b)
    return _top_b(pool.unlabeled, dbal_scores(pool, store, clf, n_mc, seed), b)


def kcenter_query(pool, store, clf, b):
    """Greedy farthest-first in embedding space."""
    _check(pool, b)
    if not pool.labeled:
        raise ValueError("labeled set is empty")
    unl = np.asarray(pool.unlabeled)
    emb_u = C.embed(clf, clf.inputs(store, unl))
    emb_l = C.embed(clf, clf.inputs(store, pool.labeled))
    return kcenter_greedy(emb_u, emb_l, unl, b)


def kcenter_greedy(emb_u, emb_l, indices, b):
    indices = np.asarray(indices)
    mins = cdist(emb_u, emb_l).min(axis=1)
    free = np.ones(len(indices), dtype=bool)
    chosen, scores = [], []
    for _ in range(b):
        cand = np.flatnonzero(free)
        best = cand[np.lexsort((indices[cand], -mins[cand]))[0]]
        chosen.append(int(indices[best]))
        scores.append(float(mins[best]))
        free[best] = False
        mins = np.minimum(mins, cdist(emb_u, emb_u[best:best + 1])[:, 0])
    return QueryResult(chosen, scores)

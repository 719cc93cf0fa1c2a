"""Per-candidate observation features: MC-dropout uncertainty, class-wise
diversity, HOG prior and the bias-aware spectrum feature."""

from dataclasses import dataclass

import numpy as np

from . import classifier as C

HOG_CELLS = 4
HOG_BINS = 9
PRIOR_SIZE = HOG_CELLS * HOG_CELLS * HOG_BINS
MIN_HOG_SIZE = 28
SIGMA_EPS = 1e-8
REPRESENTATIONS = ("mean", "median", "mode", "max", "min")


def jacobi_eigenvalues(a, tol=1e-10, max_sweeps=100):
    """Eigenvalues of a symmetric matrix (or a stack of them) by cyclic
    Jacobi rotations.

    Rotations are applied in parallel (round-robin) order: every round
    annihilates n/2 disjoint off-diagonal pairs at once, for every matrix in
    the stack. Stops when each off-diagonal Frobenius norm is below ``tol``
    times that matrix's norm. Returns eigenvalues in ascending order.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError("expected a square matrix")
    swapped = np.swapaxes(a, -1, -2)
    if not np.allclose(a, swapped, rtol=0, atol=1e-12 * max(1.0, np.abs(a).max(initial=0.0))):
        raise ValueError("matrix is not symmetric")
    single = a.ndim == 2
    a = ((a + swapped) / 2).reshape((-1,) + a.shape[-2:])
    n = a.shape[-1]
    if n == 1:
        w = a[:, 0, :]
        return w[0] if single else w.reshape(swapped.shape[:-1])
    m = n + (n % 2)
    if m != n:
        a = np.pad(a, ((0, 0), (0, 1), (0, 1)))
    scale = np.linalg.norm(a, axis=(1, 2))
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        rounds.append((np.array(players[: m // 2]), np.array(players[m // 2:][::-1])))
        players = [players[0]] + [players[-1]] + players[1:-1]
    diag = np.arange(m)
    offmask = ~np.eye(m, dtype=bool)
    for _ in range(max_sweeps):
        # summing the off-diagonal entries directly; total minus diagonal cancels
        off = np.sqrt(np.sum(np.where(offmask, a * a, 0.0), axis=(1, 2)))
        if np.all(off <= tol * scale):
            break
        for p, q in rounds:
            apq = a[:, p, q]
            app = a[:, p, p]
            aqq = a[:, q, q]
            active = np.abs(apq) > 1e-300
            tau = np.where(active, (aqq - app) / (2 * np.where(active, apq, 1.0)), 0.0)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
            c = np.where(active, 1.0 / np.hypot(1.0, t), 1.0)[:, :, None]
            s = np.where(active, t * c[:, :, 0], 0.0)[:, :, None]
            # a <- J^T a J with J the block rotation on each (p, q) pair
            ap, aq = a[:, :, p].copy(), a[:, :, q].copy()
            a[:, :, p] = ap * c.transpose(0, 2, 1) - aq * s.transpose(0, 2, 1)
            a[:, :, q] = ap * s.transpose(0, 2, 1) + aq * c.transpose(0, 2, 1)
            ap, aq = a[:, p, :].copy(), a[:, q, :].copy()
            a[:, p, :] = c * ap - s * aq
            a[:, q, :] = s * ap + c * aq
    # a padding row/column never rotates (its off-diagonals stay 0)
    w = np.sort(a[:, diag[:n], diag[:n]], axis=1)
    return w[0] if single else w.reshape(swapped.shape[:-1])


@dataclass(frozen=True)
class ClassStats:
    counts: np.ndarray      # (L,)
    center: np.ndarray      # (L, f_n) class centre under the chosen representation
    mean: np.ndarray        # (L, f_n)
    std: np.ndarray         # (L, f_n), denominator m_c - 1
    spectra: list           # per class normalized eigenvalues (ascending)
    degenerate: np.ndarray  # (L,) bool
    representation: str = "mean"

    @property
    def n_classes(self):
        return len(self.counts)


def _center(e, representation, bins=16):
    if representation == "mean":
        return e.mean(axis=0)
    if representation == "median":
        return np.median(e, axis=0)
    if representation == "max":
        return e.max(axis=0)
    if representation == "min":
        return e.min(axis=0)
    if representation == "mode":
        out = np.empty(e.shape[1])
        for d in range(e.shape[1]):
            hist, edges = np.histogram(e[:, d], bins=bins)
            k = int(np.argmax(hist))
            out[d] = (edges[k] + edges[k + 1]) / 2
        return out
    raise ValueError(f"unknown representation {representation!r}")


def class_stats_from_embeddings(embeddings, labels, n_classes, representation="mean"):
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    f_n = embeddings.shape[1]
    counts = np.zeros(n_classes, dtype=np.int64)
    center = np.zeros((n_classes, f_n))
    mean = np.zeros((n_classes, f_n))
    std = np.zeros((n_classes, f_n))
    spectra = [np.zeros(f_n) for _ in range(n_classes)]
    degenerate = np.ones(n_classes, dtype=bool)
    grams = {}
    for c in range(n_classes):
        e = embeddings[labels == c]
        counts[c] = len(e)
        if len(e) == 0:
            continue
        mean[c] = e.mean(axis=0)
        center[c] = _center(e, representation)
        if len(e) < 2:
            continue
        std[c] = e.std(axis=0, ddof=1)
        centered = e - mean[c]
        if np.sum(centered ** 2) / (len(e) - 1) < 1e-12:
            continue
        # covariance X^T X / (m-1) and Gram X X^T / (m-1) share their nonzero
        # eigenvalues; decompose whichever is smaller
        if len(e) < f_n:
            grams[c] = centered @ centered.T / (len(e) - 1)
        else:
            grams[c] = centered.T @ centered / (len(e) - 1)
    if grams:
        # zero-padding a matrix only adds zero eigenvalues
        k = max(g.shape[0] for g in grams.values())
        stack = np.zeros((len(grams), k, k))
        for j, g in enumerate(grams.values()):
            stack[j, :len(g), :len(g)] = g
        eig = np.clip(jacobi_eigenvalues(stack), 0.0, None)
        for j, c in enumerate(grams):
            lam = np.zeros(f_n)
            lam[f_n - k:] = eig[j]
            spectra[c] = lam / lam.sum()
            degenerate[c] = False
    return ClassStats(counts, center, mean, std, spectra, degenerate, representation)


def class_stats(clf, pool, store, representation="mean"):
    """Embed the labeled set and summarise it per class."""
    if not pool.labeled:
        raise ValueError("labeled set is empty")
    idx = np.asarray(pool.labeled, dtype=np.int64)
    emb = C.embed(clf, clf.inputs(store, idx))
    return class_stats_from_embeddings(emb, store.labels[idx], clf.n_classes, representation)


def bias_aware(stats):
    """1 - largest normalized eigenvalue per class; 0 for degenerate classes."""
    out = np.zeros(stats.n_classes)
    for c in range(stats.n_classes):
        if not stats.degenerate[c]:
            out[c] = 1.0 - float(np.max(stats.spectra[c]))
    return np.clip(out, 0.0, 1.0)


def entropy(p):
    """Natural-log Shannon entropy along the last axis with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -np.sum(p * logp, axis=-1)


def _check_distribution(p, tol=1e-6):
    if np.any(p < -tol) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ValueError("rows must be probability vectors")


def mutual_information(clean, noisy):
    """H(clean) - mean_i H(noisy_i). Batched: clean (..., L), noisy (..., n, L)."""
    clean = np.asarray(clean, dtype=np.float64)
    noisy = np.asarray(noisy, dtype=np.float64)
    _check_distribution(clean)
    _check_distribution(noisy)
    return entropy(clean) - entropy(noisy).mean(axis=-1)


def diversity(embedding, stats):
    """Per-class (1/f_n) * sum_d (e_d - mu_d)^2 / (2 sigma_d^2 + eps).

    Accepts one embedding (f_n,) or a batch (B, f_n); degenerate classes give 0.
    """
    e = np.asarray(embedding, dtype=np.float64)
    single = e.ndim == 1
    e = np.atleast_2d(e)
    if e.shape[1] != stats.center.shape[1]:
        raise ValueError("embedding length does not match class statistics")
    diff2 = (e[:, None, :] - stats.center[None]) ** 2
    out = (diff2 / (2 * stats.std[None] ** 2 + SIGMA_EPS)).mean(axis=2)
    out[:, stats.degenerate] = 0.0
    return out[0] if single else out


def hog_prior(image):
    """144-d HOG: 4x4 cells x 9 unsigned orientation bins, hard magnitude
    voting, whole descriptor L2-normalised.

    Gradients are central differences on interior pixels (border gradient 0).
    Multi-channel images are first reduced to their channel mean.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0] + (img[1:] - img[:1]).sum(axis=0) / img.shape[0] if img.shape[0] > 1 else img[0]
    if img.ndim != 2:
        raise ValueError("expected an (H, W) or (C, H, W) image")
    h, w = img.shape
    if h < MIN_HOG_SIZE or w < MIN_HOG_SIZE:
        raise ValueError(f"image {h}x{w} is smaller than the {MIN_HOG_SIZE}x{MIN_HOG_SIZE} cell grid")
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = img[:, 2:] - img[:, :-2]
    gy[1:-1, :] = img[2:, :] - img[:-2, :]
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.minimum((theta / (np.pi / HOG_BINS)).astype(np.int64), HOG_BINS - 1)
    rows = np.array_split(np.arange(h), HOG_CELLS)
    cols = np.array_split(np.arange(w), HOG_CELLS)
    desc = np.zeros((HOG_CELLS, HOG_CELLS, HOG_BINS))
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            m = mag[r[0]:r[-1] + 1, c[0]:c[-1] + 1].ravel()
            b = bins[r[0]:r[-1] + 1, c[0]:c[-1] + 1].ravel()
            desc[i, j] = np.bincount(b, weights=m, minlength=HOG_BINS)
    desc = desc.ravel()
    norm = np.linalg.norm(desc)
    return desc / norm if norm > 0 else desc


def hog_table(store):
    """HOG prior for every image in the store (cached on the store)."""
    if "hog" not in store._cache:
        g = store.gray()
        store._cache["hog"] = np.stack([hog_prior(im) for im in g]) if len(g) else np.zeros((0, PRIOR_SIZE))
    return store._cache["hog"]


@dataclass(frozen=True)
class FeatureToggles:
    uncertainty: bool = True
    diversity: bool = True
    prior: bool = True
    bias_aware: bool = True


@dataclass(frozen=True)
class Observation:
    uncertainty: float
    diversity: np.ndarray
    prior: np.ndarray
    bias_aware: np.ndarray

    def vector(self):
        return np.concatenate([[self.uncertainty], self.diversity, self.prior, self.bias_aware])

    @classmethod
    def from_vector(cls, v, n_classes):
        v = np.asarray(v)
        L = n_classes
        return cls(float(v[0]), v[1:1 + L], v[1 + L:-L], v[-L:])


def observation_size(n_classes):
    return 1 + n_classes + PRIOR_SIZE + n_classes


def observe(x, clf, stats, n_mc, seed, image=None, row_key=0):
    """Observation for one classifier input ``x``.

    The prior is the HOG of ``image`` (the full-resolution picture), or of
    ``x`` when no image is given.
    """
    clean, noisy = C.mc_dropout_predict(clf, x, n_mc, seed, row_keys=[row_key])
    e = C.embed(clf, x)
    prior = hog_prior(x if image is None else image)
    return Observation(float(mutual_information(clean, noisy)), diversity(e, stats), prior, bias_aware(stats))


def observe_pool(indices, store, clf, stats, n_mc, seed, toggles=FeatureToggles(), batch=512):
    """Observation matrix (len(indices), 1 + L + 144 + L) for pool items.

    MC masks are keyed by pool index so each row equals ``observe`` on that
    item alone. Disabled feature groups are zeroed, keeping the width fixed.
    """
    indices = np.asarray(indices, dtype=np.int64)
    L = clf.n_classes
    out = np.zeros((len(indices), observation_size(L)))
    ba = bias_aware(stats)
    hog = hog_table(store)
    for s in range(0, len(indices), batch):
        idx = indices[s:s + batch]
        x = clf.inputs(store, idx)
        rows = out[s:s + batch]
        if toggles.uncertainty:
            clean, noisy = C.mc_dropout_predict(clf, x, n_mc, seed, row_keys=idx)
            rows[:, 0] = mutual_information(clean, noisy)
        if toggles.diversity:
            rows[:, 1:1 + L] = diversity(C.embed(clf, x), stats)
        if toggles.prior:
            rows[:, 1 + L:1 + L + PRIOR_SIZE] = hog[idx]
        if toggles.bias_aware:
            rows[:, -L:] = ba
    return out

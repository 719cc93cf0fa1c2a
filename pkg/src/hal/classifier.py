"""The prediction model: training on the labeled set, validation accuracy,
embeddings and MC-dropout sampling."""

from dataclasses import dataclass, replace

import numpy as np

from . import nn


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    finetune_epochs: int = 10
    batch_size: int = 32
    lr: float = 0.001
    seed: int = 0
    mode: str = "scratch"  # or "finetune"
    n_mc: int = 10


@dataclass
class Classifier:
    spec: nn.ModelSpec
    params: list
    adam: nn.AdamState
    config: TrainConfig

    @classmethod
    def create(cls, spec, config=TrainConfig()):
        params = nn.init_params(spec, nn.derive_seed(config.seed, "init"))
        return cls(spec, params, nn.AdamState.zeros_like(params), config)

    @property
    def n_classes(self):
        return self.spec.output_size

    @property
    def embedding_size(self):
        return self.spec.embedding_size

    def inputs(self, store, indices):
        return store.model_inputs(self.spec.input_shape)[np.asarray(indices, dtype=np.int64)]


def default_spec(kind, n_classes, image_size=14, p_drop=0.5):
    if kind == "lenet":
        return nn.lenet_lite(n_classes, image_size, p_drop)
    if kind == "mlp":
        return nn.mlp(image_size * image_size, n_classes, p_drop=p_drop)
    raise ValueError(f"unknown classifier kind {kind!r}")


def train_classifier(clf, pool, store, epochs=None, seed=None):
    """Minibatch cross-entropy on the labeled set.

    Scratch mode re-initialises params and optimizer from the seed; finetune
    mode continues from the current state. Returns (new classifier, mean
    loss of the last epoch).
    """
    if not pool.labeled:
        raise ValueError("labeled set is empty")
    cfg = clf.config
    seed = cfg.seed if seed is None else seed
    if epochs is None:
        epochs = cfg.epochs if cfg.mode == "scratch" else cfg.finetune_epochs
    if cfg.mode == "scratch":
        params = nn.init_params(clf.spec, nn.derive_seed(seed, "init"))
        adam = nn.AdamState.zeros_like(params)
    elif cfg.mode == "finetune":
        params, adam = clf.params, clf.adam
    else:
        raise ValueError(f"unknown training mode {cfg.mode!r}")
    idx = np.asarray(pool.labeled, dtype=np.int64)
    x_all = clf.inputs(store, idx)
    y_all = store.labels[idx]
    n = len(idx)
    bs = min(cfg.batch_size, n)
    rng = np.random.default_rng(nn.derive_seed(seed, "batches", adam.t))
    onehot = np.eye(clf.n_classes)
    last_loss = float("nan")
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, bs):
            b = order[start:start + bs]
            probs, _, cache = nn.forward(clf.spec, params, x_all[b], mode="train",
                                         seed=nn.derive_seed(seed, "dropout", adam.t))
            target = onehot[y_all[b]]
            losses.append(-np.mean(np.log(np.maximum(probs[np.arange(len(b)), y_all[b]], 1e-300))))
            grads = nn.backward(clf.spec, params, cache, (probs - target) / len(b), skip_softmax=True)
            params, adam = nn.adam_step(params, grads, adam, cfg.lr)
        last_loss = float(np.mean(losses))
    return replace(clf, params=params, adam=adam), last_loss


def predict_proba(clf, store, indices, batch=1024):
    x = clf.inputs(store, indices)
    out = [nn.forward(clf.spec, clf.params, x[i:i + batch])[0] for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros((0, clf.n_classes))


def evaluate(clf, indices, store):
    """Eval-mode accuracy; argmax ties go to the lowest class index."""
    indices = list(indices)
    if not indices:
        raise ValueError("empty index set")
    probs = predict_proba(clf, store, indices)
    pred = probs.argmax(axis=1)  # first maximum
    return float(np.mean(pred == store.labels[np.asarray(indices)]))


def embed(clf, x):
    """Eval-mode activation of the embedding layer for one input or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == clf.spec.input_shape
    batch = x[None] if single else x
    if batch.shape[1:] != clf.spec.input_shape:
        raise ValueError(f"input shape {x.shape} does not match {clf.spec.input_shape}")
    _, emb, _ = nn.forward(clf.spec, clf.params, batch)
    return emb[0] if single else emb


def _first_dropout(spec):
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dropout":
            return i
    return None


def mc_dropout_predict(clf, x, n, seed, row_keys=None):
    """Clean eval-mode probabilities plus ``n`` dropout-perturbed passes.

    For a single input returns (clean (L,), noisy (n, L)); for a batch of B
    inputs returns (clean (B, L), noisy (B, n, L)). Pass j uses masks keyed by
    (seed, j, row key), so a row's samples do not depend on its batch-mates.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == clf.spec.input_shape
    batch = x[None] if single else x
    keys = np.arange(len(batch)) if row_keys is None else np.asarray(row_keys)
    clean, _, cache = nn.forward(clf.spec, clf.params, batch)
    start = _first_dropout(clf.spec)
    noisy = np.empty((len(batch), n, clean.shape[1]))
    for j in range(n):
        pass_seed = nn.derive_seed(seed, "mc", j)
        if start is None:
            noisy[:, j] = clean
        else:
            # layers before the first dropout are deterministic: resume from there
            noisy[:, j] = nn.forward(clf.spec, clf.params, cache.inputs[start], mode="mc",
                                     seed=pass_seed, row_keys=keys, start=start)[0]
    if single:
        return clean[0], noisy[0]
    return clean, noisy

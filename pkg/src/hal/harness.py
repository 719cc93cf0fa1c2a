"""Episode orchestration, policy training, learning-curve metrics and the
experiment drivers (representation / bias-aware ablations, duplicated pool,
cross-domain transfer)."""

import csv
import dataclasses
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import binomtest

from . import baselines as B
from . import classifier as C
from . import data
from . import features as F
from . import nn
from . import policy as P

log = logging.getLogger(__name__)

METHODS = ("hal", "random", "entropy", "dbal", "kcenter")


@dataclass(frozen=True)
class EpisodeConfig:
    episodes: int = 50
    steps: int = 10
    batch: int = 10
    pool_size: int = 2000
    n_labeled: int = 50
    n_val: int = 1000
    gamma: float = 0.9998
    policy_lr: float = 0.001
    policy_hidden: int = 64
    clip_lo: float = 0.1
    clip_hi: float = 10.0
    pg_baseline: bool = False
    buffer_capacity: int = 5000
    n_mc: int = 10
    classifier: str = "lenet"
    image_size: int = 14
    p_drop: float = 0.5
    epochs: int = 30
    finetune_epochs: int = 10
    clf_batch: int = 32
    clf_lr: float = 0.001
    retrain: str = "scratch"
    representation: str = "mean"
    use_uncertainty: bool = True
    use_diversity: bool = True
    use_prior: bool = True
    use_ba: bool = True
    seed: int = 0
    repeats: int = 15
    dup_fraction: float = 0.8
    noise_sigma: float = 0.05
    dup_sources: int = 1
    blend_strength: float = 0.5
    target_labels: int = 100

    def __post_init__(self):
        for name in ("episodes", "steps", "batch", "n_labeled", "n_val", "n_mc", "repeats"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.pool_size is not None and self.pool_size < self.steps * self.batch:
            raise ValueError("pool_size must be at least steps * batch")
        if self.retrain not in ("scratch", "finetune"):
            raise ValueError(f"unknown retrain mode {self.retrain!r}")
        if self.representation not in F.REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")

    @property
    def budget(self):
        return self.steps * self.batch

    @property
    def toggles(self):
        return F.FeatureToggles(self.use_uncertainty, self.use_diversity, self.use_prior, self.use_ba)

    def train_config(self, seed):
        return C.TrainConfig(epochs=self.epochs, finetune_epochs=self.finetune_epochs, batch_size=self.clf_batch,
                             lr=self.clf_lr, seed=seed, mode=self.retrain, n_mc=self.n_mc)


PROFILES = {
    "desk": {},
    "paper": {"episodes": 800, "pool_size": None, "n_val": 10000, "image_size": 28, "epochs": 30},
}


def profile_config(name, **overrides):
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}")
    return EpisodeConfig(**{**PROFILES[name], **overrides})


def config_fields():
    return {f.name: f for f in dataclasses.fields(EpisodeConfig)}


def parse_value(name, text):
    f = config_fields()[name]
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    text = text.strip()
    if name == "pool_size" and text.lower() in ("none", ""):
        return None
    if kind == "bool":
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: not a boolean: {text!r}")
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def read_config_file(path):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    known = config_fields()
    for lineno, line in enumerate(open(path), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = parse_value(key, value)
    return out


@dataclass
class Datasets:
    """A store plus an optional fixed validation holdout."""

    store: data.ImageStore
    holdout: np.ndarray = None

    @property
    def n_classes(self):
        return self.store.n_classes


@dataclass
class LearningCurve:
    labels: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)

    def add(self, n, acc):
        if self.labels and n <= self.labels[-1]:
            raise ValueError("label counts must increase")
        if not 0 <= acc <= 1:
            raise ValueError("accuracy out of range")
        self.labels.append(int(n))
        self.accuracy.append(float(acc))

    def accuracy_at(self, n):
        return self.accuracy[self.labels.index(n)]


@dataclass
class EpisodeResult:
    rewards: list
    curve: LearningCurve
    trajectories: list  # per step: list of Trajectory (empty for heuristic methods)
    selected: list      # per step: list of pool indices
    pool: data.PoolState


def make_pool(ds, cfg, seed):
    if ds.holdout is None:
        return data.make_splits(ds.store, cfg.n_labeled, cfg.n_val, seed, n_pool=cfg.pool_size)
    holdout = np.asarray(ds.holdout)
    if len(holdout) < cfg.n_val:
        raise ValueError(f"holdout has {len(holdout)} items, need {cfg.n_val}")
    rng = np.random.default_rng(nn.derive_seed(seed, "holdout"))
    val = np.sort(rng.choice(holdout, size=cfg.n_val, replace=False))
    rest = np.setdiff1d(np.arange(len(ds.store)), holdout)
    sub = ds.store.subset(rest)
    inner = data.make_splits(sub, cfg.n_labeled, 0, seed, n_pool=cfg.pool_size)
    return data.PoolState(rest[inner.labeled].tolist(), rest[inner.unlabeled].tolist(), val.tolist())


def new_classifier(cfg, n_classes, seed):
    spec = C.default_spec(cfg.classifier, n_classes, cfg.image_size, cfg.p_drop)
    return C.Classifier.create(spec, cfg.train_config(nn.derive_seed(seed, "classifier")))


def initial_classifier(cfg, ds, pool, seed):
    clf = new_classifier(cfg, ds.n_classes, seed)
    scratch = replace(clf, config=replace(clf.config, mode="scratch"))
    clf, _ = C.train_classifier(scratch, pool, ds.store)
    return replace(clf, config=replace(clf.config, mode=cfg.retrain))


def query(method, cfg, ds, pool, clf, seed, step, policy=None, mode="sample"):
    """One batch of ``cfg.batch`` pool indices; trajectories only for ``hal``."""
    s = nn.derive_seed(seed, "step", step)
    store = ds.store
    if method == "hal":
        stats = F.class_stats(clf, pool, store, cfg.representation)
        obs = F.observe_pool(pool.unlabeled, store, clf, stats, cfg.n_mc, nn.derive_seed(s, "observe"), cfg.toggles)
        return P.select_batch(policy, pool.unlabeled, obs, cfg.batch, nn.derive_seed(s, "tournament"), mode)
    if method == "random":
        r = B.random_query(pool, cfg.batch, nn.derive_seed(s, "random"))
    elif method == "entropy":
        r = B.entropy_query(pool, store, clf, cfg.batch)
    elif method == "dbal":
        r = B.dbal_query(pool, store, clf, cfg.batch, cfg.n_mc, nn.derive_seed(s, "dbal"))
    elif method == "kcenter":
        r = B.kcenter_query(pool, store, clf, cfg.batch)
    else:
        raise ValueError(f"unknown method {method!r}")
    return r.indices, []


def run_episode(cfg, ds, seed, policy=None, method="hal", mode="sample"):
    """Label ``cfg.steps`` batches, retraining after each; reward is the
    change in validation accuracy."""
    if method == "hal" and policy is None:
        raise ValueError("hal episodes need a policy")
    pool = make_pool(ds, cfg, seed)
    val_size = len(pool.validation)
    total = len(pool.labeled) + len(pool.unlabeled)
    clf = initial_classifier(cfg, ds, pool, seed)
    acc = C.evaluate(clf, pool.validation, ds.store)
    curve = LearningCurve()
    curve.add(len(pool.labeled), acc)
    rewards, trajs, selected = [], [], []
    for step in range(cfg.steps):
        chosen, step_trajs = query(method, cfg, ds, pool, clf, seed, step, policy, mode)
        pool.query(chosen)  # oracle labels are the stored labels
        if len(pool.labeled) + len(pool.unlabeled) != total or len(pool.validation) != val_size:
            raise RuntimeError("pool conservation violated")
        clf, _ = C.train_classifier(clf, pool, ds.store)
        new_acc = C.evaluate(clf, pool.validation, ds.store)
        rewards.append(new_acc - acc)
        acc = new_acc
        curve.add(len(pool.labeled), acc)
        trajs.append(step_trajs)
        selected.append(list(chosen))
    return EpisodeResult(rewards, curve, trajs, selected, pool)


def new_policy(cfg, n_classes):
    return P.PolicyNet.create(n_classes, seed=nn.derive_seed(cfg.seed, "policy"), hidden=cfg.policy_hidden)


@dataclass
class TrainingLog:
    mean_rewards: list = field(default_factory=list)
    reward_rows: list = field(default_factory=list)  # (episode, step, reward)
    losses: list = field(default_factory=list)


def train_policy(cfg, ds, policy=None, progress=None):
    """Sample-mode episodes, each followed by one off-policy update over the
    replay buffer. Returns (policy, TrainingLog, ReplayBuffer)."""
    policy = policy or new_policy(cfg, ds.n_classes)
    buffer = P.ReplayBuffer(cfg.buffer_capacity)
    tlog = TrainingLog()
    for ep in range(cfg.episodes):
        res = run_episode(cfg, ds, nn.derive_seed(cfg.seed, "episode", ep), policy, "hal", "sample")
        for step, (r, trajs) in enumerate(zip(res.rewards, res.trajectories)):
            buffer.add(ep, step, trajs, r)
            tlog.reward_rows.append((ep, step, r))
        tlog.mean_rewards.append(float(np.mean(res.rewards)))
        policy, loss = P.pg_update(policy, buffer, cfg.policy_lr, cfg.gamma, (cfg.clip_lo, cfg.clip_hi),
                                   cfg.pg_baseline)
        tlog.losses.append(loss)
        log.info("episode %d: mean reward %.4f loss %.5f", ep, tlog.mean_rewards[-1], loss)
        if progress:
            progress(ep, res)
    return policy, tlog, buffer


# -- metrics ----------------------------------------------------------------------

def alc(curve):
    """Trapezoidal area under accuracy vs labels, divided by the label range."""
    x = np.asarray(curve.labels, dtype=np.float64)
    y = np.asarray(curve.accuracy, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("curve needs at least two points")
    return float(np.sum((y[1:] + y[:-1]) * np.diff(x)) / 2 / (x[-1] - x[0]))


def alc_norm(curve, rand_curve, a_max):
    if list(curve.labels) != list(rand_curve.labels):
        raise ValueError("curves are on different label grids")
    a_rand = alc(rand_curve)
    if not a_max > a_rand:
        raise ValueError(f"degenerate denominator: A_max={a_max} <= A_rand={a_rand}")
    return (alc(curve) - a_rand) / (a_max - a_rand)


_AMAX_CACHE = {}


def a_max(cfg, ds, seed):
    """Validation accuracy after training on the fully labeled pool (cached)."""
    key = (id(ds.store), seed, cfg.classifier, cfg.image_size, cfg.epochs, cfg.pool_size, cfg.n_labeled, cfg.n_val,
           cfg.clf_batch, cfg.clf_lr, cfg.p_drop)
    if key not in _AMAX_CACHE:
        pool = make_pool(ds, cfg, seed)
        full = data.PoolState(pool.labeled + pool.unlabeled, [], pool.validation)
        clf = new_classifier(replace(cfg, retrain="scratch"), ds.n_classes, seed)
        clf, _ = C.train_classifier(clf, full, ds.store)
        _AMAX_CACHE[key] = C.evaluate(clf, pool.validation, ds.store)
    return _AMAX_CACHE[key]


def repeat_seeds(cfg):
    return [nn.derive_seed(cfg.seed, "repeat", r) for r in range(cfg.repeats)]


def evaluate_curves(cfg, ds, methods, policy=None, seeds=None, mode="greedy"):
    """{method: [LearningCurve per seed]} plus the per-seed episode results."""
    seeds = repeat_seeds(cfg) if seeds is None else seeds
    curves, results = {}, {}
    for m in methods:
        res = [run_episode(cfg, ds, s, policy, m, mode) for s in seeds]
        curves[m] = [r.curve for r in res]
        results[m] = res
    return curves, results


# -- CSV --------------------------------------------------------------------------

def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def curve_rows(curves, seeds, rename=None):
    rows = []
    for method, cs in curves.items():
        name = rename.get(method, method) if rename else method
        for s, c in zip(seeds, cs):
            rows.extend((name, s, n, a) for n, a in zip(c.labels, c.accuracy))
    return rows


def write_curves(path, curves, seeds, rename=None):
    write_csv(path, ["method", "seed", "labels", "accuracy"], curve_rows(curves, seeds, rename))


def read_curves(path):
    """{(method, seed): LearningCurve} from a curve CSV."""
    out = {}
    for row in read_csv(path):
        key = (row["method"], int(row["seed"]))
        out.setdefault(key, LearningCurve()).add(int(row["labels"]), float(row["accuracy"]))
    return out


def write_rewards(path, reward_rows):
    write_csv(path, ["episode", "step", "reward"], reward_rows)


# -- experiments ------------------------------------------------------------------

def alc_table(cfg, ds, curves, seeds, reference="random"):
    """[(method, seed, alc_norm)] against the reference method's curves."""
    rows = []
    for m, cs in curves.items():
        if m == reference:
            continue
        for s, c, rc in zip(seeds, cs, curves[reference]):
            rows.append((m, s, alc_norm(c, rc, a_max(cfg, ds, s))))
    return rows


def run_ablation_representation(cfg, ds, representations=F.REPRESENTATIONS, progress=None):
    """Train and evaluate one policy per class-centre representation under
    matched seeds. Returns (table {rep: mean alc_norm}, rows, curves)."""
    seeds = repeat_seeds(cfg)
    rand_curves, _ = evaluate_curves(cfg, ds, ["random"], seeds=seeds)
    rows, table, all_curves = [], {}, {"random": rand_curves["random"]}
    for rep in representations:
        rcfg = replace(cfg, representation=rep)
        pol, _, _ = train_policy(rcfg, ds)
        hal_curves, _ = evaluate_curves(rcfg, ds, ["hal"], pol, seeds)
        scores = []
        for r, (s, c, rc) in enumerate(zip(seeds, hal_curves["hal"], rand_curves["random"])):
            v = alc_norm(c, rc, a_max(cfg, ds, s))
            rows.append((rep, r, v))
            scores.append(v)
        table[rep] = float(np.mean(scores))
        all_curves[f"hal-{rep}"] = hal_curves["hal"]
        if progress:
            progress(rep, table[rep])
    return table, rows, all_curves


def run_ablation_ba(cfg, ds):
    """Policies trained with and without the bias-aware feature, compared at
    ``cfg.target_labels`` labels. Returns (rows, curves, seeds)."""
    seeds = repeat_seeds(cfg)
    curves, rows = {}, []
    for name, on in (("hal-ba", True), ("hal-no-ba", False)):
        vcfg = replace(cfg, use_ba=on)
        pol, _, _ = train_policy(vcfg, ds)
        cs, _ = evaluate_curves(vcfg, ds, ["hal"], pol, seeds)
        curves[name] = cs["hal"]
        for r, c in enumerate(cs["hal"]):
            rows.append((name, r, c.accuracy_at(cfg.target_labels)))
    return rows, curves, seeds


def concat_stores(a, b):
    return data.ImageStore(np.concatenate([a.images, b.images]), np.concatenate([a.labels, b.labels]),
                           np.concatenate([a.provenance, b.provenance]), max(a.n_classes, b.n_classes))


def duplicated_datasets(cfg, store, seed):
    """Duplicated train part (labeled + pool) plus a clean validation holdout."""
    pool_size = cfg.pool_size if cfg.pool_size is not None else len(store) - cfg.n_val - cfg.n_labeled
    train_n = pool_size + cfg.n_labeled
    split = data.make_splits(store, store.n_classes, cfg.n_val, nn.derive_seed(seed, "dup-split"))
    val = store.subset(split.validation)
    rest = store.subset(split.labeled + split.unlabeled)
    base = data.stratified_subset(rest, train_n, nn.derive_seed(seed, "dup-base"))
    dup = data.make_duplicated_pool(base, cfg.dup_fraction, cfg.noise_sigma, nn.derive_seed(seed, "dup"),
                                    cfg.dup_sources)
    merged = concat_stores(dup, val)
    return Datasets(merged, np.arange(len(dup), len(merged)))


def duplicate_fraction(ds, result):
    picked = [i for step in result.selected for i in step]
    return float(np.mean(ds.store.provenance[picked] == data.DUPLICATE))


def run_duplicated(cfg, ds, policy=None, methods=("hal", "random")):
    """Duplicate fractions and ALC_norm on a duplicated pool.

    Returns (policy, curves, results, seeds)."""
    if policy is None and "hal" in methods:
        policy, _, _ = train_policy(cfg, ds)
    seeds = repeat_seeds(cfg)
    curves, results = evaluate_curves(cfg, ds, methods, policy, seeds)
    return policy, curves, results, seeds


def run_transfer(cfg, source, target, policy=None, with_source=True):
    """Source-trained policy applied unmodified on the target, against a
    policy trained on the target with the same budget.

    Returns (curves, seeds, source policy, target policy). ``curves`` has
    "transfer" and "target-trained", plus "source" (the source policy on
    its own domain, same seeds) when ``with_source``.
    """
    if policy is None:
        policy, _, _ = train_policy(cfg, source)
    if policy.n_classes != target.n_classes:
        raise ValueError("source and target class counts differ")
    fresh, _, _ = train_policy(cfg, target)
    seeds = repeat_seeds(cfg)
    curves = {}
    if with_source:
        curves["source"] = evaluate_curves(cfg, source, ["hal"], policy, seeds)[0]["hal"]
    curves["transfer"] = evaluate_curves(cfg, target, ["hal"], policy, seeds)[0]["hal"]
    curves["target-trained"] = evaluate_curves(cfg, target, ["hal"], fresh, seeds)[0]["hal"]
    return curves, seeds, policy, fresh


def sign_test(a, b):
    """One-sided paired sign test of a > b; ties are dropped.

    Returns (wins, losses, p)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    wins = int(np.sum(a > b))
    losses = int(np.sum(a < b))
    if wins + losses == 0:
        return 0, 0, 1.0
    return wins, losses, float(binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue)


def save_policy(path, policy, meta=None):
    nn.save_checkpoint(path, policy.spec, policy.params, {"n_classes": policy.n_classes, **(meta or {})})


def load_policy(path):
    spec, params, meta = nn.load_checkpoint(path)
    if "n_classes" not in meta:
        raise ValueError(f"{path}: not a policy checkpoint")
    return P.PolicyNet(spec, params, nn.AdamState.zeros_like(params), int(meta["n_classes"]))

"""Image stores, IDX ingestion, pool splits, and the two synthetic pool
constructions (duplicated pool, colour-blend domain shift)."""

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049

ORIGINAL, DUPLICATE, SHIFTED = 0, 1, 2
PROVENANCE_NAMES = {ORIGINAL: "original", DUPLICATE: "duplicate", SHIFTED: "shifted"}

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IDXError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ImageStore:
    """N images (N, C, H, W) in [0, 1] with integer labels and provenance tags."""

    images: np.ndarray
    labels: np.ndarray
    provenance: np.ndarray = None
    n_classes: int = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim == 3:
            images = images[:, None]
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError("images must have shape (N, C, H, W)")
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        if images.size and (images.min() < 0 or images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        n_classes = self.n_classes if self.n_classes is not None else int(labels.max()) + 1
        if n_classes < 2:
            raise ValueError("need at least two classes")
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ValueError("labels out of range")
        prov = np.zeros(len(labels), dtype=np.int8) if self.provenance is None else np.asarray(self.provenance, dtype=np.int8)
        if prov.shape != labels.shape:
            raise ValueError("provenance length must match labels")
        images.setflags(write=False)
        labels.setflags(write=False)
        prov.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "provenance", prov)
        object.__setattr__(self, "n_classes", int(n_classes))

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return ImageStore(self.images[indices], self.labels[indices], self.provenance[indices], self.n_classes)

    def gray(self):
        """Single-channel view; multi-channel images use the channel mean.

        Written as c0 + mean(ci - c0) so that identical channels reproduce
        the source bit-for-bit.
        """
        if "gray" not in self._cache:
            x = self.images
            if x.shape[1] == 1:
                g = x[:, 0]
            else:
                g = x[:, 0] + (x[:, 1:] - x[:, :1]).sum(axis=1) / x.shape[1]
            self._cache["gray"] = np.clip(g, 0.0, 1.0)
        return self._cache["gray"]

    def model_inputs(self, input_shape):
        """Grayscale images block-averaged to the classifier's input shape."""
        key = ("inputs", tuple(input_shape))
        if key not in self._cache:
            g = self.gray()
            if len(input_shape) == 1:
                side = int(round(np.sqrt(input_shape[0])))
                out = _block_mean(g, side).reshape(len(g), -1)
            else:
                if input_shape[0] != 1:
                    raise ValueError("classifier inputs are single-channel")
                out = _block_mean(g, input_shape[1])[:, None]
            out.setflags(write=False)
            self._cache[key] = out
        return self._cache[key]


def _block_mean(g, side):
    n, h, w = g.shape
    if h == side and w == side:
        return g.copy()
    if h % side or w % side:
        raise ValueError(f"cannot downsample {h}x{w} to {side}x{side}")
    fh, fw = h // side, w // side
    return g.reshape(n, side, fh, side, fw).mean(axis=(2, 4))


# -- IDX ------------------------------------------------------------------------

def _read_idx(path, magic):
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise IDXError(f"{path}: truncated header")
    found, count = struct.unpack(">ii", data[:8])
    if found != magic:
        raise IDXError(f"{path}: wrong magic number {found} (expected {magic})")
    ndim = found & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IDXError(f"{path}: truncated header")
    dims = struct.unpack(">" + "i" * ndim, data[4:header])
    expected = int(np.prod(dims))
    if len(data) - header < expected:
        raise IDXError(f"{path}: truncated file ({len(data) - header} of {expected} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def load_idx(images_path, labels_path):
    """Parse a big-endian IDX image/label file pair into an ImageStore."""
    images = _read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC)
    if len(images) != len(labels):
        raise IDXError(f"count mismatch: {len(images)} images, {len(labels)} labels")
    return ImageStore(images.astype(np.float64) / 255.0, labels.astype(np.int64),
                      n_classes=max(int(labels.max()) + 1, 2))


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images (N, H, W) and labels (N,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">ii", IDX_LABEL_MAGIC, len(labels)) + labels.tobytes())


def resolve_data_dir(data_dir=None):
    """CLI flag first, then $HAL_DATA_DIR; None when neither is set."""
    d = data_dir or os.environ.get("HAL_DATA_DIR")
    return Path(d) if d else None


def load_mnist(data_dir, split="train"):
    img, lab = MNIST_FILES[split]
    d = Path(data_dir)
    for suffix in ("", ".idx"):
        if (d / (img + suffix)).exists():
            return load_idx(d / (img + suffix), d / (lab + suffix))
    raise FileNotFoundError(f"no MNIST IDX files ({img}) in {d}")


def load_digits_store(n_images=None, seed=0):
    """28x28 digit images built from scikit-learn's bundled 8x8 digits.

    Each digit is upsampled into a 20x20 box centred in 28x28 (the MNIST
    layout). When ``n_images`` exceeds the 1797 originals the remainder are
    jittered copies (small rotation, scale and shift).
    """
    from sklearn.datasets import load_digits

    d = load_digits()
    base = np.stack([_place_digit(im / 16.0) for im in d.images])
    labels = d.target.astype(np.int64)
    if n_images is None or n_images <= len(base):
        if n_images is not None:
            rng = np.random.default_rng(seed)
            keep = np.sort(rng.permutation(len(base))[:n_images])
            base, labels = base[keep], labels[keep]
        return ImageStore(base, labels, n_classes=10)
    rng = np.random.default_rng(seed)
    extra = n_images - len(base)
    src = rng.integers(0, len(base), size=extra)
    jittered = np.stack([_jitter(base[i], rng) for i in src])
    return ImageStore(np.concatenate([base, jittered]), np.concatenate([labels, labels[src]]), n_classes=10)


def _place_digit(im8):
    im = ndimage.zoom(im8, 20 / 8, order=1)
    out = np.zeros((28, 28))
    out[4:24, 4:24] = np.clip(im, 0, 1)
    return out


def _jitter(im, rng):
    angle = np.deg2rad(rng.uniform(-12, 12))
    scale = rng.uniform(0.9, 1.1)
    shift = rng.uniform(-2, 2, size=2)
    c, s = np.cos(angle), np.sin(angle)
    mat = np.array([[c, -s], [s, c]]) / scale
    centre = np.array([13.5, 13.5])
    offset = centre - mat @ (centre + shift)
    return np.clip(ndimage.affine_transform(im, mat, offset=offset, order=1), 0.0, 1.0)


def stratified_subset(store, n, seed):
    """Class-balanced random subset of ``n`` items (per-class counts differ by <= 1)."""
    rng = np.random.default_rng(seed)
    L = store.n_classes
    per = [n // L + (1 if c < n % L else 0) for c in rng.permutation(L)]
    out = []
    for c, k in zip(range(L), per):
        pool = np.flatnonzero(store.labels == c)
        if len(pool) < k:
            raise ValueError(f"class {c} has {len(pool)} items, need {k}")
        out.append(rng.choice(pool, size=k, replace=False))
    return store.subset(np.sort(np.concatenate(out)))


# -- pools ----------------------------------------------------------------------

class PoolState:
    """Disjoint labeled / unlabeled / validation index sets over a store."""

    def __init__(self, labeled, unlabeled, validation):
        self.labeled = [int(i) for i in labeled]
        self.unlabeled = [int(i) for i in unlabeled]
        self.validation = [int(i) for i in validation]
        self.check()

    def copy(self):
        return PoolState(self.labeled, self.unlabeled, self.validation)

    def check(self):
        sets = [set(self.labeled), set(self.unlabeled), set(self.validation)]
        if sum(map(len, sets)) != len(self.labeled) + len(self.unlabeled) + len(self.validation):
            raise ValueError("duplicate index within a pool set")
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("pool sets are not disjoint")

    def query(self, indices):
        """Move ``indices`` from the unlabeled pool to the labeled set."""
        indices = [int(i) for i in indices]
        if len(set(indices)) != len(indices):
            raise ValueError("duplicate indices in query")
        remaining = set(self.unlabeled)
        missing = [i for i in indices if i not in remaining]
        if missing:
            raise ValueError(f"indices not in the unlabeled pool: {missing[:5]}")
        chosen = set(indices)
        self.unlabeled = [i for i in self.unlabeled if i not in chosen]
        self.labeled.extend(indices)
        self.check()


def make_splits(store, n_labeled, n_val, seed, n_pool=None):
    """Balanced labeled set, then a validation draw, remainder unlabeled.

    ``n_pool`` optionally caps the unlabeled pool with a class-balanced draw.
    """
    L = store.n_classes
    if n_labeled <= 0:
        raise ValueError("n_labeled must be positive")
    if n_labeled % L:
        raise ValueError(f"n_labeled={n_labeled} is not divisible by {L} classes")
    rng = np.random.default_rng(seed)
    per = n_labeled // L
    labeled = []
    for c in range(L):
        idx = np.flatnonzero(store.labels == c)
        if len(idx) < per:
            raise ValueError(f"class {c} has only {len(idx)} items, need {per}")
        labeled.extend(rng.choice(idx, size=per, replace=False).tolist())
    rest = np.setdiff1d(np.arange(len(store)), labeled)
    if len(rest) < n_val:
        raise ValueError(f"store too small: {len(rest)} items left for {n_val} validation items")
    rest = rng.permutation(rest)
    validation = np.sort(rest[:n_val])
    unlabeled = np.sort(rest[n_val:])
    if n_pool is not None:
        if len(unlabeled) < n_pool:
            raise ValueError(f"store too small: {len(unlabeled)} pool items, need {n_pool}")
        unlabeled = _balanced_draw(store.labels[unlabeled], unlabeled, n_pool, rng)
    return PoolState(labeled, unlabeled.tolist(), validation.tolist())


def _balanced_draw(labels, indices, n, rng):
    classes = np.unique(labels)
    order = rng.permutation(len(indices))
    # round-robin over classes in a seeded item order
    buckets = [list(indices[order][labels[order] == c]) for c in classes]
    out = []
    while len(out) < n:
        for b in buckets:
            if b and len(out) < n:
                out.append(b.pop())
    return np.sort(np.array(out, dtype=np.int64))


def make_duplicated_pool(store, dup_fraction, noise_sigma=0.05, seed=0, sources_per_class=1):
    """Replace ``dup_fraction`` of the items with noisy copies of a few sources.

    The items that stay original are a class-balanced draw. Duplicate slots
    are assigned classes round-robin (class-uniform); each is a
    copy of one of ``sources_per_class`` source images of that class, drawn
    from the items that stay original, plus Gaussian pixel noise clamped to
    [0, 1]. Copies carry their source's label and the ``duplicate`` tag.
    """
    if not 0 <= dup_fraction < 1:
        raise ValueError("dup_fraction must be in [0, 1)")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    if len(store) == 0:
        raise ValueError("empty source store")
    n = len(store)
    n_dup = int(round(dup_fraction * n))
    if n_dup == 0:
        return store
    rng = np.random.default_rng(seed)
    # the kept originals are class-balanced so no class vanishes
    kept = _balanced_draw(store.labels, np.arange(n), n - n_dup, rng)
    dup_slots = np.setdiff1d(np.arange(n), kept)
    L = store.n_classes
    present = [c for c in range(L) if np.any(store.labels[kept] == c)]
    if not present:
        raise ValueError("no original items left to copy")
    sources = {}
    for c in present:
        cand = kept[store.labels[kept] == c]
        sources[c] = rng.choice(cand, size=min(sources_per_class, len(cand)), replace=False)
    class_order = rng.permutation(present)
    images = store.images.copy()
    labels = store.labels.copy()
    prov = store.provenance.copy()
    src_of = np.empty(n_dup, dtype=np.int64)
    for j, slot in enumerate(dup_slots):
        c = class_order[j % len(class_order)]
        src_of[j] = sources[c][rng.integers(len(sources[c]))]
    noise = rng.normal(0.0, noise_sigma, size=(n_dup,) + store.shape) if noise_sigma > 0 else 0.0
    images[dup_slots] = np.clip(store.images[src_of] + noise, 0.0, 1.0)
    labels[dup_slots] = store.labels[src_of]
    prov[dup_slots] = DUPLICATE
    out = ImageStore(images, labels, prov, store.n_classes)
    out._cache["duplicate_sources"] = dict(zip(dup_slots.tolist(), src_of.tolist()))
    return out


def color_field(shape, seed, grid=4):
    """Smooth RGB field in [0, 1]: a seeded grid x grid random grid, bilinearly upsampled."""
    h, w = shape
    rng = np.random.default_rng(seed)
    coarse = rng.random((3, grid, grid))
    ys = np.linspace(0, grid - 1, h)
    xs = np.linspace(0, grid - 1, w)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([ndimage.map_coordinates(coarse[c], [yy, xx], order=1) for c in range(3)])


def make_domain_shift(store, blend_strength, seed=0, field_fn=None):
    """Grayscale -> RGB with a per-image colour field blended in.

    out = (1 - blend) * gray + blend * |gray - field|; labels unchanged.
    """
    if not 0 <= blend_strength <= 1:
        raise ValueError("blend_strength must be in [0, 1]")
    g = store.gray()
    h, w = g.shape[1:]
    rng = np.random.default_rng(seed)
    field_seeds = rng.integers(0, 2**62, size=len(store))
    make = field_fn or (lambda s: color_field((h, w), s))
    out = np.empty((len(store), 3, h, w))
    for i in range(len(store)):
        rgb = np.broadcast_to(g[i], (3, h, w))
        if blend_strength == 0:
            out[i] = rgb
        else:
            f = make(int(field_seeds[i]))
            out[i] = (1 - blend_strength) * rgb + blend_strength * np.abs(rgb - f)
    return ImageStore(np.clip(out, 0.0, 1.0), store.labels, np.full(len(store), SHIFTED, dtype=np.int8),
                      store.n_classes)

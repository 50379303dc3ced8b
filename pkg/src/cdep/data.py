"""Datasets: IDX parsing, spurious-cue constructions, and tabular ingestion.

The two image benchmarks plant deliberate shortcuts in the training split
and break them at test time:

  color    each digit class is tinted its own hue at train time and the
           channelwise complement of that hue at test time, so any model
           keying on color collapses on the test split.
  decoy    a 4x4 corner patch whose shade encodes the class at train time
           and a random wrong class at test time; the patch pixels are
           recorded as per-sample bias masks.

MNIST-format IDX files are loaded when present. When they are not, a
deterministic stand-in corpus is synthesized from scikit-learn's 8x8 digit
glyphs (rescaled, rotated, and placed on a 28x28 canvas) and cached in IDX
form, so the binary loader is exercised either way.

The recidivism table loads from the published two-year CSV when a path is
supplied; a synthetic biased-tabular generator with the same schema shape
backs the fairness property tests otherwise.
"""

from __future__ import annotations

import colorsys
import csv
import os
import struct

import numpy as np

from . import storage

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    """Raised for malformed dataset files or impossible build requests."""


class LabeledDataset:
    """Inputs plus integer labels, with optional per-sample extras.

    bias_masks mark the planted spurious pixels (decoy); groups carry a
    per-sample category used for group-conditional metrics (race); feature
    names document tabular columns.
    """

    def __init__(self, inputs, labels, split, bias_masks=None, groups=None,
                 feature_names=None, n_classes=None):
        self.inputs = np.asarray(inputs, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"{self.inputs.shape[0]} inputs vs {self.labels.shape[0]} labels")
        self.split = split
        self.bias_masks = None if bias_masks is None else np.asarray(bias_masks, bool)
        self.groups = None if groups is None else np.asarray(groups)
        self.feature_names = feature_names
        self.n_classes = int(self.labels.max()) + 1 if n_classes is None else n_classes

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx, split=None):
        return LabeledDataset(
            self.inputs[idx], self.labels[idx], split or self.split,
            bias_masks=None if self.bias_masks is None else self.bias_masks[idx],
            groups=None if self.groups is None else self.groups[idx],
            feature_names=self.feature_names, n_classes=self.n_classes)


# --- IDX ------------------------------------------------------------------

def _read_idx_header(f, path, magic, n_dims):
    raw = f.read(4 * (1 + n_dims))
    if len(raw) != 4 * (1 + n_dims):
        raise DataError(f"{path}: truncated IDX header")
    fields = struct.unpack(f">{1 + n_dims}i", raw)
    if fields[0] != magic:
        raise DataError(
            f"{path}: bad magic 0x{fields[0]:08x}, expected 0x{magic:08x}")
    return fields[1:]


def load_mnist_idx(images_path, labels_path, split="train") -> LabeledDataset:
    """Load an IDX image/label file pair as N x 1 x H x W reals in [0, 1]."""
    with open(images_path, "rb") as f:
        n, rows, cols = _read_idx_header(f, images_path, IMAGES_MAGIC, 3)
        raw = f.read(n * rows * cols + 1)
        if len(raw) != n * rows * cols:
            raise DataError(f"{images_path}: expected {n * rows * cols} pixel bytes, "
                            f"got {len(raw)}")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)
    with open(labels_path, "rb") as f:
        (n_labels,) = _read_idx_header(f, labels_path, LABELS_MAGIC, 1)
        raw = f.read(n_labels + 1)
        if len(raw) != n_labels:
            raise DataError(f"{labels_path}: expected {n_labels} label bytes, "
                            f"got {len(raw)}")
        labels = np.frombuffer(raw, dtype=np.uint8)
    if n != n_labels:
        raise DataError(f"{images_path} has {n} images but {labels_path} "
                        f"has {n_labels} labels")
    return LabeledDataset(images / 255.0, labels, split, n_classes=10)


def write_mnist_idx(images_path, labels_path, images, labels) -> None:
    """Write images (N x 1 x H x W in [0,1]) and labels as an IDX pair."""
    images = np.asarray(images)
    n, _, rows, cols = images.shape
    pixels = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4i", IMAGES_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2i", LABELS_MAGIC, n))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


# --- stand-in digit corpus --------------------------------------------------

def _augment_glyph(g, rng, ndimage):
    """One heavily distorted 28x28 digit rendering from an 8x8 glyph.

    Distortions (scale, rotation, shear, elastic warp, stroke weight,
    intensity curve, speckle) are strong enough that shape takes real
    training effort, which is what lets planted shortcut features compete.
    """
    scale = rng.uniform(2.2, 2.8)
    img = ndimage.zoom(g, scale, order=1)
    angle = rng.uniform(-8.0, 8.0)
    img = ndimage.rotate(img, angle, order=1, reshape=False)
    shear = rng.uniform(-0.12, 0.12)
    mat = np.array([[1.0, shear], [0.0, 1.0]])
    img = ndimage.affine_transform(img, mat, order=1)
    # elastic warp: smoothed random pixel displacements
    amp, sigma = rng.uniform(0.2, 1.0), 3.0
    dr = ndimage.gaussian_filter(rng.normal(size=img.shape), sigma) * amp
    dc = ndimage.gaussian_filter(rng.normal(size=img.shape), sigma) * amp
    rr, cc = np.meshgrid(np.arange(img.shape[0]), np.arange(img.shape[1]),
                         indexing="ij")
    img = ndimage.map_coordinates(img, [rr + dr, cc + dc], order=1)
    if rng.integers(0, 3) == 2:
        img = ndimage.grey_dilation(img, size=2)
    img = np.clip(img, 0.0, 1.0) ** rng.uniform(0.8, 1.25)
    img *= rng.uniform(0.9, 1.1, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    img[img < 0.12] = 0.0
    rows = np.flatnonzero(img.any(axis=1))
    cols = np.flatnonzero(img.any(axis=0))
    if rows.size == 0:
        return None
    img = img[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    return img[:20, :20]


def make_digit_corpus(n_train, n_test, seed) -> tuple:
    """Deterministic 28x28 digit corpus grown from the 8x8 sklearn glyphs.

    Each sample takes one glyph (train and test draw from disjoint glyph
    pools), distorts it, and centers it in the middle of the central 20x20
    region of a black canvas. Background stays exactly zero so nonzero-pixel
    statistics behave like handwritten digits on a clean field. Size and
    warp variation still move strokes around between samples, so position
    is only loosely informative. Training images also get cutout augmentation
    (a random rectangle of the central region erased), which regularizes
    shape features; test images are never occluded.
    """
    from scipy import ndimage
    from sklearn.datasets import load_digits

    glyphs, glyph_labels = load_digits(return_X_y=True)
    glyphs = glyphs.reshape(-1, 8, 8) / 16.0
    rng = np.random.default_rng(seed)
    pools = {"train": {}, "test": {}}
    for c in range(10):
        idx = np.flatnonzero(glyph_labels == c)
        cut = max(1, int(0.8 * idx.size))
        pools["train"][c] = idx[:cut]
        pools["test"][c] = idx[cut:]

    def build(count, phase):
        images = np.zeros((count, 1, 28, 28))
        labels = rng.integers(0, 10, size=count)
        for i, c in enumerate(labels):
            img = None
            while img is None:
                g = glyphs[rng.choice(pools[phase][int(c)])]
                img = _augment_glyph(g, rng, ndimage)
            h, w = img.shape
            r0 = 4 + (20 - h) // 2
            c0 = 4 + (20 - w) // 2
            images[i, 0, r0:r0 + h, c0:c0 + w] = img
            if phase == "train" and rng.random() < 0.33:
                ch = int(rng.integers(8, 15))
                cw = int(rng.integers(8, 15))
                rr = int(rng.integers(4, 25 - ch))
                cc = int(rng.integers(4, 25 - cw))
                images[i, 0, rr:rr + ch, cc:cc + cw] = 0.0
        return images, labels

    train = build(n_train, "train")
    test = build(n_test, "test")
    return (LabeledDataset(train[0], train[1], "train", n_classes=10),
            LabeledDataset(test[0], test[1], "test", n_classes=10))


def get_mnist(root, n_train=12000, n_test=2000, seed=1234):
    """Train/test digit datasets from IDX files, synthesizing them if absent.

    Looks for the standard MNIST file names under root; when missing, the
    stand-in corpus is built once, written to root in IDX form, and loaded
    back through the binary parser.
    """
    names = [("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "train"),
             ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", "test")]
    os.makedirs(root, exist_ok=True)
    if not all(os.path.exists(os.path.join(root, a)) and
               os.path.exists(os.path.join(root, b)) for a, b, _ in names):
        train, test = make_digit_corpus(n_train, n_test, seed)
        for ds, (a, b, _) in zip((train, test), names):
            write_mnist_idx(os.path.join(root, a), os.path.join(root, b),
                            ds.inputs, ds.labels)
    out = []
    for a, b, split in names:
        out.append(load_mnist_idx(os.path.join(root, a), os.path.join(root, b),
                                  split=split))
    return tuple(out)


# --- spurious-cue builders ---------------------------------------------------

def default_palette():
    """Ten saturated hues; the test-time complement of hue c is hue c+5."""
    return np.array([colorsys.hsv_to_rgb(c / 10.0, 1.0, 1.0) for c in range(10)])


def make_color_mnist(dataset: LabeledDataset, palette=None, phase="train") -> LabeledDataset:
    """Tint each class its palette color (train) or the complement (test)."""
    palette = default_palette() if palette is None else np.asarray(palette, float)
    if palette.shape != (10, 3):
        raise DataError(f"palette must be 10 RGB rows, got shape {palette.shape}")
    if len(np.unique(palette.round(12), axis=0)) != 10 or palette.min() < 0 or palette.max() > 1:
        raise DataError("palette colors must be distinct RGB values in [0, 1]")
    if phase not in ("train", "test"):
        raise DataError(f"phase must be train or test, got {phase!r}")
    colors = palette if phase == "train" else 1.0 - palette
    per_sample = colors[dataset.labels]  # (N, 3)
    images = dataset.inputs * per_sample[:, :, None, None]
    return LabeledDataset(images, dataset.labels, dataset.split, n_classes=10)


DECOY_PATCH = 4


def decoy_shade(c):
    return 0.05 + 0.9 * (c / 9.0)


def make_decoy_mnist(dataset: LabeledDataset, phase="train", seed=0) -> LabeledDataset:
    """Plant a class-shaded patch in a random corner; masks mark the patch.

    Train patches encode the true class; test patches encode a uniformly
    random wrong class, so relying on the patch caps test accuracy near
    chance.
    """
    if phase not in ("train", "test"):
        raise DataError(f"phase must be train or test, got {phase!r}")
    rng = np.random.default_rng(seed)
    n, _, h, w = dataset.inputs.shape
    p = DECOY_PATCH
    images = dataset.inputs.copy()
    masks = np.zeros((n, 1, h, w), dtype=bool)
    corners = rng.integers(0, 4, size=n)
    if phase == "train":
        shade_class = dataset.labels
    else:
        offset = rng.integers(1, 10, size=n)
        shade_class = (dataset.labels + offset) % 10
    starts = {0: (0, 0), 1: (0, w - p), 2: (h - p, 0), 3: (h - p, w - p)}
    for i in range(n):
        r0, c0 = starts[int(corners[i])]
        images[i, 0, r0:r0 + p, c0:c0 + p] = decoy_shade(int(shade_class[i]))
        masks[i, 0, r0:r0 + p, c0:c0 + p] = True
    return LabeledDataset(images, dataset.labels, dataset.split,
                          bias_masks=masks, n_classes=10)


def pixel_distribution(dataset: LabeledDataset) -> np.ndarray:
    """Per-pixel probability of nonzero intensity across the dataset."""
    nonzero = (dataset.inputs != 0).any(axis=1)  # (N, H, W)
    counts = nonzero.sum(axis=0).astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise DataError("pixel distribution undefined: dataset is all zero")
    return counts / total


# --- recidivism table --------------------------------------------------------

CHARGE_CATEGORIES = ("Drugs", "Driving", "Violence", "Robbery", "Other")

_CHARGE_KEYWORDS = (
    ("Violence", ("battery", "assault", "violence", "abuse", "murder", "weapon")),
    ("Robbery", ("robbery", "burglary", "theft", "larceny", "stolen")),
    ("Drugs", ("drug", "cocaine", "cannabis", "heroin", "meth", "marij",
               "narcotic", "possess")),
    ("Driving", ("driving", "driv", "license", "d.u.i", "dui", "traffic")),
)

COMPAS_COLUMNS = {
    "age": "age",
    "sex": "sex",
    "race": "race",
    "priors": "priors_count",
    "degree": "c_charge_degree",
    "charge_desc": "c_charge_desc",
    "label": "two_year_recid",
    "screen_gap": "days_b_screening_arrest",
}

AGE_BANDS = ("age<25", "age25-45", "age>45")
RACE_VALUES = ("black", "white")
SEX_VALUES = ("male", "female")
DEGREE_VALUES = ("felony", "misdemeanor")


def charge_category(description: str) -> str:
    d = (description or "").lower()
    for name, words in _CHARGE_KEYWORDS:
        if any(w in d for w in words):
            return name
    return "Other"


def age_band(age: int) -> str:
    if age < 25:
        return AGE_BANDS[0]
    if age <= 45:
        return AGE_BANDS[1]
    return AGE_BANDS[2]


def compas_feature_names():
    return (list(AGE_BANDS)
            + [f"sex:{s}" for s in SEX_VALUES]
            + [f"race:{r}" for r in RACE_VALUES]
            + [f"degree:{d}" for d in DEGREE_VALUES]
            + ["priors_count"]
            + [f"charge:{c}" for c in CHARGE_CATEGORIES])


def race_columns(feature_names):
    return [i for i, n in enumerate(feature_names) if n.startswith("race:")]


def _encode_compas_rows(rows):
    names = compas_feature_names()
    x = np.zeros((len(rows), len(names)))
    y = np.zeros(len(rows), dtype=np.int64)
    races = []
    for i, r in enumerate(rows):
        x[i, names.index(age_band(r["age"]))] = 1.0
        x[i, names.index(f"sex:{r['sex']}")] = 1.0
        x[i, names.index(f"race:{r['race']}")] = 1.0
        x[i, names.index(f"degree:{r['degree']}")] = 1.0
        x[i, names.index("priors_count")] = r["priors"]
        x[i, names.index(f"charge:{r['category']}")] = 1.0
        y[i] = r["label"]
        races.append(r["race"])
    return x, y, np.array(races)


def split_indices(n, fractions, rng):
    """Shuffled index splits with the given fractions (last takes remainder)."""
    perm = rng.permutation(n)
    cuts = np.cumsum([int(f * n) for f in fractions[:-1]])
    return np.split(perm, cuts)


def load_compas(csv_path, seed=0):
    """Parse the two-year recidivism CSV into train/val/test datasets.

    Rows are kept when the charge-to-screening gap is within 30 days (the
    published analysis's criterion for trustworthy recidivism linkage) and
    race is black or white. Unparseable rows are counted and reported in
    the returned info dict, never silently dropped.
    """
    if not os.path.exists(csv_path):
        raise DataError(f"recidivism CSV not found: {csv_path}")
    with open(csv_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = [c for c in COMPAS_COLUMNS.values()
                   if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{csv_path}: missing required columns {missing}")
        rows, bad_rows, linkage_excluded, other_race = [], 0, 0, 0
        race_map = {"African-American": "black", "Caucasian": "white"}
        for raw in reader:
            try:
                gap = float(raw[COMPAS_COLUMNS["screen_gap"]])
                if abs(gap) > 30:
                    linkage_excluded += 1
                    continue
                race = race_map.get(raw[COMPAS_COLUMNS["race"]])
                if race is None:
                    other_race += 1
                    continue
                rows.append({
                    "age": int(raw[COMPAS_COLUMNS["age"]]),
                    "sex": raw[COMPAS_COLUMNS["sex"]].strip().lower(),
                    "race": race,
                    "degree": ("felony" if raw[COMPAS_COLUMNS["degree"]].strip()
                               .upper().startswith("F") else "misdemeanor"),
                    "priors": float(raw[COMPAS_COLUMNS["priors"]]),
                    "category": charge_category(raw[COMPAS_COLUMNS["charge_desc"]]),
                    "label": int(raw[COMPAS_COLUMNS["label"]]),
                })
            except (KeyError, ValueError, TypeError):
                bad_rows += 1
        if any(r["sex"] not in SEX_VALUES for r in rows):
            raise DataError(f"{csv_path}: unexpected sex values")
    if not rows:
        raise DataError(f"{csv_path}: no usable rows")
    x, y, races = _encode_compas_rows(rows)
    # scale priors into unit range so one-hot and numeric columns are comparable
    pcol = compas_feature_names().index("priors_count")
    x[:, pcol] /= max(1.0, x[:, pcol].max())
    rng = np.random.default_rng(seed)
    tr, va, te = split_indices(len(rows), (0.8, 0.1, 0.1), rng)
    names = compas_feature_names()
    sets = tuple(
        LabeledDataset(x[idx], y[idx], split, groups=races[idx],
                       feature_names=names, n_classes=2)
        for idx, split in ((tr, "train"), (va, "val"), (te, "test")))
    info = {"kept": len(rows), "linkage_excluded": linkage_excluded,
            "other_race": other_race, "bad_rows": bad_rows}
    return sets, info


def make_biased_tabular(n=3000, seed=0, bias=1.25, noise=0.6):
    """Synthetic recidivism-shaped data with a race-dependent biased proxy.

    The true outcome depends only on a latent risk z shared across groups;
    the strongest observable feature is a proxy p = z + bias for one group
    and p = z for the other. A model leaning on p alone inflates false
    positives for the shifted group; a model that also uses race can
    de-bias p. Schema mirrors the real table so the same harness runs.
    """
    rng = np.random.default_rng(seed)
    names = compas_feature_names()
    black = rng.random(n) < 0.5
    z = rng.normal(size=n)
    y = (z + rng.normal(scale=0.4, size=n) > 0).astype(np.int64)
    proxy = z + bias * black + rng.normal(scale=noise, size=n)
    weak = z + rng.normal(scale=1.2, size=n)
    x = np.zeros((n, len(names)))
    x[:, names.index("race:black")] = black
    x[:, names.index("race:white")] = ~black
    x[:, names.index("priors_count")] = _sigmoid(proxy)
    x[:, names.index("charge:Violence")] = _sigmoid(weak)
    x[:, names.index("age<25")] = rng.random(n) < 0.3
    x[:, names.index("sex:male")] = rng.random(n) < 0.8
    races = np.where(black, "black", "white")
    rng_split = np.random.default_rng(seed + 1)
    tr, va, te = split_indices(n, (0.8, 0.1, 0.1), rng_split)
    return tuple(
        LabeledDataset(x[idx], y[idx], split, groups=races[idx],
                       feature_names=names, n_classes=2)
        for idx, split in ((tr, "train"), (va, "val"), (te, "test")))


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


# --- dataset cache -----------------------------------------------------------

def save_dataset(path, dataset: LabeledDataset) -> None:
    """Cache a dataset as a block container plus an RLE mask sidecar."""
    header = {
        "kind": "dataset",
        "split": dataset.split,
        "n_classes": dataset.n_classes,
        "feature_names": dataset.feature_names,
        "groups": None if dataset.groups is None else dataset.groups.tolist(),
        "has_masks": dataset.bias_masks is not None,
    }
    storage.write_blocks(path, header, [dataset.inputs,
                                        dataset.labels.astype(np.float64)])
    if dataset.bias_masks is not None:
        storage.write_masks(path + ".masks", dataset.bias_masks)


def load_dataset(path) -> LabeledDataset:
    header, blocks = storage.read_blocks(path)
    if header.get("kind") != "dataset":
        raise DataError(f"{path}: not a dataset cache")
    masks = storage.read_masks(path + ".masks") if header["has_masks"] else None
    groups = header["groups"]
    return LabeledDataset(
        blocks[0], blocks[1].astype(np.int64), header["split"],
        bias_masks=masks, groups=None if groups is None else np.array(groups),
        feature_names=header["feature_names"], n_classes=header["n_classes"])

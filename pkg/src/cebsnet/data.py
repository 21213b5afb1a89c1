"""Synthetic bitemporal pairs and the on-disk dataset layout.

Layout under a root directory::

    <root>/<split>.txt            one sample id per line
    <root>/<split>/<id>_A.png     8-bit RGB, time 1
    <root>/<split>/<id>_B.png     8-bit RGB, time 2
    <root>/<split>/<id>_GT.png    8-bit grayscale, 255 = changed
"""

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .tensor import ContractError

SPLITS = ("train", "val", "test")
MIN_CHANGE, MAX_CHANGE = 0.03, 0.30


class DatasetError(ContractError):
    pass


@dataclass
class SamplePair:
    image_a: np.ndarray  # (3, S, S) float in [0, 1]
    image_b: np.ndarray
    gt: np.ndarray       # (S, S) uint8 in {0, 1}
    id: str


@dataclass
class DatasetManifest:
    root: str
    splits: dict = field(default_factory=dict)
    size: int = 0

    def ids(self, split):
        return list(self.splits.get(split, []))


def _background(rng, size):
    noise = rng.standard_normal((3, size, size))
    coarse = np.stack([gaussian_filter(c, size / 10, mode="wrap") for c in noise])
    fine = np.stack([gaussian_filter(c, size / 40, mode="wrap") for c in rng.standard_normal((3, size, size))])
    field_ = coarse / (coarse.std() + 1e-12) + 0.3 * fine / (fine.std() + 1e-12)
    lo, hi = field_.min(), field_.max()
    base = rng.uniform(0.25, 0.45) + rng.uniform(0.2, 0.35) * (field_ - lo) / (hi - lo + 1e-12)
    return np.clip(base, 0, 1)


def _shape_mask(rng, size):
    h = int(rng.integers(size // 8, size // 3 + 1))
    w = int(rng.integers(size // 8, size // 3 + 1))
    top = int(rng.integers(0, size - h + 1))
    left = int(rng.integers(0, size - w + 1))
    yy, xx = np.mgrid[0:size, 0:size]
    if rng.random() < 0.5:
        m = (yy >= top) & (yy < top + h) & (xx >= left) & (xx < left + w)
    else:
        cy, cx = top + (h - 1) / 2, left + (w - 1) / 2
        m = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
    return m


def _object_color(rng, under):
    # keep objects visibly distinct from the scene underneath
    mean = under.reshape(3, -1).mean(axis=1)
    for _ in range(50):
        color = rng.uniform(0, 1, size=3)
        if np.abs(color - mean).max() > 0.3:
            return color
    return 1.0 - mean


def _changes(rng, size, a, b, n_objects):
    gt = np.zeros((size, size), dtype=bool)
    for _ in range(n_objects):
        kind = rng.choice(("insert", "delete", "move"))
        m = _shape_mask(rng, size)
        color = _object_color(rng, a[:, m])
        if kind == "insert":
            b[:, m] = color[:, None]
            gt |= m
        elif kind == "delete":
            a[:, m] = color[:, None]
            gt |= m
        else:
            for _ in range(50):
                m2 = _shape_mask(rng, size)
                if not (m & m2).any():
                    break
            else:
                continue
            a[:, m] = color[:, None]
            b[:, m2] = color[:, None]
            gt |= m | m2
    return gt


def _nuisance(rng, img, difficulty):
    if difficulty <= 0:
        return img
    contrast = 1.0 + difficulty * rng.uniform(-0.2, 0.2)
    brightness = difficulty * rng.uniform(-0.1, 0.1)
    drift = difficulty * rng.uniform(-0.05, 0.05, size=(3, 1, 1))
    noise = difficulty * 0.03 * rng.standard_normal(img.shape)
    mean = img.mean()
    return np.clip((img - mean) * contrast + mean + brightness + drift + noise, 0, 1)


def make_pair(seed, index, size, difficulty=0.5, n_objects=None):
    """One deterministic sample: (image_a, image_b, gt) as uint8 arrays.

    With ``n_objects=0`` and zero difficulty both images are identical.
    """
    if size % 32 or size < 32:
        raise DatasetError(f"size must be divisible by 32, got {size}")
    rng = np.random.default_rng([seed, index])
    base = _background(rng, size)
    for _ in range(200):
        a, b = base.copy(), base.copy()
        k = int(rng.integers(1, 7)) if n_objects is None else n_objects
        gt = _changes(rng, size, a, b, k)
        if k == 0 or MIN_CHANGE <= gt.mean() <= MAX_CHANGE:
            break
    else:  # pragma: no cover - the size ranges make this practically unreachable
        raise DatasetError(f"could not place objects covering {MIN_CHANGE}-{MAX_CHANGE} of the image")
    b = _nuisance(rng, b, difficulty)
    to8 = lambda x: np.round(x * 255).astype(np.uint8)  # noqa: E731
    return to8(a), to8(b), gt.astype(np.uint8)


def _write_png(path, arr):
    if arr.ndim == 3:
        Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0))).save(path)
    else:
        Image.fromarray(arr).save(path)


def split_counts(count, val_frac=0.0, test_frac=0.0):
    n_val = int(round(count * val_frac))
    n_test = int(round(count * test_frac))
    n_train = count - n_val - n_test
    if n_train < 0:
        raise DatasetError("val/test fractions exceed the sample count")
    return {"train": n_train, "val": n_val, "test": n_test}


def gen_synthetic(root, seed, count, size, difficulty=0.5, n_objects=None, val_frac=0.0, test_frac=0.0):
    """Write ``count`` pairs under ``root`` and return the manifest."""
    if size % 32 or size < 32:
        raise DatasetError(f"size must be divisible by 32, got {size}")
    if count < 1:
        raise DatasetError(f"count must be >= 1, got {count}")
    counts = split_counts(count, val_frac, test_frac)
    manifest = DatasetManifest(root=str(root), size=size)
    index = 0
    for split in SPLITS:
        ids = []
        if counts[split]:
            os.makedirs(os.path.join(root, split), exist_ok=True)
        for _ in range(counts[split]):
            sid = f"{index:05d}"
            a, b, gt = make_pair(seed, index, size, difficulty, n_objects)
            _write_png(os.path.join(root, split, f"{sid}_A.png"), a)
            _write_png(os.path.join(root, split, f"{sid}_B.png"), b)
            _write_png(os.path.join(root, split, f"{sid}_GT.png"), gt * 255)
            ids.append(sid)
            index += 1
        if ids:
            with open(os.path.join(root, f"{split}.txt"), "w") as fh:
                fh.write("\n".join(ids) + "\n")
            manifest.splits[split] = ids
    return manifest


def load_dataset(root):
    if not os.path.isdir(root):
        raise FileNotFoundError(f"dataset root {root!r} does not exist")
    manifest = DatasetManifest(root=str(root))
    for split in SPLITS:
        path = os.path.join(root, f"{split}.txt")
        if os.path.exists(path):
            with open(path) as fh:
                manifest.splits[split] = [ln.strip() for ln in fh if ln.strip()]
    if not manifest.splits:
        raise DatasetError(f"no split lists (train.txt/val.txt/test.txt) under {root!r}")
    return manifest


def _read_png(path, what, sid):
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing {what} for sample {sid!r}: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L" if what == "ground truth" else "RGB"))
    h, w = arr.shape[:2]
    if h != w:
        raise DatasetError(f"sample {sid!r}: {what} is not square ({h}x{w})")
    if h % 32:
        raise DatasetError(f"sample {sid!r}: {what} size {h} is not divisible by 32")
    return arr


def find_split(manifest, sid):
    for split, ids in manifest.splits.items():
        if sid in ids:
            return split
    raise DatasetError(f"unknown sample id {sid!r}")


def read_sample(manifest, sid, split=None):
    split = split or find_split(manifest, sid)
    d = os.path.join(manifest.root, split)
    a = _read_png(os.path.join(d, f"{sid}_A.png"), "image A", sid)
    b = _read_png(os.path.join(d, f"{sid}_B.png"), "image B", sid)
    gt = _read_png(os.path.join(d, f"{sid}_GT.png"), "ground truth", sid)
    if not (a.shape[:2] == b.shape[:2] == gt.shape):
        raise DatasetError(f"sample {sid!r}: image sizes differ {a.shape[:2]}, {b.shape[:2]}, {gt.shape}")
    return SamplePair(
        image_a=a.transpose(2, 0, 1).astype(np.float32) / 255.0,
        image_b=b.transpose(2, 0, 1).astype(np.float32) / 255.0,
        gt=(gt >= 128).astype(np.uint8),
        id=sid,
    )


def load_split(manifest, split):
    """All samples of a split stacked as (A, B, GT, ids)."""
    ids = manifest.ids(split)
    if not ids:
        raise DatasetError(f"no samples in split {split!r}")
    samples = [read_sample(manifest, sid, split) for sid in ids]
    return (
        np.stack([s.image_a for s in samples]),
        np.stack([s.image_b for s in samples]),
        np.stack([s.gt for s in samples]),
        ids,
    )


def augment(a, b, gt, rng):
    """Identical random flip / 90-degree rotation of a (3,S,S), b (3,S,S), gt (S,S)."""
    k = int(rng.integers(0, 4))
    flip_h, flip_v = rng.random() < 0.5, rng.random() < 0.5
    out = []
    for img in (a, b, gt[None]):
        img = np.rot90(img, k, axes=(1, 2))
        if flip_h:
            img = img[:, :, ::-1]
        if flip_v:
            img = img[:, ::-1, :]
        out.append(np.ascontiguousarray(img))
    return out[0], out[1], out[2][0]

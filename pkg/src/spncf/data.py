"""Synthetic datasets, grayscale image I/O and group-aware splits."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .structlearn import LatentTable


class SplitError(ValueError):
    pass


@dataclass
class LabeledDataset:
    instances: np.ndarray  # (n, h*w), values in [0, 1]
    shape: tuple[int, int]
    labels: np.ndarray
    group_ids: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.group_ids = np.asarray(self.group_ids, dtype=np.int64)
        self.shape = tuple(int(s) for s in self.shape)
        n = len(self.labels)
        if self.instances.shape != (n, self.shape[0] * self.shape[1]):
            raise ValueError("instances must be (n, h*w) matching labels and shape")
        if len(self.group_ids) != n:
            raise ValueError("group_ids length mismatch")
        if n and (self.instances.min() < 0 or self.instances.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.metadata.get("num_classes", int(self.labels.max()) + 1))

    def subset(self, idx: Sequence[int]) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.intp)
        meta = dict(self.metadata)
        for key in ("masks", "region_bbox"):
            if key in meta:
                meta[key] = np.asarray(meta[key])[idx]
        meta["num_classes"] = self.num_classes
        return LabeledDataset(self.instances[idx], self.shape, self.labels[idx],
                              self.group_ids[idx], meta)


# --------------------------------------------------------------------------
# generators


def gen_latent_mixture(n: int, d: int, class_means: Sequence[Sequence[float]],
                       class_covs: Sequence[np.ndarray], seed: int) -> LatentTable:
    """Balanced sample from one Gaussian per class."""
    means = [np.asarray(m, dtype=float) for m in class_means]
    covs = [np.asarray(c, dtype=float) for c in class_covs]
    if len(means) != len(covs) or not means:
        raise ValueError("need one mean and one covariance per class")
    chols = []
    for k, (m, c) in enumerate(zip(means, covs)):
        if m.shape != (d,) or c.shape != (d, d):
            raise ValueError(f"class {k}: mean/covariance shape does not match d={d}")
        if not np.allclose(c, c.T):
            raise ValueError(f"class {k}: covariance is not symmetric")
        try:
            chols.append(np.linalg.cholesky(c))
        except np.linalg.LinAlgError:
            raise ValueError(f"class {k}: covariance is not positive definite") from None
    num_classes = len(means)
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    eps = rng.standard_normal((n, d))
    rows = np.empty((n, d))
    for k in range(num_classes):
        sel = labels == k
        rows[sel] = means[k] + eps[sel] @ chols[k].T
    return LatentTable(rows.reshape(n, d), labels, num_classes=num_classes,
                       metadata={"generator": "latent_mixture",
                                 "class_means": [m.tolist() for m in means],
                                 "class_covs": [c.tolist() for c in covs], "seed": seed})


def _ellipse_mask(side: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def gen_ellipse_images(n: int, side: int = 32,
                       class_radii: Sequence[tuple[float, float]] = ((5.0, 6.0), (9.0, 10.0)),
                       noise_sigma: float = 0.05, seed: int = 0, group_size: int = 4,
                       jitter: int = 2, foreground: float = 0.8,
                       background: float = 0.15, size_jitter: float = 0.1,
                       intensity_jitter: float = 0.1) -> LabeledDataset:
    """Images of a filled ellipse whose size encodes the class.

    Class 1 has the larger ellipse.  Every group (patient analog) shares one
    centre offset; classes are balanced.  ``metadata["masks"]`` holds each
    instance's ellipse and ``metadata["region_bbox"]`` the bounding box of the
    largest class ellipse at that centre, i.e. the region where class changes
    show up.  Radii are (ry, rx); each instance scales them by a uniform factor
    in ``1 +- size_jitter`` and its foreground by ``1 +- intensity_jitter``.
    """
    if side < 16:
        raise ValueError("side must be at least 16")
    radii = [tuple(float(r) for r in pair) for pair in class_radii]
    if len(radii) != 2:
        raise ValueError("expected radii for exactly two classes")
    if any(r <= 0 for pair in radii for r in pair):
        raise ValueError("ellipse radii must be positive")
    if radii[0] == radii[1]:
        raise ValueError("class radii must differ")
    areas = [a * b for a, b in radii]
    if areas[1] <= areas[0]:
        raise ValueError("class 1 must have the larger ellipse")
    if not 0 <= size_jitter < 1 or not 0 <= intensity_jitter < 1:
        raise ValueError("jitter fractions must lie in [0, 1)")
    if areas[0] * (1 + size_jitter) ** 2 >= areas[1] * (1 - size_jitter) ** 2:
        raise ValueError("size jitter makes the class ellipses overlap in size")
    if max(max(p) for p in radii) * (1 + size_jitter) + jitter >= side / 2:
        raise ValueError("ellipse does not fit inside the image")

    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    group_ids = np.arange(n) // max(group_size, 1)
    num_groups = int(group_ids.max()) + 1 if n else 0
    offsets = rng.integers(-jitter, jitter + 1, size=(num_groups, 2))
    centre = (side - 1) / 2.0

    images = np.empty((n, side * side))
    masks = np.zeros((n, side * side), dtype=bool)
    boxes = np.zeros((n, 4), dtype=np.int64)
    scales = rng.uniform(1 - size_jitter, 1 + size_jitter, size=n)
    gains = rng.uniform(1 - intensity_jitter, 1 + intensity_jitter, size=n)
    big_ry, big_rx = (r * (1 + size_jitter) for r in radii[int(np.argmax(areas))])
    for i in range(n):
        cy, cx = centre + offsets[group_ids[i]]
        ry, rx = (r * scales[i] for r in radii[labels[i]])
        mask = _ellipse_mask(side, cy, cx, ry, rx)
        img = np.where(mask, foreground * gains[i], background)
        if noise_sigma > 0:
            img = img + rng.normal(0.0, noise_sigma, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0).ravel()
        masks[i] = mask.ravel()
        boxes[i] = _bbox(_ellipse_mask(side, cy, cx, big_ry, big_rx))
    meta = {
        "generator": "ellipse_images",
        "parameters": {"n": n, "side": side, "class_radii": [list(r) for r in radii],
                       "noise_sigma": noise_sigma, "group_size": group_size,
                       "jitter": jitter, "foreground": foreground, "background": background,
                       "size_jitter": size_jitter, "intensity_jitter": intensity_jitter},
        "seed": seed,
        "num_classes": 2,
        "masks": masks,
        "region_bbox": boxes,
    }
    return LabeledDataset(images, (side, side), labels, group_ids, meta)


def bbox_mask(shape: tuple[int, int], bbox: Sequence[int]) -> np.ndarray:
    r0, c0, r1, c1 = (int(v) for v in bbox)
    m = np.zeros(shape, dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


# --------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    group_aware: bool = True

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ValueError("need three positive fractions")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("fractions must sum to 1")


def _allocate(total: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``total`` items."""
    raw = [f * total for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def split(dataset, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint, covering (train, val, test) index arrays.

    With ``group_aware`` whole groups go to one partition.
    """
    n = len(dataset.labels)
    rng = np.random.default_rng(spec.seed)
    if spec.group_aware:
        groups = np.unique(dataset.group_ids)
        if len(groups) < 3:
            raise SplitError(f"group-aware split needs at least 3 groups, got {len(groups)}")
        groups = groups[rng.permutation(len(groups))]
        counts = _allocate(len(groups), spec.fractions)
        bounds = np.cumsum([0] + counts)
        parts = []
        for a, b in zip(bounds[:-1], bounds[1:]):
            chosen = np.isin(dataset.group_ids, groups[a:b])
            parts.append(np.flatnonzero(chosen))
        return tuple(parts)
    if n < 3:
        raise SplitError("need at least 3 instances")
    perm = rng.permutation(n)
    counts = _allocate(n, spec.fractions)
    bounds = np.cumsum([0] + counts)
    return tuple(np.sort(perm[a:b]) for a, b in zip(bounds[:-1], bounds[1:]))


def group_folds(group_ids: np.ndarray, folds: int, seed: int) -> list[np.ndarray]:
    """Partition instance indices into ``folds`` group-disjoint folds."""
    groups = np.unique(group_ids)
    if len(groups) < folds:
        raise SplitError(f"cannot form {folds} folds from {len(groups)} groups")
    groups = groups[np.random.default_rng(seed).permutation(len(groups))]
    counts = _allocate(len(groups), [1.0 / folds] * folds)
    bounds = np.cumsum([0] + counts)
    return [np.flatnonzero(np.isin(group_ids, groups[a:b]))
            for a, b in zip(bounds[:-1], bounds[1:])]


# --------------------------------------------------------------------------
# image I/O


def quantize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write a 2-D image with values in [0, 1] as 8-bit binary PGM (P5)."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    pixels = img if img.dtype == np.uint8 else quantize(img)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(path: str | Path, raw: bool = False) -> np.ndarray:
    """Read an 8-bit P5 PGM; returns floats in [0, 1] unless ``raw``."""
    data = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise ValueError(f"{path}: truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = fields
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    pos += 1  # single whitespace byte after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return pixels.copy() if raw else pixels / 255.0


def write_png(path: str | Path, image: np.ndarray) -> None:
    from PIL import Image

    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = quantize(img)
    Image.fromarray(img).save(path)


# --------------------------------------------------------------------------
# dataset persistence


def save_dataset(dataset: LabeledDataset, directory: str | Path) -> None:
    """Images as PGM files plus a JSON manifest.

    Pixels are quantized to 8 bits, so a reload reproduces the quantized
    values rather than the float originals.
    """
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    meta = dict(dataset.metadata)
    boxes = meta.pop("region_bbox", None)
    masks = meta.pop("masks", None)
    entries = []
    for i in range(len(dataset)):
        name = f"images/{i:06d}.pgm"
        write_pgm(directory / name, dataset.instances[i].reshape(dataset.shape))
        entry = {"file": name, "label": int(dataset.labels[i]),
                 "group_id": int(dataset.group_ids[i])}
        if boxes is not None:
            entry["region_bbox"] = [int(v) for v in boxes[i]]
        if masks is not None:
            entry["mask_bbox"] = list(_bbox(np.asarray(masks[i]).reshape(dataset.shape)))
        entries.append(entry)
    if masks is not None:
        np.save(directory / "masks.npy", np.asarray(masks), allow_pickle=False)
    manifest = {
        "generator": meta.pop("generator", None),
        "parameters": meta.pop("parameters", {}),
        "seed": meta.pop("seed", None),
        "shape": list(dataset.shape),
        "num_classes": dataset.num_classes,
        "instances": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_dataset(directory: str | Path) -> LabeledDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    entries = manifest["instances"]
    shape = tuple(manifest["shape"])
    images = np.empty((len(entries), shape[0] * shape[1]))
    for i, e in enumerate(entries):
        images[i] = read_pgm(directory / e["file"]).ravel()
    meta = {"generator": manifest.get("generator"), "parameters": manifest.get("parameters", {}),
            "seed": manifest.get("seed"), "num_classes": manifest["num_classes"]}
    if entries and "region_bbox" in entries[0]:
        meta["region_bbox"] = np.array([e["region_bbox"] for e in entries], dtype=np.int64)
    if (directory / "masks.npy").exists():
        meta["masks"] = np.load(directory / "masks.npy", allow_pickle=False)
    return LabeledDataset(images, shape, [e["label"] for e in entries],
                          [e["group_id"] for e in entries], meta)

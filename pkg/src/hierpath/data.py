"""Synthetic hierarchical-image generation and the on-disk dataset format.

Each class level controls one visual factor: level 1 the background color,
level 2 a global shape, level 3 a texture patch drawn inside the shape, and
level 4 a corner marker.  A child's detail is drawn inside its parent's
region, so coarse labels are visible globally and fine labels in a detail.
In multi-label mode an image carries up to three paths, each rendered into
its own sub-region.

On disk a dataset is a directory with ``tree.tree``, an ``images/`` folder of
PNGs, and one TSV manifest per split (``manifest-<split>.tsv``) with lines
``sample_id<TAB>image_path<TAB>path1|path2``, where paths join class names
with ``/``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .tree import ClassTree, enumerate_paths, load_tree

MAX_FACTOR_LEVELS = 4
SPLITS = ("train", "val", "test")

_BG_COLORS = np.array([
    (0.55, 0.15, 0.15), (0.15, 0.50, 0.15), (0.15, 0.20, 0.55),
    (0.55, 0.45, 0.10), (0.45, 0.15, 0.50), (0.10, 0.45, 0.50),
    (0.35, 0.35, 0.35), (0.55, 0.30, 0.15),
])
_MARKER_COLORS = np.array([
    (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.2, 1.0), (1.0, 1.0, 0.0),
    (1.0, 0.0, 1.0), (0.0, 1.0, 1.0), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0),
])


@dataclass(frozen=True)
class SyntheticRecipe:
    tree: ClassTree
    image_size: int = 32
    noise_sigma: float = 0.05
    seed: int = 0


@dataclass
class ManifestRecord:
    sample_id: str
    image_path: str
    paths: list


@dataclass
class DatasetManifest:
    split: str
    records: list = field(default_factory=list)


# -- rendering ---------------------------------------------------------------


def _shape_mask(kind: int, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    rx, ry = w * 0.35, h * 0.35
    nx, ny = (xx - cx) / rx, (yy - cy) / ry
    kind %= 8
    if kind == 0:  # square
        return (np.abs(nx) <= 1) & (np.abs(ny) <= 1)
    if kind == 1:  # circle
        return nx ** 2 + ny ** 2 <= 1
    if kind == 2:  # triangle
        return (ny <= 1) & (ny >= 2 * np.abs(nx) - 1)
    if kind == 3:  # diamond
        return np.abs(nx) + np.abs(ny) <= 1
    if kind == 4:  # cross
        return (np.abs(nx) <= 0.4) | (np.abs(ny) <= 0.4)
    if kind == 5:  # ring
        r2 = nx ** 2 + ny ** 2
        return (r2 <= 1) & (r2 >= 0.30)
    if kind == 6:  # horizontal bar
        return np.abs(ny) <= 0.4
    return np.abs(nx) <= 0.4  # vertical bar


def _texture(kind: int, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    kind %= 8
    if kind == 0:
        return yy % 2 == 0  # horizontal stripes
    if kind == 1:
        return xx % 2 == 0  # vertical stripes
    if kind == 2:
        return (xx + yy) % 2 == 0  # checker
    if kind == 3:
        return (xx + yy) % 3 == 0  # diagonal stripes
    if kind == 4:
        return (xx % 3 == 1) & (yy % 3 == 1)  # dots
    if kind == 5:
        return np.ones((h, w), dtype=bool)  # solid
    if kind == 6:
        return (xx == 0) | (yy == 0) | (xx == w - 1) | (yy == h - 1)  # border
    return (xx - yy) % 3 == 0  # other diagonal


def _sibling_index(tree: ClassTree, node: int) -> int:
    parent = tree.nodes[node].parent
    return tree.children(parent).index(node)


def render_path(canvas: np.ndarray, region, tree: ClassTree, path):
    """Draw one path's visual factors into ``canvas[:, y0:y1, x0:x1]``."""
    x0, y0, x1, y1 = region
    w, h = x1 - x0, y1 - y0
    view = canvas[:, y0:y1, x0:x1]
    indices = [_sibling_index(tree, v) for v in path]

    view[:] = _BG_COLORS[indices[0] % len(_BG_COLORS)].reshape(3, 1, 1)
    if len(indices) >= 2:
        mask = _shape_mask(indices[1], w, h)
        view[:, mask] = 0.85
    if len(indices) >= 3:
        pw, ph = max(3, int(w * 0.4)), max(3, int(h * 0.4))
        px, py = (w - pw) // 2, (h - ph) // 2
        tex = _texture(indices[2], pw, ph)
        patch = view[:, py:py + ph, px:px + pw]
        patch[:, tex] = 0.05
    if len(indices) >= 4:
        mw, mh = max(2, int(w * 0.2)), max(2, int(h * 0.2))
        color = _MARKER_COLORS[indices[3] % len(_MARKER_COLORS)]
        view[:, 0:mh, 0:mw] = color.reshape(3, 1, 1)


def _regions(size: int, count: int):
    if count <= 1:
        return [(0, 0, size, size)]
    half = size // 2
    if count == 2:
        return [(0, 0, half, size), (half, 0, size, size)]
    return [(0, 0, half, size), (half, 0, size, 0 + half), (half, half, size, size)]


def render_sample(recipe: SyntheticRecipe, paths, sample_rng) -> np.ndarray:
    canvas = np.zeros((3, recipe.image_size, recipe.image_size))
    for region, path in zip(_regions(recipe.image_size, len(paths)), paths):
        render_path(canvas, region, recipe.tree, path)
    if recipe.noise_sigma > 0:
        canvas = canvas + sample_rng.normal(0.0, recipe.noise_sigma, canvas.shape)
    return np.clip(canvas, 0.0, 1.0)


# -- generation --------------------------------------------------------------


def generate(recipe: SyntheticRecipe, out_dir, n_per_leaf: int,
             multilabel: bool = False) -> dict:
    """Write a synthetic dataset and return per-split manifests.

    Deterministic from the recipe seed; samples are split 70/15/15 into
    train/val/test by a seeded shuffle.
    """
    tree = recipe.tree
    if tree.max_path_length() > MAX_FACTOR_LEVELS:
        raise ConfigError(
            f"tree depth {tree.max_path_length()} exceeds the "
            f"{MAX_FACTOR_LEVELS} available visual factor slots")
    leaf_paths = enumerate_paths(tree, leaves_only=True)
    all_paths = enumerate_paths(tree, leaves_only=False)
    total = n_per_leaf * len(leaf_paths)

    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    with open(os.path.join(out_dir, "tree.tree"), "w", encoding="utf-8") as fh:
        fh.write(tree.serialize())

    records = []
    for idx in range(total):
        sample_rng = np.random.default_rng([recipe.seed, idx])
        if multilabel:
            k = int(sample_rng.integers(1, 4))
            # keep the chosen paths prefix-free so threshold selection, which
            # returns only maximal paths, can reproduce the ground truth
            paths = []
            for i in sample_rng.permutation(len(all_paths)):
                cand = all_paths[i]
                if any(cand[:len(p)] == p or p[:len(cand)] == cand for p in paths):
                    continue
                paths.append(cand)
                if len(paths) == k:
                    break
            paths.sort()
        else:
            paths = [leaf_paths[idx % len(leaf_paths)]]
        image = render_sample(recipe, paths, sample_rng)
        sample_id = f"s{idx:06d}"
        rel = os.path.join("images", f"{sample_id}.png")
        _write_png(os.path.join(out_dir, rel), image)
        records.append(ManifestRecord(sample_id, rel, paths))

    split_rng = np.random.default_rng([recipe.seed, 0xC0FFEE])
    order = split_rng.permutation(total)
    n_train = int(total * 0.70)
    n_val = int(total * 0.15)
    assignment = {}
    for rank, idx in enumerate(order):
        if rank < n_train:
            assignment[idx] = "train"
        elif rank < n_train + n_val:
            assignment[idx] = "val"
        else:
            assignment[idx] = "test"

    manifests = {split: DatasetManifest(split) for split in SPLITS}
    for idx, record in enumerate(records):
        manifests[assignment[idx]].records.append(record)
    for split, manifest in manifests.items():
        _write_manifest(os.path.join(out_dir, f"manifest-{split}.tsv"), tree, manifest)
    return manifests


def _write_png(path, image: np.ndarray):
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def _write_manifest(path, tree: ClassTree, manifest: DatasetManifest):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest.records:
            names = "|".join(tree.path_names(p) for p in rec.paths)
            fh.write(f"{rec.sample_id}\t{rec.image_path}\t{names}\n")


# -- loading -----------------------------------------------------------------


@dataclass(frozen=True)
class LoadOptions:
    """Augmentation settings; the defaults leave synthetic images untouched."""

    crop: int | None = None
    resize_min: int | None = None
    resize_max: int | None = None
    flip: bool = False
    train: bool = False
    seed: int = 0


def read_manifest(directory, split: str, tree: ClassTree) -> DatasetManifest:
    path = os.path.join(directory, f"manifest-{split}.tsv")
    if not os.path.exists(path):
        raise DataError(f"missing manifest {path}")
    manifest = DatasetManifest(split)
    seen = set()
    problems = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                problems.append(f"line {lineno}: expected 3 tab-separated fields")
                continue
            sample_id, rel, names = parts
            if sample_id in seen:
                problems.append(f"line {lineno}: duplicate sample id {sample_id}")
                continue
            seen.add(sample_id)
            if not os.path.exists(os.path.join(directory, rel)):
                problems.append(f"line {lineno}: missing image {rel}")
                continue
            try:
                paths = [tree.path_from_names(n) for n in names.split("|")]
            except Exception as exc:
                problems.append(f"line {lineno}: {exc}")
                continue
            manifest.records.append(ManifestRecord(sample_id, rel, paths))
    if problems:
        raise DataError("invalid manifest:\n  " + "\n  ".join(problems))
    return manifest


def load(directory, split: str = "train", options: LoadOptions | None = None):
    """Yield (image tensor data, label paths, sample id) for one split."""
    options = options or LoadOptions()
    tree = load_tree(os.path.join(directory, "tree.tree"))
    manifest = read_manifest(directory, split, tree)
    rng = np.random.default_rng(options.seed)
    samples = []
    for rec in manifest.records:
        img = Image.open(os.path.join(directory, rec.image_path)).convert("RGB")
        if options.resize_min:
            hi = options.resize_max or options.resize_min
            short = int(rng.integers(options.resize_min, hi + 1)) if options.train \
                else (options.resize_min + hi) // 2
            scale = short / min(img.size)
            img = img.resize((round(img.width * scale), round(img.height * scale)))
        arr = np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0
        if options.crop:
            arr = _crop(arr, options.crop, rng, random=options.train)
        if options.flip and options.train and rng.random() < 0.5:
            arr = arr[:, :, ::-1].copy()
        samples.append((arr, rec.paths, rec.sample_id))
    return tree, samples


def _crop(arr: np.ndarray, size: int, rng, random: bool) -> np.ndarray:
    _, h, w = arr.shape
    if h < size or w < size:
        raise DataError(f"image {w}x{h} smaller than crop size {size}")
    if random:
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
    else:
        y, x = (h - size) // 2, (w - size) // 2
    return arr[:, y:y + size, x:x + size]

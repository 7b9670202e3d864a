"""Synthetic scenes, the text point-cloud format, block splitting and metrics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .exceptions import InvalidArgument, ParseError
from .geom import PointCloud

# one RGB triple per class id, cycled for larger inventories
PALETTE = np.array([
    [0.55, 0.55, 0.55],
    [0.85, 0.25, 0.20],
    [0.20, 0.60, 0.85],
    [0.30, 0.75, 0.30],
    [0.90, 0.75, 0.20],
    [0.60, 0.35, 0.75],
    [0.95, 0.55, 0.75],
    [0.35, 0.25, 0.15],
])


@dataclass
class Primitive:
    """A labeled surface.

    ``kind`` is ``"plane"`` (horizontal rectangle, ``size = (sx, sy, _)``),
    ``"box"`` (axis-aligned, ``size`` = edge lengths) or ``"sphere"``
    (``size[0]`` = radius).  ``center`` is the geometric center.
    """

    kind: str
    class_id: int
    center: Sequence[float]
    size: Sequence[float]

    def area(self) -> float:
        sx, sy, sz = self.size
        if self.kind == "plane":
            return sx * sy
        if self.kind == "box":
            return 2.0 * (sx * sy + sy * sz + sz * sx)
        if self.kind == "sphere":
            return 4.0 * math.pi * sx * sx
        raise InvalidArgument(f"unknown primitive kind {self.kind!r}")

    def sample(self, rng, n: int) -> np.ndarray:
        c = np.asarray(self.center, float)
        sx, sy, sz = self.size
        if self.kind == "plane":
            u = rng.uniform(-0.5, 0.5, size=(n, 2)) * (sx, sy)
            return c + np.column_stack([u, np.zeros(n)])
        if self.kind == "sphere":
            v = rng.normal(size=(n, 3))
            return c + sx * v / np.linalg.norm(v, axis=1, keepdims=True)
        # box: pick a face by area, then a uniform point on it
        dims = np.array([sx, sy, sz], float)
        face_area = np.array([sy * sz, sx * sz, sx * sy])
        axis = rng.choice(3, size=n, p=face_area / face_area.sum())
        side = rng.integers(0, 2, size=n) * 2 - 1
        pts = rng.uniform(-0.5, 0.5, size=(n, 3)) * dims
        pts[np.arange(n), axis] = side * dims[axis] / 2
        return c + pts


@dataclass
class SceneSpec:
    seed: int
    n_points: int
    extent: float
    primitives: List[Primitive] = field(default_factory=list)
    noise: float = 0.005

    def __post_init__(self):
        if self.n_points < 1:
            raise InvalidArgument("n_points must be >= 1")
        if not self.extent > 0:
            raise InvalidArgument("extent must be positive")
        if len({p.class_id for p in self.primitives}) < 2:
            raise InvalidArgument("a scene needs at least two classes")

    @property
    def num_classes(self) -> int:
        return max(p.class_id for p in self.primitives) + 1


def default_scene_spec(seed: int = 0, n_points: int = 2048, extent: float = 4.0,
                       num_classes: int = 4, noise: float = 0.005) -> SceneSpec:
    """A floor (class 0) with boxes and spheres for the other classes."""
    if num_classes < 2:
        raise InvalidArgument("need at least two classes")
    rng = np.random.default_rng([seed, 0xC0FFEE])
    prims = [Primitive("plane", 0, (extent / 2, extent / 2, 0.0), (extent, extent, 0.0))]
    for cls in range(1, num_classes):
        cx, cy = rng.uniform(0.2 * extent, 0.8 * extent, size=2)
        if cls % 2:
            dims = rng.uniform(0.3, 0.8, size=3) * extent / 4
            prims.append(Primitive("box", cls, (cx, cy, dims[2] / 2), tuple(dims)))
        else:
            r = rng.uniform(0.15, 0.3) * extent / 4 * 2
            prims.append(Primitive("sphere", cls, (cx, cy, r + 0.05), (r, 0.0, 0.0)))
    return SceneSpec(seed, n_points, extent, prims, noise)


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Sample points on the primitives proportionally to their areas.

    Features are xyz followed by the generating primitive's class color.
    """
    rng = np.random.default_rng(spec.seed)
    areas = np.array([p.area() for p in spec.primitives])
    which = rng.choice(len(areas), size=spec.n_points, p=areas / areas.sum())
    pos = np.empty((spec.n_points, 3))
    for k, prim in enumerate(spec.primitives):
        rows = np.flatnonzero(which == k)
        pos[rows] = prim.sample(rng, len(rows))
    pos += rng.normal(scale=spec.noise, size=pos.shape)
    labels = np.array([spec.primitives[k].class_id for k in which], dtype=np.int64)
    colors = PALETTE[labels % len(PALETTE)]
    return PointCloud(pos, np.concatenate([pos, colors], axis=1), labels, spec.num_classes)


# --- text format -----------------------------------------------------------

def save_cloud(cloud: PointCloud, path):
    """Header ``N C num_classes`` then ``x y z f1 .. fC label`` per point.

    Clouds without labels are written with ``num_classes = 0`` and no label
    column.
    """
    labeled = cloud.labels is not None
    ncls = cloud.num_classes if labeled else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(cloud)} {cloud.n_channels} {ncls}\n")
        for i in range(len(cloud)):
            vals = [repr(float(v)) for v in cloud.positions[i]]
            vals += [repr(float(v)) for v in cloud.features[i]]
            if labeled:
                vals.append(str(int(cloud.labels[i])))
            fh.write(" ".join(vals) + "\n")


def load_cloud(path) -> PointCloud:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file", line=1)
    try:
        n, c, ncls = (int(tok) for tok in lines[0].split())
    except ValueError:
        raise ParseError("header must be 'N C num_classes'", line=1) from None
    if n < 1 or c < 0 or ncls < 0:
        raise ParseError("header counts out of range", line=1)
    width = 3 + c + (1 if ncls else 0)
    pos = np.empty((n, 3))
    feats = np.empty((n, c))
    labels = np.empty(n, dtype=np.int64) if ncls else None
    for i in range(n):
        lineno = i + 2
        if i + 1 >= len(lines):
            raise ParseError(f"expected {n} data lines, found {len(lines) - 1}", line=lineno)
        toks = lines[i + 1].split()
        if len(toks) != width:
            raise ParseError(f"expected {width} fields, found {len(toks)}", line=lineno)
        try:
            vals = [float(t) for t in toks[:3 + c]]
            if ncls:
                lab = int(toks[-1])
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite value", line=lineno)
        pos[i] = vals[:3]
        feats[i] = vals[3:]
        if ncls:
            if not 0 <= lab < ncls:
                raise ParseError(f"label {lab} outside [0, {ncls})", line=lineno)
            labels[i] = lab
    extra = [k for k in range(n + 1, len(lines)) if lines[k].strip()]
    if extra:
        raise ParseError(f"more data lines than the header's {n}", line=extra[0] + 1)
    return PointCloud(pos, feats, labels, ncls or None)


# --- block splitting -------------------------------------------------------

def block_split(cloud: PointCloud, block_size: float, n_sample: Optional[int], seed: int,
                min_points: int = 10) -> List[PointCloud]:
    """Cut the xy-plane into square blocks and sample ``n_sample`` points in each.

    Blocks with at least ``n_sample`` points are sampled without replacement;
    smaller ones keep all their points and are topped up by sampling with
    replacement.  Block positions are relative to the block's minimum corner
    and the features are ``[relative xyz, original features]``.  Each block's
    ``index`` maps its rows back to ``cloud``.
    """
    if not block_size > 0:
        raise InvalidArgument("block_size must be positive")
    rng = np.random.default_rng(seed)
    cells = np.floor(cloud.positions[:, :2] / block_size).astype(np.int64)
    keys, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    blocks = []
    for b, key in enumerate(keys):
        members = np.flatnonzero(inverse == b)
        if len(members) < min_points:
            continue
        if n_sample is None:
            chosen = members
        elif len(members) >= n_sample:
            chosen = np.sort(rng.choice(members, n_sample, replace=False))
        else:
            extra = rng.choice(members, n_sample - len(members), replace=True)
            chosen = np.sort(np.concatenate([members, extra]))
        sub = cloud.take(chosen)
        corner = np.array([key[0] * block_size, key[1] * block_size,
                           cloud.positions[members, 2].min()])
        rel = sub.positions - corner
        blocks.append(PointCloud(rel, np.concatenate([rel, sub.features], axis=1),
                                 sub.labels, cloud.num_classes, sub.index))
    return blocks


# --- metrics ---------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    num_classes: int
    counts: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


def accumulate_metrics(cm: ConfusionMatrix, preds, labels) -> ConfusionMatrix:
    """Add (label, prediction) pairs; rows are ground truth."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise InvalidArgument("predictions and labels differ in length")
    k = cm.num_classes
    if len(preds) and (min(preds.min(), labels.min()) < 0 or max(preds.max(), labels.max()) >= k):
        raise InvalidArgument(f"class ids must lie in [0, {k})")
    add = np.bincount(labels * k + preds, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(k, cm.counts + add)


def finalize_metrics(cm: ConfusionMatrix) -> dict:
    """OA, mAcc and mIoU, plus per-class IoU (``None`` for classes never seen)."""
    c = cm.counts.astype(float)
    total = c.sum()
    tp = np.diag(c)
    gt = c.sum(axis=1)
    pred = c.sum(axis=0)
    oa = tp.sum() / total if total else 0.0
    has_gt = gt > 0
    macc = float((tp[has_gt] / gt[has_gt]).mean()) if has_gt.any() else 0.0
    union = gt + pred - tp
    present = union > 0
    iou = np.where(present, tp / np.where(present, union, 1.0), np.nan)
    miou = float(iou[present].mean()) if present.any() else 0.0
    per_class = [None if not ok else float(v) for v, ok in zip(iou, present)]
    return {"oa": float(oa), "macc": macc, "miou": miou, "per_class_iou": per_class}


def metrics_line(metrics: dict) -> str:
    return json.dumps({k: metrics[k] for k in ("oa", "macc", "miou", "per_class_iou")})

"""Encoder-decoder segmentation network built from four cascaded non-local modules.

Parameters live in a flat, insertion-ordered ``dict`` of name -> ndarray so
the optimizer, checkpointing and gradient checks can all iterate them the
same way.  Geometry (canonical order, FPS, kNN, superpoints and decoder
interpolation weights) does not depend on parameters and is computed once
per cloud by :func:`build_geometry`.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import geom, nlops
from .exceptions import InvalidArgument, ParseError
from .geom import PointCloud
from .nlops import CascadeParams

STAGES = 4


@dataclass
class NetworkConfig:
    stage_M: Sequence[int] = (1024, 256, 64, 16)
    stage_K: Sequence[int] = (32, 32, 16, 8)
    stage_D: Sequence[int] = (32, 64, 128, 256)
    stage_Dplus: Sequence[int] = (64, 128, 256, 512)
    dec_widths: Optional[Sequence[int]] = None
    K_sp: int = 20
    N_sp_cap: int = 32
    cell_size: float = 1.0
    num_classes: int = 13
    in_channels: int = 9
    use_relpos: bool = True
    # "1", "12", "123", or "full" for the all-pairs neighborhood baseline
    levels: str = "123"
    class_weighting: bool = False

    def __post_init__(self):
        for name in ("stage_M", "stage_K", "stage_D", "stage_Dplus"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.dec_widths is None:
            dp = self.stage_Dplus
            self.dec_widths = (dp[2], dp[1], dp[0], dp[0])
        self.dec_widths = tuple(int(v) for v in self.dec_widths)
        self.levels = str(self.levels)
        self.validate()

    @property
    def full_nonlocal(self) -> bool:
        return self.levels == "full"

    @property
    def level_set(self) -> frozenset:
        return frozenset({1}) if self.full_nonlocal else nlops.parse_levels(self.levels)

    def validate(self):
        for name in ("stage_M", "stage_K", "stage_D", "stage_Dplus", "dec_widths"):
            v = getattr(self, name)
            if len(v) != STAGES:
                raise InvalidArgument(f"{name} needs {STAGES} entries, got {len(v)}")
            if min(v) < 1:
                raise InvalidArgument(f"{name} entries must be >= 1")
        if any(a <= b for a, b in zip(self.stage_M, self.stage_M[1:])):
            raise InvalidArgument(f"stage_M must be strictly decreasing, got {self.stage_M}")
        for s in range(1, STAGES):
            if self.stage_K[s] > self.stage_M[s - 1]:
                raise InvalidArgument(f"stage_K[{s}] exceeds the {self.stage_M[s - 1]} points it searches")
        if self.K_sp < 1 or self.N_sp_cap < 1 or self.num_classes < 1 or self.in_channels < 1:
            raise InvalidArgument("K_sp, N_sp_cap, num_classes and in_channels must be >= 1")
        if not self.cell_size > 0:
            raise InvalidArgument("cell_size must be positive")
        if not self.full_nonlocal:
            nlops.parse_levels(self.levels)


@dataclass
class TrainConfig:
    base_lr: float = 0.05
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 0.0001
    decay_factor: float = 0.1
    decay_every: int = 25
    total_epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.base_lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise InvalidArgument("lr, momentum and weight decay must be non-negative")
        if self.batch_size < 1 or self.decay_every < 1 or self.total_epochs < 0:
            raise InvalidArgument("batch_size and decay_every must be >= 1")
        if not 0 < self.decay_factor <= 1:
            raise InvalidArgument("decay_factor must lie in (0, 1]")


# --- parameters ------------------------------------------------------------

def param_shapes(config: NetworkConfig) -> dict:
    """Name -> shape for every tensor, in canonical order."""
    shapes = {}
    relpos = 3 if config.use_relpos else 0
    c_in = config.in_channels
    for s in range(STAGES):
        c = (c_in if s == 0 else config.stage_Dplus[s - 1]) + relpos
        d, dp = config.stage_D[s], config.stage_Dplus[s]
        for lvl, fan_in in (("level1", c), ("level2", d), ("level3", d)):
            shapes[f"enc{s}.{lvl}.W_theta"] = (fan_in, d)
            shapes[f"enc{s}.{lvl}.W_phi"] = (fan_in, d)
        shapes[f"enc{s}.W_gamma"] = (3 * d, dp)
        shapes[f"enc{s}.b_gamma"] = (dp,)
    coarse = config.stage_Dplus[-1]
    for t in range(STAGES):
        fine = STAGES - 1 - t
        skip = c_in if fine == 0 else config.stage_Dplus[fine - 1]
        out = config.dec_widths[t]
        shapes[f"dec{t}.W"] = (coarse + skip, out)
        shapes[f"dec{t}.b"] = (out,)
        coarse = out
    shapes["cls.W"] = (coarse, config.num_classes)
    shapes["cls.b"] = (config.num_classes,)
    return shapes


def init_params(config: NetworkConfig, seed: int) -> dict:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def check_params(params: dict, config: NetworkConfig):
    expected = param_shapes(config)
    if list(params) != list(expected):
        missing = set(expected) ^ set(params)
        raise InvalidArgument(f"parameter names do not match the config: {sorted(missing)[:5]}")
    for name, shape in expected.items():
        if params[name].shape != tuple(shape):
            raise InvalidArgument(f"{name}: shape {params[name].shape} != expected {tuple(shape)}")


def stage_params(params: dict, s: int) -> CascadeParams:
    return CascadeParams.from_tensors(params, prefix=f"enc{s}.")


# --- geometry --------------------------------------------------------------

@dataclass
class StageGeometry:
    idx: np.ndarray          # centroid rows in the previous stage's point set
    positions: np.ndarray
    table: np.ndarray        # kNN rows in the previous stage's point set
    centroid_sp: np.ndarray
    sp_samples: np.ndarray


@dataclass
class Interpolation:
    idx: np.ndarray
    weights: np.ndarray


@dataclass
class Geometry:
    perm: np.ndarray
    positions: np.ndarray    # canonically ordered input positions
    partition: geom.SuperpointPartition
    stages: List[StageGeometry] = field(default_factory=list)
    interp: List[Interpolation] = field(default_factory=list)


def interpolation_weights(fine_pts, coarse_pts) -> Interpolation:
    """Inverse-square-distance weights over the (up to) 3 nearest coarse points.

    A fine point closer than 1e-9 to a coarse point copies that point exactly.
    """
    k = min(3, len(coarse_pts))
    idx = geom.knn(coarse_pts, fine_pts, k)
    d2 = ((coarse_pts[idx] - fine_pts[:, None, :]) ** 2).sum(-1)
    inv = 1.0 / (d2 + 1e-8)
    w = inv / nlops._seq_sum(inv, axis=1)[:, None]
    exact = d2 < 1e-18
    hit = exact.any(axis=1)
    if hit.any():
        first = np.argmax(exact[hit], axis=1)
        w[hit] = 0.0
        w[np.flatnonzero(hit), first] = 1.0
    return Interpolation(idx, w)


def build_geometry(cloud: PointCloud, config: NetworkConfig, seed: int = 0) -> Geometry:
    n = len(cloud)
    if n < config.stage_M[0]:
        raise InvalidArgument(f"cloud has {n} points but stage 1 samples {config.stage_M[0]}; "
                              "split it into blocks first")
    if not config.full_nonlocal and config.stage_K[0] > n:
        raise InvalidArgument(f"stage_K[0]={config.stage_K[0]} exceeds the {n} input points")
    perm = geom.canonical_order(cloud)
    pos = cloud.positions[perm]
    partition = geom.voxel_partition(pos, config.cell_size, config.N_sp_cap)
    g = Geometry(perm, pos, partition)

    level_pos = [pos]
    prev_pos, prev_orig = pos, np.arange(n)
    for s in range(STAGES):
        cs = geom.farthest_point_sample(prev_pos, config.stage_M[s])
        k = len(prev_pos) if config.full_nonlocal else config.stage_K[s]
        table = geom.knn(prev_pos, cs, k)
        orig = prev_orig[cs.indices]
        csp = partition.assignment[orig]
        samples = geom.sample_superpoint_peers(csp, config.K_sp, [seed, s])
        g.stages.append(StageGeometry(cs.indices, cs.positions, table, csp, samples))
        level_pos.append(cs.positions)
        prev_pos, prev_orig = cs.positions, orig
    for t in range(STAGES):
        g.interp.append(interpolation_weights(level_pos[STAGES - 1 - t], level_pos[STAGES - t]))
    return g


# --- decoder block ---------------------------------------------------------

def feature_propagation(interp: Interpolation, coarse_feats, skip_feats, W, b):
    """Interpolate coarse features onto fine points, append the skip, affine + relu."""
    acc = interp.weights[:, 0, None] * coarse_feats[interp.idx[:, 0]]
    for k in range(1, interp.idx.shape[1]):
        acc += interp.weights[:, k, None] * coarse_feats[interp.idx[:, k]]
    cat = np.concatenate([acc, skip_feats], axis=1)
    pre = cat @ W + b
    return np.maximum(pre, 0.0), {"interp": interp, "cat": cat, "pre": pre, "W": W,
                                  "n_coarse": len(coarse_feats), "c": coarse_feats.shape[1]}


def feature_propagation_backward(cache, dout):
    dpre = dout * (cache["pre"] > 0)
    dW = cache["cat"].T @ dpre
    db = nlops._seq_sum(dpre, axis=0)
    dcat = dpre @ cache["W"].T
    c = cache["c"]
    dinterp, dskip = dcat[:, :c], dcat[:, c:]
    interp = cache["interp"]
    dcoarse = np.zeros((cache["n_coarse"], c))
    for k in range(interp.idx.shape[1]):
        np.add.at(dcoarse, interp.idx[:, k], interp.weights[:, k, None] * dinterp)
    return dcoarse, dskip, dW, db


# --- whole network ---------------------------------------------------------

def encoder_forward(cloud: PointCloud, config: NetworkConfig, params: dict,
                    geometry: Optional[Geometry] = None):
    """Run the four cascaded modules.

    Returns ``(stage_features, geometry, tapes)`` where ``stage_features[0]``
    is the canonically ordered input and ``stage_features[s + 1]`` the fused
    output of module ``s``.
    """
    if cloud.n_channels != config.in_channels:
        raise InvalidArgument(f"cloud has {cloud.n_channels} channels, config expects {config.in_channels}")
    if geometry is None:
        geometry = build_geometry(cloud, config)
    feats = [cloud.features[geometry.perm]]
    positions = [geometry.positions]
    tapes = []
    for s, sg in enumerate(geometry.stages):
        lf, tape = nlops.cascaded_forward(
            feats[-1], positions[-1], sg.idx, sg.table, sg.sp_samples, sg.centroid_sp,
            stage_params(params, s), config.level_set, config.use_relpos)
        feats.append(lf.fused)
        positions.append(sg.positions)
        tapes.append(tape)
    return feats, geometry, tapes


def network_forward(cloud: PointCloud, config: NetworkConfig, params: dict,
                    geometry: Optional[Geometry] = None):
    """Per-point logits in the cloud's own order, plus the tape for backward."""
    feats, geometry, enc_tapes = encoder_forward(cloud, config, params, geometry)
    cur = feats[-1]
    dec_caches = []
    for t in range(STAGES):
        cur, cache = feature_propagation(geometry.interp[t], cur, feats[STAGES - 1 - t],
                                         params[f"dec{t}.W"], params[f"dec{t}.b"])
        dec_caches.append(cache)
    logits_c = cur @ params["cls.W"] + params["cls.b"]
    logits = np.empty_like(logits_c)
    logits[geometry.perm] = logits_c
    tape = {"enc": enc_tapes, "dec": dec_caches, "head": cur, "geometry": geometry,
            "params": params, "feat_widths": [f.shape for f in feats]}
    return logits, tape


def network_backward(tape: dict, dlogits: np.ndarray):
    """Gradients of every parameter, plus the input-feature gradient (cloud order)."""
    params, geometry = tape["params"], tape["geometry"]
    dlogits = np.asarray(dlogits, float)[geometry.perm]
    grads = {}
    grads["cls.W"] = tape["head"].T @ dlogits
    grads["cls.b"] = nlops._seq_sum(dlogits, axis=0)
    dcur = dlogits @ params["cls.W"].T

    dfeats = [np.zeros(shape) for shape in tape["feat_widths"]]
    for t in reversed(range(STAGES)):
        dcoarse, dskip, grads[f"dec{t}.W"], grads[f"dec{t}.b"] = \
            feature_propagation_backward(tape["dec"][t], dcur)
        dfeats[STAGES - 1 - t] += dskip
        dcur = dcoarse
    dfeats[STAGES] += dcur

    for s in reversed(range(STAGES)):
        g, dprev = nlops.cascaded_backward(tape["enc"][s], dfeats[s + 1])
        for name, arr in g.tensors().items():
            grads[f"enc{s}.{name}"] = arr
        dfeats[s] += dprev

    dinput = np.empty_like(dfeats[0])
    dinput[geometry.perm] = dfeats[0]
    return {name: grads[name] for name in params}, dinput


# --- loss, optimizer, schedule --------------------------------------------

def cross_entropy_loss(logits, labels, class_weights=None):
    """Mean cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, float)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    nll = -logp[np.arange(n), labels]
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    if class_weights is None:
        return float(nll.sum() / n), grad / n
    w = np.asarray(class_weights, float)[labels]
    total = w.sum()
    return float((w * nll).sum() / total), grad * (w / total)[:, None]


def class_weights_for(labels, num_classes: int) -> np.ndarray:
    """Inverse-frequency weights normalized to mean 1 over present classes."""
    counts = np.bincount(labels, minlength=num_classes).astype(float)
    w = np.zeros(num_classes)
    present = counts > 0
    w[present] = 1.0 / counts[present]
    return w * present.sum() / w[present].sum()


def init_optimizer(params: dict) -> dict:
    return {name: np.zeros_like(p) for name, p in params.items()}


def sgd_step(params: dict, grads: dict, state: dict, lr: float, momentum: float,
             weight_decay: float):
    """In-place SGD with momentum and L2 weight decay; returns (params, state)."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state[name].shape != p.shape:
            raise InvalidArgument(f"{name}: gradient/state shape does not match parameter {p.shape}")
        buf = state[name]
        buf *= momentum
        buf += g + weight_decay * p
        p -= lr * buf
    return params, state


def lr_schedule(epoch: int, tc: TrainConfig) -> float:
    """Step decay: base_lr * decay_factor ** (epoch // decay_every)."""
    if epoch < 0:
        raise InvalidArgument("epoch must be >= 0")
    return tc.base_lr * tc.decay_factor ** (epoch // tc.decay_every)


# --- training --------------------------------------------------------------

@dataclass
class Sample:
    cloud: PointCloud
    geometry: Geometry


def prepare_dataset(blocks: Sequence[PointCloud], config: NetworkConfig, seed: int = 0):
    """Attach cached geometry to each block."""
    return [Sample(b, build_geometry(b, config, seed=seed + i)) for i, b in enumerate(blocks)]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def order_digest(order) -> str:
    return hashlib.sha256(np.asarray(order, dtype=np.int64).tobytes()).hexdigest()[:16]


def train_epoch(dataset, config: NetworkConfig, tc: TrainConfig, params: dict, state: dict,
                epoch: int, seed: Optional[int] = None):
    """One pass over ``dataset`` (a list of :class:`Sample`).

    Gradients of a batch are averaged, accumulated in ascending position
    within the batch.  Returns ``(params, state, stats)``.
    """
    if not dataset:
        raise InvalidArgument("dataset is empty")
    seed = tc.seed if seed is None else seed
    lr = lr_schedule(epoch, tc)
    order = epoch_order(len(dataset), seed, epoch)
    losses, correct, seen = [], 0, 0
    for start in range(0, len(order), tc.batch_size):
        batch = order[start:start + tc.batch_size]
        total = None
        for i in batch:
            sample = dataset[i]
            logits, tape = network_forward(sample.cloud, config, params, sample.geometry)
            cw = class_weights_for(sample.cloud.labels, config.num_classes) \
                if config.class_weighting else None
            loss, dlogits = cross_entropy_loss(logits, sample.cloud.labels, cw)
            grads, _ = network_backward(tape, dlogits)
            if total is None:
                total = grads
            else:
                for name in total:
                    total[name] += grads[name]
            losses.append(loss)
            correct += int((logits.argmax(1) == sample.cloud.labels).sum())
            seen += len(sample.cloud)
        for name in total:
            total[name] /= len(batch)
        sgd_step(params, total, state, lr, tc.momentum, tc.weight_decay)
    stats = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses)),
             "oa": correct / seen, "order": order_digest(order)}
    return params, state, stats


def predict(cloud: PointCloud, config: NetworkConfig, params: dict,
            geometry: Optional[Geometry] = None) -> np.ndarray:
    logits, _ = network_forward(cloud, config, params, geometry)
    return logits.argmax(axis=1)


# --- checkpoint format -----------------------------------------------------

CHECKPOINT_MAGIC = b"CNLCKPT1"


def save_checkpoint(path, tensors: dict):
    """Write tensors as little-endian 64-bit records after an 8-byte magic."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            if not raw:
                raise InvalidArgument("tensor names must be non-empty")
            arr = np.asarray(arr, dtype=np.float64)
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8").tobytes(order="C"))
        fh.write(struct.pack("<Q", 0))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: bad checkpoint magic")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ParseError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    out = {}
    while True:
        (nlen,) = struct.unpack("<Q", take(8))
        if nlen == 0:
            break
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(data):
        raise ParseError(f"{path}: trailing bytes after terminator")
    return out

"""Channel-wise non-local operator, its three cascaded levels, and exact gradients.

A *gather* attends from a set of centers to their neighbors::

    H[j] = W_theta^T (f_center - f_j)        # pairwise embedding
    A    = softmax over j, per channel        # channel-wise attention
    out  = sum_j A[j] * (W_phi^T f_j)         # Hadamard-weighted sum

Every forward function returns ``(output, cache)`` and has a matching
``*_backward(cache, grad)``.  Sums over neighbors run sequentially in
ascending neighbor order so results are bit-reproducible; neighbor index
rows are sorted before use so the order of a row never matters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import DegenerateInput, InvalidArgument
from .geom import DEGENERATE, CentroidSet


class InteractionCounter:
    """Counts (center, neighbor) pairs visited by every gather."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0

    def read(self) -> int:
        return self.count

    def add(self, n: int):
        self.count += int(n)


class BufferStats:
    """High-water mark of the scratch bytes held by a single gather call."""

    def __init__(self):
        self.peak = 0
        self.last = 0

    def reset(self):
        self.peak = 0
        self.last = 0

    def observe(self, *arrays):
        self.last = sum(a.nbytes for a in arrays)
        self.peak = max(self.peak, self.last)


interaction_counter = InteractionCounter()
buffer_stats = BufferStats()


@dataclass
class LevelWeights:
    W_theta: np.ndarray
    W_phi: np.ndarray

    def __post_init__(self):
        if self.W_theta.shape != self.W_phi.shape or self.W_theta.ndim != 2:
            raise InvalidArgument(
                f"W_theta {self.W_theta.shape} and W_phi {self.W_phi.shape} must be equal C x D")

    @property
    def in_dim(self) -> int:
        return self.W_theta.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W_theta.shape[1]


@dataclass
class CascadeParams:
    level1: LevelWeights
    level2: LevelWeights
    level3: LevelWeights
    W_gamma: np.ndarray
    b_gamma: np.ndarray

    def __post_init__(self):
        d = self.level1.out_dim
        for lw in (self.level2, self.level3):
            if lw.in_dim != d or lw.out_dim != d:
                raise InvalidArgument("levels 2 and 3 must map D -> D with D the level-1 width")
        if self.W_gamma.shape[0] != 3 * d:
            raise InvalidArgument(f"W_gamma must have {3 * d} rows, got {self.W_gamma.shape[0]}")
        if self.b_gamma.shape != (self.W_gamma.shape[1],):
            raise InvalidArgument("b_gamma must match the W_gamma output width")

    def tensors(self) -> dict:
        """Flat name -> array view, in a fixed order."""
        out = {}
        for lvl in ("level1", "level2", "level3"):
            lw = getattr(self, lvl)
            out[f"{lvl}.W_theta"] = lw.W_theta
            out[f"{lvl}.W_phi"] = lw.W_phi
        out["W_gamma"] = self.W_gamma
        out["b_gamma"] = self.b_gamma
        return out

    @classmethod
    def from_tensors(cls, t: dict, prefix: str = "") -> "CascadeParams":
        lw = [LevelWeights(t[f"{prefix}level{i}.W_theta"], t[f"{prefix}level{i}.W_phi"])
              for i in (1, 2, 3)]
        return cls(*lw, t[f"{prefix}W_gamma"], t[f"{prefix}b_gamma"])


@dataclass
class LevelFeatures:
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    V: Optional[np.ndarray]
    fused: np.ndarray
    sp_ids: Optional[np.ndarray] = None


@dataclass
class Tape:
    """Forward intermediates of one cascaded module, consumed by the backward pass."""

    levels: frozenset
    records: dict = field(default_factory=dict)

    def __setitem__(self, key, value):
        self.records[key] = value

    def __getitem__(self, key):
        return self.records[key]

    def __contains__(self, key):
        return key in self.records


# --- elementary pieces -----------------------------------------------------

def pairwise_embed(f_i, f_j, W_theta) -> np.ndarray:
    """W_theta^T (f_i - f_j)."""
    f_i, f_j = np.asarray(f_i, float), np.asarray(f_j, float)
    if f_i.shape != f_j.shape or f_i.shape != (W_theta.shape[0],):
        raise InvalidArgument(f"dimension mismatch: {f_i.shape}, {f_j.shape}, {W_theta.shape}")
    return (f_i - f_j) @ W_theta


def unary_embed(f_j, W_phi) -> np.ndarray:
    """W_phi^T f_j."""
    f_j = np.asarray(f_j, float)
    if f_j.shape != (W_phi.shape[0],):
        raise InvalidArgument(f"dimension mismatch: {f_j.shape}, {W_phi.shape}")
    return f_j @ W_phi


def _seq_sum(a: np.ndarray, axis: int) -> np.ndarray:
    """Sum along ``axis`` strictly in ascending order."""
    a = np.moveaxis(a, axis, 0)
    acc = a[0].copy()
    for j in range(1, a.shape[0]):
        acc += a[j]
    return acc


def channel_softmax(H: np.ndarray, axis: int = 0) -> np.ndarray:
    """Softmax over neighbors (``axis``) independently for every channel."""
    e = np.exp(H - H.max(axis=axis, keepdims=True))
    return e / np.expand_dims(_seq_sum(e, axis), axis)


def _softmax_backward(A: np.ndarray, dA: np.ndarray, axis: int) -> np.ndarray:
    # per channel: J = diag(a) - a a^T
    return A * (dA - np.expand_dims(_seq_sum(A * dA, axis), axis))


# --- batched gather --------------------------------------------------------

def gather_forward(Q: np.ndarray, Nb: np.ndarray, weights: LevelWeights):
    """Attend from centers ``Q`` (M x C) to neighbors ``Nb`` (M x K x C)."""
    if Nb.ndim != 3 or Nb.shape[1] == 0:
        raise DegenerateInput("a gather needs at least one neighbor")
    if Q.shape[-1] != weights.in_dim or Nb.shape[-1] != weights.in_dim:
        raise InvalidArgument(
            f"feature width {Q.shape[-1]}/{Nb.shape[-1]} does not match weights {weights.in_dim}")
    diff = Q[:, None, :] - Nb
    H = diff @ weights.W_theta
    A = channel_softmax(H, axis=1)
    G = Nb @ weights.W_phi
    out = _seq_sum(A * G, axis=1)
    interaction_counter.add(Nb.shape[0] * Nb.shape[1])
    buffer_stats.observe(diff, H, A, G)
    return out, {"diff": diff, "H": H, "A": A, "G": G, "Nb": Nb, "weights": weights}


def gather_backward(cache, dout: np.ndarray):
    """Returns (dQ, dNb, dW_theta, dW_phi)."""
    A, G, diff, Nb, w = cache["A"], cache["G"], cache["diff"], cache["Nb"], cache["weights"]
    M, K, C = Nb.shape
    D = w.out_dim
    dG = A * dout[:, None, :]
    dH = _softmax_backward(A, G * dout[:, None, :], axis=1)
    dW_theta = diff.reshape(-1, C).T @ dH.reshape(-1, D)
    dW_phi = Nb.reshape(-1, C).T @ dG.reshape(-1, D)
    ddiff = dH @ w.W_theta.T
    dQ = _seq_sum(ddiff, axis=1)
    dNb = dG @ w.W_phi.T - ddiff
    return dQ, dNb, dW_theta, dW_phi


def nonlocal_gather(center, neighbors, weights: LevelWeights):
    """Single-center gather; returns (length-D output, cache)."""
    neighbors = np.asarray(neighbors, float)
    if neighbors.ndim != 2 or len(neighbors) == 0:
        raise DegenerateInput("a gather needs at least one neighbor")
    out, cache = gather_forward(np.asarray(center, float)[None], neighbors[None], weights)
    return out[0], cache


# --- the three levels ------------------------------------------------------

def neighborhood_level(features, positions, centroids, neighbor_table, weights,
                       use_relpos: bool = True):
    """Level 1: every centroid attends to its kNN neighborhood.

    With ``use_relpos`` each neighbor's feature is extended by its offset to
    the centroid and the centroid's own feature by a zero 3-vector.
    """
    idx = centroids.indices if isinstance(centroids, CentroidSet) else np.asarray(centroids)
    table = np.sort(np.asarray(neighbor_table, dtype=np.int64), axis=1)
    if len(table) != len(idx):
        raise InvalidArgument("neighbor table must have one row per centroid")
    Q = features[idx]
    Nb = features[table]
    if use_relpos:
        rel = positions[table] - positions[idx][:, None, :]
        Q = np.concatenate([Q, np.zeros((len(idx), 3))], axis=1)
        Nb = np.concatenate([Nb, rel], axis=2)
    X, gcache = gather_forward(Q, Nb, weights)
    return X, {"gather": gcache, "idx": idx, "table": table,
               "n": len(features), "c": features.shape[1]}


def neighborhood_level_backward(cache, dX):
    dQ, dNb, dWt, dWp = gather_backward(cache["gather"], dX)
    c = cache["c"]
    dF = np.zeros((cache["n"], c))
    np.add.at(dF, cache["idx"], dQ[:, :c])
    np.add.at(dF, cache["table"], dNb[:, :, :c])
    return dF, dWt, dWp


def superpoint_level(X, sp_samples, weights):
    """Level 2: every centroid attends to sampled centroids of its superpoint.

    Rows of ``sp_samples`` holding :data:`DEGENERATE` pass ``X`` through.
    """
    samples = np.sort(np.asarray(sp_samples, dtype=np.int64), axis=1)
    if len(samples) != len(X):
        raise InvalidArgument("superpoint samples must have one row per centroid")
    valid = np.flatnonzero((samples != DEGENERATE).all(axis=1))
    Y = X.copy()
    gcache = None
    if len(valid):
        rows = samples[valid]
        Y[valid], gcache = gather_forward(X[valid], X[rows], weights)
    return Y, {"gather": gcache, "valid": valid, "rows": samples[valid], "shape": X.shape}


def superpoint_level_backward(cache, dY):
    valid = cache["valid"]
    dX = dY.copy()
    dX[valid] = 0.0
    D = cache["shape"][1]
    if cache["gather"] is None:
        return dX, np.zeros((D, D)), np.zeros((D, D))
    dQ, dNb, dWt, dWp = gather_backward(cache["gather"], dY[valid])
    np.add.at(dX, valid, dQ)
    np.add.at(dX, cache["rows"], dNb)
    return dX, dWt, dWp


def superpoint_maxpool(Y, centroid_sp):
    """Channel-wise max of ``Y`` over the centroids of every superpoint.

    Superpoints holding no centroid are skipped; ``sp_ids[s]`` gives the
    original superpoint id of pooled row ``s``.
    """
    centroid_sp = np.asarray(centroid_sp, dtype=np.int64)
    sp_ids = np.unique(centroid_sp[centroid_sp >= 0])
    if len(sp_ids) == 0:
        raise DegenerateInput("no superpoint contains a centroid")
    D = Y.shape[1]
    V = np.empty((len(sp_ids), D))
    argmax = np.empty((len(sp_ids), D), dtype=np.int64)
    for s, sid in enumerate(sp_ids):
        members = np.flatnonzero(centroid_sp == sid)
        # first maximum -> smallest centroid index on ties
        am = np.argmax(Y[members], axis=0)
        argmax[s] = members[am]
        V[s] = Y[argmax[s], np.arange(D)]
    return V, {"argmax": argmax, "sp_ids": sp_ids, "shape": Y.shape}


def superpoint_maxpool_backward(cache, dV):
    dY = np.zeros(cache["shape"])
    argmax = cache["argmax"]
    cols = np.broadcast_to(np.arange(argmax.shape[1]), argmax.shape)
    np.add.at(dY, (argmax, cols), dV)
    return dY


def global_level(Y, V, weights):
    """Level 3: every centroid attends to all pooled superpoint features."""
    if len(V) < 1:
        raise DegenerateInput("global level needs at least one superpoint")
    Nb = np.broadcast_to(V, (len(Y),) + V.shape)
    Z, gcache = gather_forward(Y, Nb, weights)
    return Z, {"gather": gcache}


def global_level_backward(cache, dZ):
    dY, dNb, dWt, dWp = gather_backward(cache["gather"], dZ)
    return dY, _seq_sum(dNb, axis=0), dWt, dWp


def fuse(X, Y, Z, W_gamma, b_gamma):
    """relu(W_gamma^T [X; Y; Z] + b_gamma), row by row."""
    if not (X.shape == Y.shape == Z.shape):
        raise InvalidArgument(f"level shapes differ: {X.shape}, {Y.shape}, {Z.shape}")
    if W_gamma.shape[0] != 3 * X.shape[1] or b_gamma.shape != (W_gamma.shape[1],):
        raise InvalidArgument(f"W_gamma {W_gamma.shape} / b_gamma {b_gamma.shape} do not fit")
    cat = np.concatenate([X, Y, Z], axis=1)
    pre = cat @ W_gamma + b_gamma
    return np.maximum(pre, 0.0), {"cat": cat, "pre": pre, "W_gamma": W_gamma}


def fuse_backward(cache, dout):
    dpre = dout * (cache["pre"] > 0)
    dW = cache["cat"].T @ dpre
    db = _seq_sum(dpre, axis=0)
    dcat = dpre @ cache["W_gamma"].T
    D = dcat.shape[1] // 3
    return dcat[:, :D], dcat[:, D:2 * D], dcat[:, 2 * D:], dW, db


# --- the cascade -----------------------------------------------------------

def parse_levels(levels) -> frozenset:
    """Accepts ``{1, 2, 3}``-style iterables or strings like ``"12"``."""
    try:
        out = frozenset(int(v) for v in levels)
    except (TypeError, ValueError):
        raise InvalidArgument(f"levels must be digits from 1-3, got {levels!r}") from None
    if 1 not in out or not out <= {1, 2, 3}:
        raise InvalidArgument(f"levels must include 1 and be a subset of {{1,2,3}}, got {sorted(out)}")
    return out


def cascaded_forward(features, positions, centroids, neighbor_table, sp_samples, centroid_sp,
                     params: CascadeParams, levels=(1, 2, 3), use_relpos: bool = True):
    """Run the enabled levels and fuse them.

    ``features``/``positions`` describe the points the centroids were drawn
    from, ``centroid_sp`` holds each centroid's superpoint id.  A disabled
    level 2 gives ``Y = X``; a disabled level 3 gives ``Z = Y``.
    """
    levels = parse_levels(levels)
    tape = Tape(levels)
    X, tape["level1"] = neighborhood_level(
        features, positions, centroids, neighbor_table, params.level1, use_relpos)
    if 2 in levels:
        Y, tape["level2"] = superpoint_level(X, sp_samples, params.level2)
    else:
        Y = X
    V = sp_ids = None
    if 3 in levels:
        V, tape["pool"] = superpoint_maxpool(Y, centroid_sp)
        sp_ids = tape["pool"]["sp_ids"]
        Z, tape["level3"] = global_level(Y, V, params.level3)
    else:
        Z = Y
    fused, tape["fuse"] = fuse(X, Y, Z, params.W_gamma, params.b_gamma)
    tape["shapes"] = (X.shape, fused.shape)
    return LevelFeatures(X, Y, Z, V, fused, sp_ids), tape


def cascaded_backward(tape: Tape, grad_fused):
    """Exact gradients of a cascaded module.

    Returns ``(grads, d_features)`` where ``grads`` is a :class:`CascadeParams`
    of gradients and ``d_features`` the gradient for the input feature rows.
    """
    x_shape, fused_shape = tape["shapes"]
    grad_fused = np.asarray(grad_fused, float)
    if grad_fused.shape != fused_shape:
        raise InvalidArgument(f"gradient shape {grad_fused.shape} != fused shape {fused_shape}")
    D = x_shape[1]
    dX, dY, dZ, dWg, dbg = fuse_backward(tape["fuse"], grad_fused)

    zeros = lambda: np.zeros((D, D))  # noqa: E731
    dW3t, dW3p = zeros(), zeros()
    if 3 in tape.levels:
        dY3, dV, dW3t, dW3p = global_level_backward(tape["level3"], dZ)
        dY = dY + dY3 + superpoint_maxpool_backward(tape["pool"], dV)
    else:
        dY = dY + dZ

    dW2t, dW2p = zeros(), zeros()
    if 2 in tape.levels:
        dX2, dW2t, dW2p = superpoint_level_backward(tape["level2"], dY)
        dX = dX + dX2
    else:
        dX = dX + dY

    dF, dW1t, dW1p = neighborhood_level_backward(tape["level1"], dX)
    grads = CascadeParams(LevelWeights(dW1t, dW1p), LevelWeights(dW2t, dW2p),
                          LevelWeights(dW3t, dW3p), dWg, dbg)
    return grads, dF


# --- baselines and accounting ----------------------------------------------

def baseline_full_nonlocal(features, weights: LevelWeights, chunk: int = 32) -> np.ndarray:
    """Channel-wise gather of every point over all N points (O(N^2) pairs)."""
    F = np.asarray(features, float)
    N = len(F)
    if N < 1:
        raise DegenerateInput("baseline needs at least one point")
    G = F @ weights.W_phi
    out = np.empty((N, weights.out_dim))
    for start in range(0, N, chunk):
        Q = F[start:start + chunk]
        diff = Q[:, None, :] - F[None, :, :]
        H = diff @ weights.W_theta
        A = channel_softmax(H, axis=1)
        out[start:start + chunk] = _seq_sum(A * G[None], axis=1)
        interaction_counter.add(len(Q) * N)
        buffer_stats.observe(diff, H, A, G)
    return out


def baseline_scalar_nonlocal(features, W_theta, W_phi, W_gamma) -> np.ndarray:
    """Scalar-attention non-local block: softmax(theta phi^T) gamma."""
    F = np.asarray(features, float)
    theta, phi, gamma = F @ W_theta, F @ W_phi, F @ W_gamma
    S = theta @ phi.T
    E = np.exp(S - S.max(axis=1, keepdims=True))
    attn = E / E.sum(axis=1, keepdims=True)
    return attn @ gamma


def pair_interaction_count(M: int, K: int, K_sp: int, N_sp: int) -> int:
    """Number of (center, neighbor) pairs one cascaded module visits."""
    if min(M, K, K_sp, N_sp) < 0:
        raise InvalidArgument("counts must be non-negative")
    return M * (K + K_sp + N_sp)


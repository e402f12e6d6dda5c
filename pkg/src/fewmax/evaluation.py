"""Representation-quality evaluations.

Hyperspherical energy, linear probe, memory-bank retrieval, NRMSE decoder
probe, filter-normalized loss landscapes and the input-gradient-norm probe.
"""

from __future__ import annotations

import copy
import logging
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.spatial.distance import pdist

from .augment import AugPolicy, blend_plan
from .errors import CapacityError, DimensionError, LabelCoverageError, ParameterError, SingularityError
from .loss import TAU, NegativePolicy, fewmax_loss
from .train import mix_batch

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# hyperspherical energy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnergyReport:
    e0: float
    e1: float
    e2: float
    n: int
    convention: str = "ordered-pairs"

    def to_dict(self):
        return {"E0": self.e0, "E1": self.e1, "E2": self.e2, "n": self.n, "convention": self.convention}


def _pair_distances(Z):
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise CapacityError(f"energy needs at least 2 points, got shape {Z.shape}")
    d = pdist(Z)
    zero = np.flatnonzero(d == 0)
    if zero.size:
        rows, cols = np.triu_indices(Z.shape[0], 1)
        i, j = int(rows[zero[0]]), int(cols[zero[0]])
        raise SingularityError(f"rows {i} and {j} coincide; hyperspherical energy is singular")
    return d


def hyperspherical_energy(Z, s: int) -> float:
    """Sum over ordered pairs ``i != j`` of ``|z_i - z_j|^-s`` (``-log|z_i - z_j|`` for s=0).

    Lower is more spread out.
    """
    if s not in (0, 1, 2):
        raise ParameterError(f"s must be 0, 1 or 2, got {s}")
    d = _pair_distances(Z)
    # each unordered pair appears twice among ordered pairs
    if s == 0:
        return float(2.0 * np.sum(-np.log(d)))
    return float(2.0 * np.sum(d ** (-float(s))))


def energy_report(Z) -> EnergyReport:
    d = _pair_distances(Z)
    return EnergyReport(
        e0=float(2.0 * np.sum(-np.log(d))),
        e1=float(2.0 * np.sum(1.0 / d)),
        e2=float(2.0 * np.sum(1.0 / d**2)),
        n=len(Z),
    )


def mean_energy_report(Z) -> EnergyReport:
    """Energies divided by the number of ordered pairs, comparable across ``N``."""
    r = energy_report(Z)
    pairs = r.n * (r.n - 1)
    return EnergyReport(e0=r.e0 / pairs, e1=r.e1 / pairs, e2=r.e2 / pairs, n=r.n, convention="ordered-pairs-mean")


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------


def linear_probe(train_feats, train_labels, test_feats, test_labels, seed=0, steps=500, lr=0.05, weight_decay=1e-4):
    """Train a linear softmax classifier on frozen features; returns ``(top1, top5)`` in percent.

    Features are standardized with training statistics.  Full-batch Adam
    for a fixed number of steps keeps the result deterministic.
    """
    train_feats = np.asarray(train_feats, dtype=np.float64)
    test_feats = np.asarray(test_feats, dtype=np.float64)
    classes = np.unique(np.asarray(train_labels))
    missing = sorted(set(np.unique(test_labels).tolist()) - set(classes.tolist()))
    if missing:
        raise LabelCoverageError(f"test classes {missing} never appear in the probe training set")
    index = {c: k for k, c in enumerate(classes.tolist())}
    y_train = torch.tensor([index[c] for c in np.asarray(train_labels).tolist()])
    y_test = torch.tensor([index[c] for c in np.asarray(test_labels).tolist()])

    mean = train_feats.mean(axis=0)
    std = train_feats.std(axis=0) + 1e-8
    xtr = torch.from_numpy((train_feats - mean) / std)
    xte = torch.from_numpy((test_feats - mean) / std)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        clf = nn.Linear(xtr.shape[1], len(classes)).double()
    opt = torch.optim.Adam(clf.parameters(), lr=lr, weight_decay=weight_decay)
    for _ in range(steps):
        opt.zero_grad()
        F.cross_entropy(clf(xtr), y_train).backward()
        opt.step()

    with torch.no_grad():
        logits = clf(xte)
    k = min(5, len(classes))
    topk = logits.topk(k, dim=1).indices
    top1 = float((topk[:, 0] == y_test).double().mean()) * 100.0
    top5 = float((topk == y_test[:, None]).any(dim=1).double().mean()) * 100.0
    return top1, top5


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MemoryBank:
    embeddings: np.ndarray
    ids: tuple

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        ids = tuple(self.ids)
        if emb.ndim != 2 or emb.shape[0] != len(ids):
            raise DimensionError(f"bank has {emb.shape} embeddings for {len(ids)} ids")
        if len(set(ids)) != len(ids):
            raise ParameterError("memory bank ids must be unique")
        if not np.allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-5):
            raise ParameterError("memory bank rows must be unit-normalized")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "ids", ids)
        # position of each row in id order, for deterministic tie-breaking
        object.__setattr__(self, "_id_order", np.argsort(np.array(ids, dtype=object), kind="stable"))

    def __len__(self):
        return len(self.ids)


def knn_retrieve(bank: MemoryBank, query, k: int):
    """Exact k nearest rows by Euclidean distance, ``[(id, distance), ...]`` ascending."""
    if k > len(bank):
        raise CapacityError(f"k={k} exceeds memory bank size {len(bank)}")
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    dist = np.linalg.norm(bank.embeddings - query, axis=1)
    by_id = bank._id_order
    order = by_id[np.argsort(dist[by_id], kind="stable")][:k]
    return [(bank.ids[r], float(dist[r])) for r in order]


# ---------------------------------------------------------------------------
# NRMSE decoder probe
# ---------------------------------------------------------------------------


def nrmse(pred, target):
    """Mean over samples of ``|pred - target| / |target|``; all-zero targets are skipped."""
    pred = np.asarray(pred, dtype=np.float64).reshape(len(pred), -1)
    target = np.asarray(target, dtype=np.float64).reshape(len(target), -1)
    norms = np.linalg.norm(target, axis=1)
    valid = norms > 0
    if not valid.all():
        warnings.warn(f"{int((~valid).sum())} all-zero target(s) excluded from NRMSE", stacklevel=2)
    if not valid.any():
        raise CapacityError("no non-zero targets to compute NRMSE on")
    return float(np.mean(np.linalg.norm(pred[valid] - target[valid], axis=1) / norms[valid]))


class PatchDecoder(nn.Module):
    """Linear lift to a coarse map, then two transposed convolutions (x4 upsampling)."""

    def __init__(self, in_dim, patch_size, width=32):
        super().__init__()
        self.patch_size = patch_size
        self.base = math.ceil(patch_size / 4)
        self.width = width
        self.lift = nn.Linear(in_dim, width * self.base * self.base)
        self.up1 = nn.ConvTranspose2d(width, width // 2, 4, stride=2, padding=1)
        self.up2 = nn.ConvTranspose2d(width // 2, 1, 4, stride=2, padding=1)

    def forward(self, z):
        h = F.relu(self.lift(z)).view(-1, self.width, self.base, self.base)
        out = self.up2(F.relu(self.up1(h)))
        return out[:, 0, : self.patch_size, : self.patch_size]


def nrmse_probe(features, magnitudes, seed=0, train_frac=0.8, steps=400, lr=3e-3):
    """Train a decoder from features to patch magnitudes and report test-split NRMSE."""
    features = np.asarray(features, dtype=np.float64)
    magnitudes = np.asarray(magnitudes, dtype=np.float64)
    if len(features) != len(magnitudes):
        raise DimensionError(f"{len(features)} feature vectors for {len(magnitudes)} patches")
    keep = np.linalg.norm(magnitudes.reshape(len(magnitudes), -1), axis=1) > 0
    if not keep.all():
        warnings.warn(f"{int((~keep).sum())} all-zero patch(es) excluded from the NRMSE probe", stacklevel=2)
        features, magnitudes = features[keep], magnitudes[keep]
    n = len(features)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = max(1, min(n - 1, int(round(train_frac * n))))
    tr, te = perm[:n_train], perm[n_train:]

    xtr, ytr = torch.from_numpy(features[tr]).float(), torch.from_numpy(magnitudes[tr]).float()
    xte = torch.from_numpy(features[te]).float()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        dec = PatchDecoder(features.shape[1], magnitudes.shape[-1])
    opt = torch.optim.Adam(dec.parameters(), lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        F.mse_loss(dec(xtr), ytr).backward()
        opt.step()
    with torch.no_grad():
        pred = dec(xte).double().numpy()
    return nrmse(pred, magnitudes[te])


# ---------------------------------------------------------------------------
# loss landscape
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LandscapeGrid:
    grid: np.ndarray
    directions: tuple
    coords: np.ndarray
    center: dict
    center_loss: float

    def to_csv(self, path):
        """Long-format CSV: ``alpha,beta,loss``."""
        lines = ["alpha,beta,loss"]
        for a_idx, a in enumerate(self.coords):
            for b_idx, b in enumerate(self.coords):
                lines.append(f"{a:.6g},{b:.6g},{self.grid[a_idx, b_idx]:.10g}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        return path


def filter_normalized_direction(params, generator):
    """Gaussian direction whose every filter (slice along axis 0) matches the weight filter norm."""
    direction = {}
    for name, w in params.items():
        d = torch.randn(w.shape, generator=generator, dtype=w.dtype)
        if w.dim() == 0:
            d = d.sign() * w.abs()
        else:
            wn = w.reshape(w.shape[0], -1).norm(dim=1)
            dn = d.reshape(d.shape[0], -1).norm(dim=1)
            scale = wn / (dn + 1e-10)
            d = d * scale.reshape(-1, *([1] * (w.dim() - 1)))
        direction[name] = d
    return direction


def loss_landscape(net: nn.Module, loss_eval: Callable[[nn.Module], float], grid_size=21, seed=0) -> LandscapeGrid:
    """Evaluate ``loss_eval`` on a 2-D slice ``theta + a*d1 + b*d2``, ``a, b`` in ``[-1, 1]``.

    Perturbations are applied to a private copy, so ``net`` is never touched.
    Non-finite losses are stored as ``+inf``.
    """
    if grid_size < 1 or grid_size % 2 == 0:
        raise ParameterError(f"grid_size must be odd so the center lies on the grid, got {grid_size}")
    center = {k: p.detach().clone() for k, p in net.named_parameters()}
    gen = torch.Generator().manual_seed(seed)
    d1 = filter_normalized_direction(center, gen)
    d2 = filter_normalized_direction(center, gen)
    coords = np.linspace(-1.0, 1.0, grid_size)
    coords[grid_size // 2] = 0.0

    probe = copy.deepcopy(net)
    params = dict(probe.named_parameters())
    grid = np.empty((grid_size, grid_size))
    for ia, a in enumerate(coords):
        for ib, b in enumerate(coords):
            with torch.no_grad():
                for k, p in params.items():
                    if a == 0.0 and b == 0.0:
                        p.copy_(center[k])
                    else:
                        p.copy_(center[k] + a * d1[k] + b * d2[k])
            value = float(loss_eval(probe))
            grid[ia, ib] = value if math.isfinite(value) else math.inf
    mid = grid_size // 2
    return LandscapeGrid(grid=grid, directions=(d1, d2), coords=coords, center=center, center_loss=grid[mid, mid])


# ---------------------------------------------------------------------------
# input-gradient probe
# ---------------------------------------------------------------------------


def task_loss_per_sample(net, x, partners, lams, keep, tau=TAU, negatives=None):
    """Mean over blends of the mixed-pair loss for each sample, ``(B,)``."""
    B, M = partners.shape
    xhat = mix_batch(x, partners, keep)
    z = net(x)
    zhat = net(xhat.reshape(B * M, *x.shape[1:])).reshape(B, M, -1)
    return fewmax_loss(z, None, zhat, partners, lams, tau, negatives).l_task.mean(dim=1)


def input_grad_norm_probe(net, batch, policy: AugPolicy, rng=None, tau=TAU, negatives=None) -> float:
    """Batch mean of ``|grad_x L_task(x_i)|``.

    ``L_task(x_i)`` depends on every image in the batch (blend partner and
    negatives), so the gradient is taken with respect to all input pixels.
    The blend plan comes from ``rng`` (default: a stream keyed on
    ``policy.seed``) so repeated calls are identical.
    """
    if rng is None:
        rng = np.random.Generator(np.random.Philox(policy.seed))
    batch = np.asarray(batch)
    hwc = batch.transpose(0, 2, 3, 1)
    partners, lams, keep = blend_plan(list(hwc), policy, rng)
    params = list(net.parameters())
    dtype = params[0].dtype if params else torch.float64
    x = torch.tensor(batch, dtype=dtype, requires_grad=True)
    was_training = net.training
    net.eval()
    losses = task_loss_per_sample(net, x, partners, lams, keep, tau, negatives)
    net.train(was_training)
    if not losses.requires_grad:
        return 0.0
    norms = []
    for i in range(len(losses)):
        (g,) = torch.autograd.grad(losses[i], x, retain_graph=i + 1 < len(losses), allow_unused=True)
        norms.append(0.0 if g is None else float(g.norm()))
    return float(np.mean(norms))

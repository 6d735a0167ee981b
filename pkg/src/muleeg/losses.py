"""Contrastive objectives: NT-Xent over a batch, the per-sample diverse loss,
and their weighted total.

The ``*_reference`` functions are deliberately naive scalar loops over plain
Python floats. They exist only as test oracles and are never used for
training.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

NORM_EPS = 1e-8


def _check_batch(z: torch.Tensor, name: str) -> None:
    if z.ndim != 2:
        raise ValueError(f"{name} must be 2-D [N, D], got shape {tuple(z.shape)}")
    if z.shape[0] == 0:
        raise ValueError(f"{name} is empty (N = 0)")
    if z.shape[1] == 0:
        raise ValueError(f"{name} has zero feature dimension")


def _unit(z: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    return z / (z.norm(dim=-1, keepdim=True) + eps)


def cosine_similarity_matrix(a: torch.Tensor, b: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Pairwise cosine similarities ``[N, M]``; ``eps`` is added to each row norm."""
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"feature dims differ: {a.shape[-1]} vs {b.shape[-1]}")
    return _unit(a, eps) @ _unit(b, eps).transpose(-1, -2)


def nt_xent(zi: torch.Tensor, zj: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """NT-Xent over N positive pairs ``(zi[k], zj[k])``.

    Rows are interleaved as ``zi[0], zj[0], zi[1], zj[1], ...``; each anchor's
    denominator runs over all 2N - 1 other rows. The loss is the mean of the
    2N per-anchor terms.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    _check_batch(zi, "zi")
    _check_batch(zj, "zj")
    if zi.shape != zj.shape:
        raise ValueError(f"zi and zj shapes differ: {tuple(zi.shape)} vs {tuple(zj.shape)}")
    n = zi.shape[0]
    z = torch.stack([zi, zj], dim=1).reshape(2 * n, -1)
    logits = cosine_similarity_matrix(z, z) / tau
    eye = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(eye, float("-inf"))
    partner = torch.arange(2 * n, device=z.device) ^ 1
    pos = logits[torch.arange(2 * n, device=z.device), partner]
    return (torch.logsumexp(logits, dim=1) - pos).mean()


def diverse_loss(z_t_i: torch.Tensor, z_t_j: torch.Tensor, z_s_i: torch.Tensor, z_s_j: torch.Tensor,
                 tau_d: float = 10.0) -> torch.Tensor:
    """Per-sample four-way contrastive loss.

    For each sample the stack ``[z_t_i, z_t_j, z_s_i, z_s_j]`` is scored on its
    own: each time vector is pulled to its time partner against both
    spectrogram vectors, and vice versa. Averaged over 4N anchors.
    """
    if tau_d <= 0:
        raise ValueError(f"temperature must be > 0, got {tau_d}")
    parts = (z_t_i, z_t_j, z_s_i, z_s_j)
    for name, p in zip(("z_t_i", "z_t_j", "z_s_i", "z_s_j"), parts):
        _check_batch(p, name)
    if len({tuple(p.shape) for p in parts}) != 1:
        raise ValueError(f"quadruple shapes differ: {[tuple(p.shape) for p in parts]}")
    zk = torch.stack(parts, dim=1)  # [N, 4, D]
    logits = cosine_similarity_matrix(zk, zk) / tau_d  # [N, 4, 4]
    eye = torch.eye(4, dtype=torch.bool, device=zk.device)
    logits = logits.masked_fill(eye, float("-inf"))
    partner = torch.tensor([1, 0, 3, 2], device=zk.device)
    pos = logits[:, torch.arange(4, device=zk.device), partner]  # [N, 4]
    return (torch.logsumexp(logits, dim=2) - pos).mean()


def total_loss(l_tt, l_ss, l_ff, l_d, lambda1: float = 1.0, lambda2: float = 1.0):
    return lambda1 * (l_tt + l_ff + l_ss) + lambda2 * l_d


@dataclass
class LossBundle:
    """Scalar loss components of one step; inactive components are 0."""

    l_tt: float = 0.0
    l_ss: float = 0.0
    l_ff: float = 0.0
    l_d: float = 0.0
    total: float = 0.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    tau: float = 1.0
    tau_d: float = 10.0

    def recombined(self) -> float:
        return total_loss(self.l_tt, self.l_ss, self.l_ff, self.l_d, self.lambda1, self.lambda2)

    def as_dict(self) -> dict:
        return asdict(self)


# --- scalar oracles -------------------------------------------------------

def _cos(u, v, eps=NORM_EPS):
    nu = math.sqrt(sum(a * a for a in u)) + eps
    nv = math.sqrt(sum(b * b for b in v)) + eps
    return sum(a * b for a, b in zip(u, v)) / (nu * nv)


def cosine_similarity_reference(a, b) -> list[list[float]]:
    return [[_cos(list(map(float, ra)), list(map(float, rb))) for rb in b] for ra in a]


def nt_xent_reference(zi, zj, tau: float = 1.0) -> float:
    """Literal double loop over the 2N interleaved rows (1-based pairs (2k-1, 2k))."""
    n = len(zi)
    rows = []
    for k in range(n):
        rows.append([float(v) for v in zi[k]])
        rows.append([float(v) for v in zj[k]])

    def ell(i, j):
        num = math.exp(_cos(rows[i], rows[j]) / tau)
        den = 0.0
        for k in range(2 * n):
            if k != i:
                den += math.exp(_cos(rows[i], rows[k]) / tau)
        return -math.log(num / den)

    total = 0.0
    for k in range(1, n + 1):
        a, b = 2 * k - 2, 2 * k - 1  # 0-based indices of rows 2k-1 and 2k
        total += ell(a, b) + ell(b, a)
    return total / (2 * n)


def diverse_loss_reference(z_t_i, z_t_j, z_s_i, z_s_j, tau_d: float = 10.0) -> float:
    n = len(z_t_i)

    def ell_d(zk, a, b):
        num = math.exp(_cos(zk[a], zk[b]) / tau_d)
        den = 0.0
        for i in range(4):
            if i != a:
                den += math.exp(_cos(zk[a], zk[i]) / tau_d)
        return -math.log(num / den)

    total = 0.0
    for k in range(n):
        zk = [[float(v) for v in z[k]] for z in (z_t_i, z_t_j, z_s_i, z_s_j)]
        total += ell_d(zk, 0, 1) + ell_d(zk, 1, 0) + ell_d(zk, 2, 3) + ell_d(zk, 3, 2)
    return total / (4 * n)

"""Projection head and the hybrid prototypical contrastive loss.

For each anchor ``i`` whose IoU clears the gate, the loss averages
``-log(exp(s_ij) / (sum_{l != i} exp(s_il) + sum_k exp(s_ik)))`` over the
same-label partners ``j``, where ``s`` are cosine similarities divided by the
temperature and ``k`` runs over projected prototypes. The batch total is
divided by the full batch size ``N``, so gated-out anchors shrink the loss
rather than re-weight it. Anchors without a same-label partner contribute 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .tensor import Tape

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HpcConfig:
    tau: float = 0.1
    phi: float = 0.7
    projection_dim: int = 128

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0 <= self.phi <= 1:
            raise ValueError(f"phi must lie in [0, 1], got {self.phi}")
        if self.projection_dim < 1:
            raise ValueError("projection_dim must be >= 1")


def project(tape: Tape, features: int, head_weights: int) -> int:
    """L2-normalised rows of ``features @ head_weights.T``."""
    f, w = tape.value(features), tape.value(head_weights)
    if f.ndim != 2 or w.ndim != 2 or f.shape[1] != w.shape[1]:
        raise ValueError(f"project: features {f.shape} incompatible with head {w.shape}")
    z = tape.matmul(features, tape.transpose(head_weights))
    return tape.l2_normalize(z)


def cosine_sim(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine_sim: zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def hpc_weights(labels, iou, n_protos, phi):
    """Constant coefficient matrices for the loss.

    Returns ``(pos, row, mask)`` over the (N, N + K) similarity grid: ``pos`` holds
    the numerator coefficients, ``row`` the per-anchor log-denominator
    coefficients, ``mask`` the denominator support (everything but self).
    """
    labels = np.asarray(labels)
    iou = np.asarray(iou, dtype=np.float64)
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    partners = same.sum(axis=1)
    active = (iou >= phi) & (partners > 0)
    pos = np.zeros((n, n + n_protos))
    pos[:, :n] = np.where(active[:, None] & same, 1.0 / (n * np.maximum(partners, 1))[:, None], 0.0)
    row = np.where(active, 1.0 / n, 0.0)
    mask = np.ones((n, n + n_protos), dtype=bool)
    mask[np.arange(n), np.arange(n)] = False
    return pos, row, mask


def hpc_loss(tape: Tape, embeddings: int, iou, labels, prototypes: int | None, cfg: HpcConfig) -> int:
    """Scalar loss node. ``embeddings`` and ``prototypes`` are unit-row nodes."""
    z = tape.value(embeddings)
    labels = np.asarray(labels)
    iou = np.asarray(iou, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValueError(f"hpc_loss: embeddings must be a non-empty matrix, got {z.shape}")
    if labels.shape != (z.shape[0],) or iou.shape != (z.shape[0],):
        raise ValueError("hpc_loss: labels and iou must have one entry per embedding")
    if np.any((iou < 0) | (iou > 1)):
        raise ValueError("hpc_loss: iou scores must lie in [0, 1]")
    n_protos = 0 if prototypes is None else tape.value(prototypes).shape[0]

    pos, row, mask = hpc_weights(labels, iou, n_protos, cfg.phi)
    if not row.any():
        if n_protos == 0:
            logger.warning("hpc_loss: no prototypes and no positive pairs; loss is 0")
        return tape.const(0.0)

    candidates = embeddings if n_protos == 0 else tape.concat_rows(embeddings, prototypes)
    sims = tape.scale(tape.matmul(embeddings, tape.transpose(candidates)), 1.0 / cfg.tau)
    log_denominator = tape.masked_logsumexp(sims, mask)
    numerator = tape.sum(tape.mul(sims, tape.const(pos)))
    denominator = tape.sum(tape.mul(log_denominator, tape.const(row)))
    return tape.add(denominator, tape.scale(numerator, -1.0))


def separation_gap(embeddings, labels):
    """Mean intra-class cosine minus mean inter-class cosine of unit rows."""
    intra, inter = class_cosines(embeddings, labels)
    return intra - inter


def class_cosines(embeddings, labels):
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    sims = z @ z.T
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    intra = sims[same & off]
    inter = sims[~same]
    if intra.size == 0 or inter.size == 0:
        raise ValueError("need at least two classes and a same-class pair")
    return float(intra.mean()), float(inter.mean())

"""Adaptive global class-aware contrastive loss.

Class-level coefficients (alpha, S, psi, phi) are plain numpy arrays computed
outside the graph once per epoch.  Only the per-batch terms are built from
autodiff ops, so gradients reach the embeddings and the prototypes and
nothing else.

Class ids at this API are 1..C, matching the rest of the package.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

EPS = 1e-6


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    tau_phi: float = 0.01
    tau_psi: float = 0.1
    tau_alpha: float = 0.1
    eps: float = EPS
    momentum: float = 0.9

    def __post_init__(self):
        if min(self.tau, self.tau_phi, self.tau_psi, self.tau_alpha) <= 0:
            raise ValueError("temperatures must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class PriorSpec:
    phi: np.ndarray
    psi: np.ndarray

    @classmethod
    def zeros(cls, n_classes: int) -> "PriorSpec":
        return cls(np.zeros((n_classes, n_classes)), np.zeros(n_classes))

    @classmethod
    def pairs(cls, n_classes: int, pairs) -> "PriorSpec":
        """Symmetric unit repulsion prior on the given 1-based class pairs."""
        prior = cls.zeros(n_classes)
        for a, b in pairs:
            if a == b:
                raise ValueError("prior on the diagonal of phi is not allowed")
            prior.phi[a - 1, b - 1] = prior.phi[b - 1, a - 1] = 1.0
        return prior


@dataclass
class ModCoeffs:
    """Momentum-smoothed phi/psi plus the epoch counter."""

    phi: np.ndarray | None = None
    psi: np.ndarray | None = None
    t: int = 0


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def _onehot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 1 or labels.max() > n_classes):
        raise ValueError(f"class ids must lie in 1..{n_classes}")
    return np.eye(n_classes)[labels - 1]


# ---------------------------------------------------------------------------
# class-level coefficients


def compute_alpha(freqs, tau_alpha: float = 0.1, eps: float = EPS) -> np.ndarray:
    """Temperature softmax over inverse class counts (pre-augmentation)."""
    f = np.asarray(freqs, dtype=np.float64)
    return _softmax((1.0 / tau_alpha) * (1.0 / (f + eps)))


def compute_S(embeddings, labels, n_classes: int | None = None,
              exclude_self_pairs: bool = False) -> np.ndarray:
    """Mean pairwise cosine similarity between the embeddings of each class pair.

    The double sum includes xi == xi', so S = M M^T where row a of M is the
    mean unit vector of class a.  ``exclude_self_pairs`` drops the n_a unit
    self-terms from the diagonal instead.  Zero-norm rows are skipped.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    c = int(labels.max()) if n_classes is None else n_classes
    norms = np.linalg.norm(z, axis=1)
    keep = norms > 0
    if not keep.all():
        log.warning("compute_S: excluded %d zero-norm embeddings", int((~keep).sum()))
    u = z[keep] / norms[keep, None]
    onehot = _onehot(labels[keep], c)
    counts = onehot.sum(axis=0)
    if (counts == 0).any():
        missing = [i + 1 for i in np.flatnonzero(counts == 0)]
        raise ValueError(f"class absent from labels: {missing}")
    sums = onehot.T @ u
    S = sums @ sums.T / np.outer(counts, counts)
    if exclude_self_pairs:
        diag = np.diag(S).copy()
        with np.errstate(invalid="ignore", divide="ignore"):
            ex = (counts ** 2 * diag - counts) / (counts * (counts - 1))
        S[np.diag_indices(c)] = np.where(counts > 1, ex, np.nan)
    # symmetrise and bound away round-off; NaN diagonals pass through clip
    return np.clip(0.5 * (S + S.T), -1.0, 1.0)


def compute_psi(S, tau_psi: float = 0.1, eps: float = EPS) -> np.ndarray:
    """Intra-class weights: softmax of inverse self-similarity."""
    diag = np.diag(np.asarray(S, dtype=np.float64))
    return _softmax((1.0 / (diag + eps)) / tau_psi)


def compute_phi(S, tau_phi: float = 0.01) -> np.ndarray:
    """Row-wise softmax of S / tau_phi over the off-diagonal entries; zero diagonal."""
    S = np.asarray(S, dtype=np.float64)
    c = S.shape[0]
    if c < 2:
        raise ValueError("phi needs at least two classes")
    scores = S / tau_phi
    off = ~np.eye(c, dtype=bool)
    masked = np.where(off, scores, -np.inf)
    e = np.exp(masked - masked.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def apply_priors(phi, psi, prior: PriorSpec | None) -> tuple[np.ndarray, np.ndarray]:
    """phi + P_phi * mean(phi_offdiag), psi + p_psi * mean(psi)."""
    phi = np.asarray(phi, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    if prior is None:
        return phi.copy(), psi.copy()
    if np.any(np.diag(prior.phi) != 0):
        raise ValueError("prior on the diagonal of phi is not allowed")
    c = phi.shape[0]
    phi_bar = phi[~np.eye(c, dtype=bool)].mean()
    return phi + prior.phi * phi_bar, psi + prior.psi * psi.mean()


def momentum_update(state: ModCoeffs, phi_new, psi_new, lam: float) -> ModCoeffs:
    """EMA of the prior-adjusted coefficients; the first call copies them."""
    phi_new = np.asarray(phi_new, dtype=np.float64)
    psi_new = np.asarray(psi_new, dtype=np.float64)
    if state.phi is None:
        phi, psi = phi_new.copy(), psi_new.copy()
    else:
        phi = lam * state.phi + (1.0 - lam) * phi_new
        psi = lam * state.psi + (1.0 - lam) * psi_new
    return ModCoeffs(phi, psi, state.t + 1)


# ---------------------------------------------------------------------------
# batch terms


def init_prototypes(n_classes: int, dim: int, seed: int = 0) -> Tensor:
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((n_classes, dim))
    return Tensor(c / np.linalg.norm(c, axis=1, keepdims=True), requires_grad=True,
                  name="prototypes")


def renormalize_degenerate(protos: Tensor, seed: int = 0) -> int:
    """Re-draw any prototype row whose norm fell below 1e-8; returns the count."""
    norms = np.linalg.norm(protos.data, axis=1)
    bad = np.flatnonzero(norms < 1e-8)
    if bad.size:
        rng = np.random.default_rng(seed)
        fresh = rng.standard_normal((bad.size, protos.shape[1]))
        protos.data[bad] = fresh / np.linalg.norm(fresh, axis=1, keepdims=True)
    return int(bad.size)


def intra_loss(z, protos, psi, labels) -> Tensor:
    """Per-sample psi_y * (1 - cos(z_i, c_y)) for a batch z: [N, D]."""
    z = ad.as_tensor(z)
    protos = ad.as_tensor(protos)
    labels = np.asarray(labels)
    onehot = _onehot(labels, protos.shape[0])
    centers = ad.matmul(Tensor(onehot), protos)
    cos = ad.cosine_sim(z, centers, axis=-1)
    # constant shift snaps round-off around 1 so aligned pairs give exactly 0
    near = np.abs(1.0 - cos.data) <= 8 * np.finfo(np.float64).eps
    cos = ad.add(cos, np.where(near, 1.0 - cos.data, 0.0))
    return ad.mul(1.0 - cos, np.asarray(psi)[labels - 1])


@dataclass
class InterResult:
    loss: Tensor
    skipped: int


def inter_loss(z, labels, phi, tau: float = 0.1) -> InterResult:
    """Per-anchor log sum_{j != i} phi[y_i, y_j] exp(cos(z_i, z_j) / tau).

    Evaluated as a weighted log-sum-exp shifted by max_j(log w_ij + s_ij).
    Anchors with no positive-weight partner contribute 0 and are counted.
    """
    z = ad.as_tensor(z)
    labels = np.asarray(labels)
    n = z.shape[0]
    phi = np.asarray(phi, dtype=np.float64)
    w = phi[np.ix_(labels - 1, labels - 1)].copy()
    np.fill_diagonal(w, 0.0)
    live = w > 0
    skip = ~live.any(axis=1)

    zn = ad.l2norm(z, axis=-1)
    logits = ad.mul(ad.matmul(zn, ad.transpose(zn)), 1.0 / tau)
    with np.errstate(divide="ignore"):
        shifted = np.where(live, np.log(np.where(live, w, 1.0)) + logits.data, -np.inf)
    m = np.where(skip, 0.0, shifted.max(axis=1))
    # rows with zero mass get sum 0 + 1, so log gives exactly 0
    e = ad.exp(ad.sub(logits, np.repeat(m[:, None], n, axis=1)))
    mass = ad.tsum(ad.mul(e, w), axis=1) + skip.astype(np.float64)
    per_anchor = ad.log(mass) + m
    return InterResult(per_anchor, int(skip.sum()))


@dataclass
class AGCACLResult:
    loss: Tensor
    intra: np.ndarray
    inter: np.ndarray
    skipped: int


def agcacl_total(z, labels, protos, alpha, phi, psi, tau: float = 0.1) -> AGCACLResult:
    """(1/N) sum_i alpha_{y_i} (intra_i + inter_i)."""
    labels = np.asarray(labels)
    intra = intra_loss(z, protos, psi, labels)
    inter = inter_loss(z, labels, phi, tau)
    weights = np.asarray(alpha, dtype=np.float64)[labels - 1]
    total = ad.mean(ad.mul(intra + inter.loss, weights))
    return AGCACLResult(total, intra.data.copy(), inter.loss.data.copy(), inter.skipped)


def combined_objective(focal, contrastive) -> Tensor:
    """Equal-weight sum; refuses non-finite inputs."""
    focal, contrastive = ad.as_tensor(focal), ad.as_tensor(contrastive)
    if not (np.isfinite(focal.data).all() and np.isfinite(contrastive.data).all()):
        raise FloatingPointError("non-finite loss component")
    return ad.add(ad.mul(focal, 1.0), ad.mul(contrastive, 1.0))

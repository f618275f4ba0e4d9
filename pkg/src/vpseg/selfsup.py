"""Auxiliary contrastive objective: projection heads, the per-sample memory
bank, the noise-contrastive loss, and the cluster-discrimination loss.

Embeddings are L2-normalized 1-D tensors of width D.  The bank stores one
moving-averaged embedding per sample id; entries move only at epoch
boundaries, while new ids are inserted directly when first seen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


class InvalidTauError(Exception):
    """Temperature must be strictly positive."""


class UnknownSampleError(Exception):
    """Sample id absent from the memory bank."""


class EmptyBankError(Exception):
    """The memory bank holds no entries."""


class UnfittedClustersError(Exception):
    """Cluster centroids have not been fitted yet."""


class TooFewSamplesError(Exception):
    """k-means needs at least k samples."""


class PatchCountMismatchError(Exception):
    """Patch feature count does not match the jigsaw grid."""


class NormalizationDegenerateError(Exception):
    """Cannot L2-normalize a (near-)zero vector."""


def normalize(vec: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """L2-normalize; degenerate zero-norm inputs raise instead of returning noise."""
    if float(torch.linalg.vector_norm(vec.detach())) < eps:
        raise NormalizationDegenerateError("zero-norm embedding")
    return vec / torch.linalg.vector_norm(vec)


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.cosine_similarity(a.reshape(1, -1), b.reshape(1, -1), dim=1).squeeze(0)


class MemoryBank:
    """Per-sample embedding store with momentum updates at epoch boundaries."""

    def __init__(self, momentum: float = 0.5):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {momentum}")
        self.momentum = momentum
        self.entries: dict[str, torch.Tensor] = {}
        self.epoch_counter = 0
        self._pending: dict[str, torch.Tensor] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self.entries

    def get(self, sample_id: str) -> torch.Tensor:
        if not self.entries:
            raise EmptyBankError("memory bank is empty")
        if sample_id not in self.entries:
            raise UnknownSampleError(f"sample {sample_id!r} not in bank")
        return self.entries[sample_id]

    def insert(self, sample_id: str, emb: torch.Tensor) -> None:
        self.entries[sample_id] = normalize(emb.detach().clone())

    def update(self, sample_id: str, emb: torch.Tensor) -> None:
        """Moving-average update: m <- normalize(momentum*m + (1-momentum)*new)."""
        new = normalize(emb.detach().clone())
        if sample_id not in self.entries:
            self.entries[sample_id] = new
            return
        old = self.entries[sample_id]
        mixed = self.momentum * old + (1.0 - self.momentum) * new
        self.entries[sample_id] = normalize(mixed)

    def record(self, sample_id: str, emb: torch.Tensor) -> None:
        """Stash this epoch's embedding; applied at the next ``end_epoch``."""
        self._pending[sample_id] = emb.detach().clone()

    def end_epoch(self) -> None:
        for sample_id in sorted(self._pending):
            self.update(sample_id, self._pending[sample_id])
        self._pending.clear()
        self.epoch_counter += 1

    def sample_negatives(self, sample_id: str, count: int,
                         rng: np.random.Generator) -> list[str]:
        pool = sorted(i for i in self.entries if i != sample_id)
        if not pool:
            return []
        take = min(count, len(pool))
        picks = rng.choice(len(pool), size=take, replace=False)
        return [pool[int(i)] for i in picks]

    def state_dict(self) -> dict:
        return {
            "ids": sorted(self.entries),
            "vectors": torch.stack([self.entries[i] for i in sorted(self.entries)])
            if self.entries else torch.zeros(0),
            "momentum": self.momentum,
            "epoch_counter": self.epoch_counter,
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "MemoryBank":
        bank = cls(momentum=state["momentum"])
        bank.epoch_counter = int(state["epoch_counter"])
        for i, sample_id in enumerate(state["ids"]):
            bank.entries[sample_id] = state["vectors"][i].clone()
        return bank


def h_posterior(pos_sim, neg_sims, tau: float) -> torch.Tensor:
    """Posterior of the positive pair against the negative similarities:
    exp(pos/tau) / (exp(pos/tau) + sum exp(neg/tau)), computed via a
    log-sum-exp shift."""
    if tau <= 0:
        raise InvalidTauError(f"tau must be > 0, got {tau}")
    pos = torch.as_tensor(pos_sim, dtype=torch.float64).reshape(())
    negs = torch.as_tensor(list(neg_sims) if not torch.is_tensor(neg_sims) else neg_sims,
                           dtype=torch.float64).reshape(-1)
    logits = torch.cat([pos.reshape(1), negs]) / tau
    return torch.exp(pos / tau - torch.logsumexp(logits, dim=0))


def _log_h(pos: torch.Tensor, neg_logits: torch.Tensor, tau: float) -> torch.Tensor:
    logits = torch.cat([pos.reshape(1) / tau, neg_logits])
    return pos / tau - torch.logsumexp(logits, dim=0)


def _log_one_minus_h(pos: torch.Tensor, neg_logits: torch.Tensor, tau: float) -> torch.Tensor:
    # 1 - h = sum(exp(neg)) / (exp(pos) + sum(exp(neg))), both sides as LSE
    all_logits = torch.cat([pos.reshape(1) / tau, neg_logits])
    return torch.logsumexp(neg_logits, dim=0) - torch.logsumexp(all_logits, dim=0)


def nce_loss(img_emb: torch.Tensor, patch_emb: torch.Tensor, bank: MemoryBank,
             sample_id: str, negatives: list[str], tau: float) -> torch.Tensor:
    """Contrastive loss over the bank positive and sampled bank negatives.

    Each branch (image embedding, then patch embedding) scores its positive
    pair against the shared negative similarity list and penalizes every
    negative pair:
    0.5 * [-log h(emb, m_I) - sum_neg log(1 - h(m_neg, emb))] summed over
    both branches, with cosine similarity throughout.
    """
    if tau <= 0:
        raise InvalidTauError(f"tau must be > 0, got {tau}")
    m_i = bank.get(sample_id)
    neg_vecs = [bank.get(n) for n in negatives]

    def branch_loss(emb: torch.Tensor) -> torch.Tensor:
        pos = cosine(emb, m_i)
        if not neg_vecs:
            return -_log_h(pos, emb.new_zeros(0).double(), tau)
        neg_sims = torch.stack([cosine(emb, v) for v in neg_vecs])
        neg_logits = neg_sims / tau
        loss = -_log_h(pos, neg_logits, tau)
        for j in range(len(neg_vecs)):
            loss = loss - _log_one_minus_h(neg_sims[j], neg_logits, tau)
        return loss

    return 0.5 * branch_loss(img_emb) + 0.5 * branch_loss(patch_emb)


@dataclass
class ClusterModel:
    """Matched k-means centroids of image and patch embeddings.

    Patch centroid ``j`` is the patch-space cluster greedily matched (by
    centroid cosine) to image cluster ``j``.
    """

    image_centroids: torch.Tensor
    patch_centroids: torch.Tensor
    k: int

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if not torch.isfinite(self.image_centroids).all() \
                or not torch.isfinite(self.patch_centroids).all():
            raise ValueError("centroids must be finite")


def lloyd_kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
                 tol: float = 1e-4, max_iters: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Plain Lloyd iterations with seeded distinct-point init.

    Returns (centroids (k, D), assignments (n,)).  Empty clusters are reseeded
    with the point farthest from its centroid.
    """
    n = points.shape[0]
    if k > n:
        raise TooFewSamplesError(f"k={k} > {n} samples")
    points = points.astype(np.float64)
    centroids = points[rng.choice(n, size=k, replace=False)].copy()
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        new_centroids = centroids.copy()
        for j in range(k):
            members = points[assign == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
            else:
                worst = int(d2[np.arange(n), assign].argmax())
                new_centroids[j] = points[worst]
                assign[worst] = j
        shift = float(np.abs(new_centroids - centroids).max())
        centroids = new_centroids
        if shift < tol:
            break
    return centroids, assign


def _match_clusters(image_centroids: np.ndarray, patch_centroids: np.ndarray) -> np.ndarray:
    """Greedy max-cosine matching of patch clusters onto image clusters,
    ties broken by cluster index."""
    def unit(m):
        return m / np.maximum(np.linalg.norm(m, axis=1, keepdims=True), 1e-12)

    sims = unit(image_centroids) @ unit(patch_centroids).T
    k = image_centroids.shape[0]
    order = np.zeros(k, dtype=np.int64)
    used = set()
    for i in range(k):
        best, best_sim = -1, -np.inf
        for j in range(k):
            if j in used:
                continue
            if sims[i, j] > best_sim:
                best, best_sim = j, sims[i, j]
        order[i] = best
        used.add(best)
    return order


def fit_clusters(bank: MemoryBank, patch_embs_by_id: dict[str, torch.Tensor],
                 k: int, rng: np.random.Generator) -> ClusterModel:
    """k-means the bank's image embeddings and the patch embeddings
    separately, then align patch clusters to image clusters."""
    if not bank.entries:
        raise EmptyBankError("cannot fit clusters on an empty bank")
    ids = sorted(i for i in bank.entries if i in patch_embs_by_id)
    if k > len(ids):
        raise TooFewSamplesError(f"k={k} > {len(ids)} samples with both embeddings")
    img = np.stack([bank.entries[i].detach().cpu().numpy() for i in ids]).astype(np.float64)
    patch = np.stack([patch_embs_by_id[i].detach().cpu().numpy() for i in ids]).astype(np.float64)
    img_centroids, _ = lloyd_kmeans(img, k, rng)
    patch_centroids, _ = lloyd_kmeans(patch, k, rng)
    order = _match_clusters(img_centroids, patch_centroids)
    return ClusterModel(
        image_centroids=torch.from_numpy(img_centroids),
        patch_centroids=torch.from_numpy(patch_centroids[order]),
        k=k,
    )


def pld_loss(img_embs: list[torch.Tensor] | torch.Tensor,
             patch_embs: list[torch.Tensor] | torch.Tensor,
             clusters: ClusterModel | None, tau: float) -> torch.Tensor:
    """Cross-modal cluster discrimination.

    Each sample is assigned the image-space cluster nearest (by cosine) to its
    image embedding; the image embedding is then scored against the patch
    centroids and the patch embedding against the image centroids, both as
    cross-entropy over softmaxed cosine/tau logits against that assignment.
    """
    if clusters is None:
        raise UnfittedClustersError("cluster model has not been fitted")
    if tau <= 0:
        raise InvalidTauError(f"tau must be > 0, got {tau}")
    img = torch.stack(list(img_embs)) if not torch.is_tensor(img_embs) else img_embs
    patch = torch.stack(list(patch_embs)) if not torch.is_tensor(patch_embs) else patch_embs
    if img.shape != patch.shape:
        raise PatchCountMismatchError(
            f"image and patch embedding stacks differ: {img.shape} vs {patch.shape}")

    def cos_matrix(embs: torch.Tensor, centroids: torch.Tensor) -> torch.Tensor:
        c = centroids.to(embs.dtype)
        e = embs / torch.linalg.vector_norm(embs, dim=1, keepdim=True).clamp_min(1e-12)
        cn = c / torch.linalg.vector_norm(c, dim=1, keepdim=True).clamp_min(1e-12)
        return e @ cn.T

    with torch.no_grad():
        assigned = cos_matrix(img, clusters.image_centroids).argmax(dim=1)
    img_ce = F.cross_entropy(cos_matrix(img, clusters.patch_centroids) / tau, assigned)
    patch_ce = F.cross_entropy(cos_matrix(patch, clusters.image_centroids) / tau, assigned)
    return 0.5 * img_ce + 0.5 * patch_ce

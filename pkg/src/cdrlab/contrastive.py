"""Similarity functions and InfoNCE-family losses.

Scores enter every loss as log-scores ("logits"): the positive score of a
kind is ``exp(logit)``. DotExp/Bilinear are exponentiated by definition;
NegL2 and Cosine raw values are exponentiated so they can sit inside the
ratio of sums. Temperature is 1.
"""

from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

KINDS = ("dotexp", "bilinear", "negl2", "cosine")


class ContrastiveError(ValueError):
    pass


class DomainContractError(ContrastiveError):
    """A same-domain batch contained items rendered under different domains."""


def _check_kind(kind: str) -> None:
    if kind not in KINDS:
        raise ContrastiveError(f"unknown similarity kind {kind!r}; expected one of {KINDS}")


def similarity_logits(preds, labels, kind: str, w=None) -> Tensor:
    """(N, M) log-scores between N predictions and M labels."""
    _check_kind(kind)
    p = ad.as_tensor(preds)
    y = ad.as_tensor(labels)
    if p.ndim != 2 or y.ndim != 2 or p.shape[1] != y.shape[1]:
        raise ContrastiveError(f"similarity: dimension mismatch between {p.shape} and {y.shape}")
    if kind == "dotexp":
        return p @ y.T
    if kind == "bilinear":
        if w is None:
            raise ContrastiveError("bilinear similarity needs a weight matrix")
        w = ad.as_tensor(w)
        if w.shape != (p.shape[1], p.shape[1]):
            raise ContrastiveError(f"bilinear weight must be {p.shape[1]}x{p.shape[1]}, got {w.shape}")
        return p @ w @ y.T
    if kind == "negl2":
        diff = p.reshape(p.shape[0], 1, p.shape[1]) - y.reshape(1, y.shape[0], y.shape[1])
        return -(diff * diff).sum(axis=2)
    pn = p / ad.l2norm(p, axis=1)
    yn = y / ad.l2norm(y, axis=1)
    return pn @ yn.T


def similarity_matrix(preds, labels, kind: str, w=None, stabilize: bool = False) -> np.ndarray:
    """Positive score matrix; entry (i, j) scores prediction i against label j.

    With ``stabilize`` each row's maximum log-score is subtracted before
    exponentiation, which rescales rows and leaves every InfoNCE ratio intact.
    """
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ContrastiveError(f"similarity_matrix: preds {p.shape} and labels {y.shape} differ")
    with ad.no_grad():
        raw = similarity_logits(p, y, kind, w).data
    if stabilize:
        raw = raw - raw.max(axis=1, keepdims=True)
    return np.exp(raw)


def info_nce(scores) -> float:
    """Mean over rows of ``-log(S_ii / sum_j S_ij)`` for a positive square matrix."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] < 1:
        raise ContrastiveError(f"score matrix must be square and non-empty, got {s.shape}")
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise ContrastiveError("score matrix entries must be positive and finite")
    diag = np.diag(s)
    return float(np.mean(np.log(s.sum(axis=1)) - np.log(diag)))


def info_nce_logits(logits, mask=None) -> Tensor:
    """InfoNCE over a log-score matrix with positives on the diagonal."""
    logits = ad.as_tensor(logits)
    return ad.softmax_cross_entropy(logits, np.arange(logits.shape[0]), mask)


def mi_lower_bound(loss: float, n: int) -> float:
    if n < 1:
        raise ContrastiveError("N must be >= 1")
    return math.log(n) - float(loss)


def _paired(preds, labels, op: str) -> tuple[Tensor, Tensor]:
    p, y = ad.as_tensor(preds), ad.as_tensor(labels)
    if p.shape[0] != y.shape[0]:
        raise ContrastiveError(f"{op}: {p.shape[0]} predictions but {y.shape[0]} labels")
    return p, y


def cdr_loss(preds, labels, kind: str = "dotexp", w=None) -> Tensor:
    """Contrastive domain randomization loss.

    ``preds`` come from observations under each item's own domain, ``labels``
    from the same states re-rendered under independently resampled domains.
    """
    p, y = _paired(preds, labels, "cdr_loss")
    return info_nce_logits(similarity_logits(p, y, kind, w))


def naive_dr_loss(preds, labels, kind: str = "dotexp", w=None) -> Tensor:
    """Per-item domain randomization: each label shares its prediction's domain."""
    p, y = _paired(preds, labels, "naive_dr_loss")
    return info_nce_logits(similarity_logits(p, y, kind, w))


def same_domain_loss(preds, labels, kind: str = "dotexp", domains: Sequence | None = None, w=None) -> Tensor:
    """InfoNCE over a batch whose items all share one domain.

    ``domains`` lists the domain of every item; a batch mixing domains is
    rejected.
    """
    p, y = _paired(preds, labels, "same_domain_loss")
    if domains is not None:
        domains = list(domains)
        if len(domains) != p.shape[0]:
            raise DomainContractError(f"{len(domains)} domains for {p.shape[0]} items")
        first = domains[0]
        if any(d != first for d in domains[1:]):
            raise DomainContractError("same_domain_loss: batch items were rendered under different domains")
    return info_nce_logits(similarity_logits(p, y, kind, w))


def uncontrolled_candidate_mask(horizons: int, batch: int, within_sequence: bool = True) -> np.ndarray:
    """(K, B, K*B) mask of admissible candidates for each (horizon, row).

    Candidates for row i at horizon k are the horizon-k labels of every
    sequence (cross-sequence negatives) and, with ``within_sequence``, row i's
    labels at the other horizons (negatives from other time steps).
    """
    mask = np.zeros((horizons, batch, horizons * batch), dtype=bool)
    rows = np.arange(batch)
    for k in range(horizons):
        mask[k, :, k * batch:(k + 1) * batch] = True
        if within_sequence:
            for k2 in range(horizons):
                mask[k, rows, k2 * batch + rows] = True
    return mask


def uncontrolled_candidates(horizons: int, batch: int, within_sequence: bool = True) -> int:
    return batch + (horizons - 1 if within_sequence else 0)


def cdr_uncontrolled_loss(preds, labels, kind: str = "bilinear", w=None,
                          within_sequence_negatives: bool = True) -> Tensor:
    """Multi-horizon loss averaged over horizons.

    ``preds[k]`` and ``labels[k]`` are (B, d) for horizon k+1; labels come
    from intervened renderings of the future frames.
    """
    p_list = [ad.as_tensor(p) for p in preds]
    y_list = [ad.as_tensor(y) for y in labels]
    if len(p_list) != len(y_list) or not p_list:
        raise ContrastiveError(f"cdr_uncontrolled_loss: {len(p_list)} prediction horizons but {len(y_list)} label horizons")
    k_count = len(p_list)
    b = p_list[0].shape[0]
    if any(p.shape[0] != b for p in p_list) or any(y.shape[0] != b for y in y_list):
        raise ContrastiveError("cdr_uncontrolled_loss: inconsistent batch sizes across horizons")
    all_labels = ad.concat(y_list, axis=0)
    mask = uncontrolled_candidate_mask(k_count, b, within_sequence_negatives)
    rows = np.arange(b)
    total = None
    for k in range(k_count):
        logits = similarity_logits(p_list[k], all_labels, kind, w)
        term = ad.softmax_cross_entropy(logits, k * b + rows, mask[k])
        total = term if total is None else total + term
    return total * (1.0 / k_count)

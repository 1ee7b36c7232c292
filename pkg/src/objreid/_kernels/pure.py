"""Pure numpy reference implementations of the hot kernels.

Semantics here are the contract; the compiled backend must match them
(exactly for integer outputs, to float64 round-off for the rest).
"""

from collections import deque

import numpy as np

BACKEND = "pure"

_UNSET = -2
_NOISE = -1


def _canonical_labels(labels):
    """Renumber clusters by their smallest member index; noise stays -1."""
    out = np.full(labels.shape[0], -1, dtype=np.int64)
    firsts = {}
    for i, lab in enumerate(labels):
        if lab >= 0 and lab not in firsts:
            firsts[lab] = i
    order = sorted(firsts, key=lambda lab: firsts[lab])
    remap = {lab: k for k, lab in enumerate(order)}
    for i, lab in enumerate(labels):
        if lab >= 0:
            out[i] = remap[lab]
    return out


def dbscan_labels(points, eps, min_pts):
    """Classic DBSCAN on 3D points.

    Core point: >= min_pts neighbors within eps (self-inclusive). Seeds are
    scanned in ascending index and expansion is FIFO over ascending-index
    neighbor lists, so border points claimed by two clusters go to the one
    reached first; cluster ids are then renumbered by smallest member index.
    Returns int64 labels, -1 for noise.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    eps2 = float(eps) * float(eps)
    neighbor_lists = [np.flatnonzero(d2[i] <= eps2) for i in range(n)]

    labels = np.full(n, _UNSET, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != _UNSET:
            continue
        if neighbor_lists[i].shape[0] < min_pts:
            labels[i] = _NOISE
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            k = queue.popleft()
            if neighbor_lists[k].shape[0] < min_pts:
                continue  # border point: claimed but not expanded
            for j in neighbor_lists[k]:
                if labels[j] == _NOISE:
                    labels[j] = cluster
                elif labels[j] == _UNSET:
                    labels[j] = cluster
                    queue.append(int(j))
        cluster += 1
    return _canonical_labels(labels)


def points_in_box_count(points, center, dims, yaw):
    """Points with box-frame coordinates within +-dims/2 on every axis
    (boundary inclusive, so the count is monotone in box size)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    c = np.cos(yaw)
    s = np.sin(yaw)
    rel = pts - np.asarray(center, dtype=np.float64)
    local = np.empty_like(rel)
    local[:, 0] = c * rel[:, 0] + s * rel[:, 1]
    local[:, 1] = -s * rel[:, 0] + c * rel[:, 1]
    local[:, 2] = rel[:, 2]
    half = np.asarray(dims, dtype=np.float64) / 2.0
    return int(np.all(np.abs(local) <= half, axis=1).sum())


def supcon_loss_grad(z, labels, tau, apply_log=True):
    """Supervised-contrastive loss over a batch of embeddings.

    loss = mean over anchors i with >=1 positive of
        -(1/|P(i)|) sum_{p in P(i)} [ log ] exp(z_i.z_p / tau) / sum_{j != i} exp(z_i.z_j / tau)
    with the log present by default; apply_log=False evaluates the plain
    softmax-ratio variant for comparison. Row log-sum-exps subtract the row
    max for stability. Returns (loss, d loss / d z, n_anchors).
    """
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels)
    n = z.shape[0]
    s = (z @ z.T) / tau
    np.fill_diagonal(s, -np.inf)
    m = s.max(axis=1)
    e = np.exp(s - m[:, None])
    np.fill_diagonal(e, 0.0)
    denom = e.sum(axis=1)
    sigma = e / denom[:, None]

    pos = labels[:, None] == labels[None, :]
    np.fill_diagonal(pos, False)
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    n_anchors = int(anchors.sum())
    if n_anchors == 0:
        return 0.0, np.zeros_like(z), 0

    posf = pos.astype(np.float64)
    safe_np = np.where(anchors, n_pos, 1).astype(np.float64)
    if apply_log:
        log_denom = m + np.log(denom)
        per_anchor = -(posf * np.where(np.isfinite(s), s, 0.0)).sum(axis=1) / safe_np + log_denom
        loss = float(per_anchor[anchors].mean())
        g = sigma - posf / safe_np[:, None]
    else:
        ratio_sum = (posf * sigma).sum(axis=1)
        per_anchor = -ratio_sum / safe_np
        loss = float(per_anchor[anchors].mean())
        g = -(sigma / safe_np[:, None]) * (posf - ratio_sum[:, None])
    g[~anchors, :] = 0.0
    g /= n_anchors
    grad = (g @ z + g.T @ z) / tau
    return loss, grad, n_anchors


def rank_stats(rel):
    """Average precision and 1-based first-hit rank of a ranked relevance
    vector; first_hit is 0 when there is no relevant item."""
    rel = np.asarray(rel, dtype=bool)
    hits = np.flatnonzero(rel)
    if hits.shape[0] == 0:
        return 0.0, 0
    ranks = hits + 1.0
    ap = float((np.arange(1, hits.shape[0] + 1) / ranks).mean())
    return ap, int(hits[0] + 1)

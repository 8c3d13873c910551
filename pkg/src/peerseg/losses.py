"""Segmentation losses and cross-view pseudo labels.

Cell-level objective.  Every supervised term is cross entropy plus the
Lovasz softmax loss over one scan's covered cells, and scan losses are
averaged over the scan set, so each of the four terms (per view: ground
truth on labelled scans, peer pseudo labels on unlabelled scans) is
normalized by its set size and its cell count.

Lovasz softmax.  For each class c present in the targets, let
p_i = prob(class c at cell i) and fg_i = [target_i == c].  Sort the hinge
errors e_i = |fg_i - p_i| in decreasing order and take the inner product
with the discrete gradient of the Jaccard loss's Lovasz extension,

    grad_j = J(fg_sorted[:j]) - J(fg_sorted[:j-1]),
    J(prefix) = 1 - intersection / union  over that prefix,

then average over the present classes.  The sorted order and the grad
weights are fixed at their forward values, so gradients flow only through
the errors; on hard 0/1 predictions the value reduces exactly to
1 - Jaccard per present class.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .projection import CategoricalGrid, cross_transfer


def log_softmax(logits: Tensor) -> Tensor:
    """Row-wise log softmax; the max shift is a forward-value constant."""
    shift = ad.sub(logits, logits.data.max(axis=1, keepdims=True))
    lse = ad.log(ad.tsum(ad.exp(shift), axis=1, keepdims=True))
    return ad.sub(shift, lse)


def softmax_probs(logits: Tensor) -> Tensor:
    return ad.exp(log_softmax(logits))


def cross_entropy_loss(logits: Tensor, targets) -> Tensor:
    """Mean negative log likelihood of integer targets over cells (rows)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.shape[0] != targets.shape[0]:
        raise ValueError("logits and targets disagree on cell count")
    if targets.shape[0] == 0:
        warnings.warn("cross_entropy_loss over an empty cell set", RuntimeWarning)
        return Tensor(0.0)
    if targets.size and (targets.min() < 0 or targets.max() >= logits.data.shape[1]):
        raise ValueError("target id outside the class range")
    picked = ad.take_per_row(log_softmax(logits), targets)
    return ad.mul(ad.mean(picked), -1.0)


def _lovasz_weights(fg_sorted: np.ndarray) -> np.ndarray:
    """Discrete gradient of the Jaccard loss along the sorted error prefix."""
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax_loss(probs: Tensor, targets) -> Tensor:
    """Lovasz extension of the Jaccard loss, averaged over present classes."""
    targets = np.asarray(targets, dtype=np.int64)
    if probs.data.shape[0] != targets.shape[0]:
        raise ValueError("probs and targets disagree on cell count")
    if targets.shape[0] == 0:
        warnings.warn("lovasz_softmax_loss over an empty cell set", RuntimeWarning)
        return Tensor(0.0)
    present = np.unique(targets)
    terms = []
    for c in present:
        fg = (targets == c).astype(np.float64)
        p_c = ad.take_per_row(probs, np.full(targets.shape[0], c, dtype=np.int64))
        errors = ad.detached_sign_abs(ad.sub(fg, p_c))
        order = np.argsort(-errors.data, kind="stable")
        weights = _lovasz_weights(fg[order])
        terms.append(ad.tsum(ad.mul(ad.take_rows(errors, order), weights)))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(present))


def combined_cell_loss(logits: Tensor, targets, ce_weight=1.0, lovasz_weight=1.0) -> Tensor:
    """The per-scan supervised objective: weighted CE + Lovasz softmax."""
    ce = cross_entropy_loss(logits, targets)
    lov = lovasz_softmax_loss(softmax_probs(logits), targets)
    return ad.add(ad.mul(ce, ce_weight), ad.mul(lov, lovasz_weight))


def make_pseudo_labels(range_probs: CategoricalGrid, voxel_probs: CategoricalGrid,
                       range_img, voxel_grid):
    """Swap soft predictions across views -> hard labels + confidence each way.

    Returns (pseudo_for_range, pseudo_for_voxel): the range view is
    supervised by the voxel view's moved predictions and vice versa.  Built
    entirely from detached numpy arrays, so no gradient can reach either
    producing network.
    """
    pseudo_for_range = cross_transfer(voxel_probs, voxel_grid, range_img)
    pseudo_for_voxel = cross_transfer(range_probs, range_img, voxel_grid)
    return pseudo_for_range, pseudo_for_voxel


def scan_set_loss(pairs, ce_weight=1.0, lovasz_weight=1.0) -> Tensor:
    """Mean of combined_cell_loss over (logits, targets) pairs, one per scan."""
    if not pairs:
        return Tensor(0.0)
    total = None
    for logits, targets in pairs:
        term = combined_cell_loss(logits, targets, ce_weight, lovasz_weight)
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / len(pairs))


def set_supervised_loss(logits: Tensor, targets, slices,
                        ce_weight=1.0, lovasz_weight=1.0) -> Tensor:
    """Batched equivalent of scan_set_loss on concatenated cells.

    ``logits`` stacks every scan's covered cells; ``slices`` lists each
    scan's (start, stop) row range and ``targets`` aligns with the rows.
    Equal (up to float association) to averaging combined_cell_loss over
    the scans, but built from a handful of fused graph ops.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if not slices:
        return Tensor(0.0)
    num_scans = len(slices)
    logp = log_softmax(logits)

    # cross entropy: one weighted gather, weight 1/(num_scans * cells_in_scan)
    ce_w = np.empty(targets.shape[0])
    for start, stop in slices:
        ce_w[start:stop] = 1.0 / (num_scans * max(stop - start, 1))
    picked = ad.take_per_row(logp, targets)
    ce = ad.mul(ad.tsum(ad.mul(picked, ce_w)), -1.0)

    # lovasz: one flat gather over every (scan, present class) segment
    probs = ad.exp(logp)
    rows_parts, cols_parts, fg_parts, segments = [], [], [], []
    for start, stop in slices:
        seg_targets = targets[start:stop]
        for c in np.unique(seg_targets):
            rows_parts.append(np.arange(start, stop))
            cols_parts.append(np.full(stop - start, c, dtype=np.int64))
            fg_parts.append((seg_targets == c).astype(np.float64))
            segments.append((start, stop, int(c)))
    if not segments:
        return ad.mul(ce, ce_weight)
    rows = np.concatenate(rows_parts)
    cols = np.concatenate(cols_parts)
    errors = ad.detached_sign_abs(ad.sub(np.concatenate(fg_parts), ad.take_at(probs, rows, cols)))

    # per-segment descending sort and lovasz weights, fused into one gather
    perm = np.empty(rows.shape[0], dtype=np.int64)
    weights = np.empty(rows.shape[0])
    present_per_scan = {}
    for start, stop, _ in segments:
        present_per_scan[start] = present_per_scan.get(start, 0) + 1
    off = 0
    for (start, stop, c), fg_seg in zip(segments, fg_parts):
        n = stop - start
        local = np.argsort(-errors.data[off:off + n], kind="stable")
        perm[off:off + n] = off + local
        scale = 1.0 / (num_scans * present_per_scan[start])
        weights[off:off + n] = _lovasz_weights(fg_seg[local]) * scale
        off += n
    lov = ad.tsum(ad.mul(ad.take_rows(errors, perm), weights))

    return ad.add(ad.mul(ce, ce_weight), ad.mul(lov, lovasz_weight))


def dual_view_loss(range_labelled, range_pseudo, voxel_labelled, voxel_pseudo,
                   ce_weight=1.0, lovasz_weight=1.0, pseudo_weight=1.0):
    """The two-view objective: per view, labelled term + pseudo-label term.

    Each argument is a list of (logits Tensor, integer targets) pairs, one
    entry per scan over that scan's covered cells.  Returns
    (total Tensor, components dict of detached floats); the total always
    equals the sum of the four reported components (pseudo terms scaled by
    pseudo_weight).
    """
    parts = {
        "range_labelled": scan_set_loss(range_labelled, ce_weight, lovasz_weight),
        "range_pseudo": ad.mul(scan_set_loss(range_pseudo, ce_weight, lovasz_weight),
                               pseudo_weight),
        "voxel_labelled": scan_set_loss(voxel_labelled, ce_weight, lovasz_weight),
        "voxel_pseudo": ad.mul(scan_set_loss(voxel_pseudo, ce_weight, lovasz_weight),
                               pseudo_weight),
    }
    total = None
    for term in parts.values():
        total = term if total is None else ad.add(total, term)
    return total, {k: float(v.data) for k, v in parts.items()}

"""LEEP transferability: classification score, pixel-level segmentation
score, and the per-pixel transferability map.

A *dummy field* is the source model's softmax output on target images,
shaped ``[N, C_s, H, W]``; labels are ``[N, H, W]`` target classes. Natural
logarithms throughout. Image order is canonicalized before any reduction so
that permuting the images cannot change a single bit of the results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError

MIX_FLOOR = 1e-12
MODES = ("global", "per-location")


@dataclass
class EmpiricalJoint:
    """Empirical joint ``P(y, z)`` and conditional ``P(y | z)``, both ``[C_t, C_s]``.

    Columns whose dummy marginal is zero carry ``valid=False`` and an all-zero
    conditional column.
    """

    joint: np.ndarray
    conditional: np.ndarray
    valid: np.ndarray
    count: int

    @property
    def marginal(self) -> np.ndarray:
        return self.joint.sum(axis=0)


@dataclass
class TransferabilityMap:
    values: np.ndarray
    mode: str
    num_images: int
    source_classes: int
    target_classes: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def mean(self) -> float:
        return float(self.values.mean())


def _infer_classes(labels: np.ndarray, num_classes: int | None) -> int:
    if num_classes is None:
        return int(labels.max()) + 1 if labels.size else 1
    return int(num_classes)


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = np.argwhere((labels < 0) | (labels >= num_classes))[0]
        raise ValidationError(f"label {labels[tuple(bad)]} at {tuple(int(v) for v in bad)} outside [0, {num_classes})")
    return labels.astype(np.intp, copy=False)


def _check_field(dummy: np.ndarray, labels: np.ndarray) -> None:
    if dummy.ndim != 4:
        raise ShapeError(f"dummy field must be [N,C_s,H,W], got {dummy.shape}")
    n, _, h, w = dummy.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels {labels.shape} do not match dummy field {dummy.shape}")


def _canonical(dummy: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reorder instances along axis 0 by their byte content."""
    if len(dummy) < 2:
        return dummy, labels
    keys = [
        np.ascontiguousarray(dummy[i]).tobytes() + np.ascontiguousarray(labels[i], dtype="<i8").tobytes()
        for i in range(len(dummy))
    ]
    order = sorted(range(len(keys)), key=keys.__getitem__)
    return dummy[order], labels[order]


def _joint_from_instances(probs: np.ndarray, labels: np.ndarray, num_target: int) -> EmpiricalJoint:
    """``probs`` is ``[M, C_s]``, ``labels`` is ``[M]``."""
    m = len(labels)
    if m == 0:
        raise ValidationError("empirical joint needs at least one instance")
    onehot = np.zeros((m, num_target))
    onehot[np.arange(m), labels] = 1.0
    joint = (onehot.T @ probs) / m
    marg = joint.sum(axis=0)
    valid = marg > 0
    cond = np.zeros_like(joint)
    cond[:, valid] = joint[:, valid] / marg[valid]
    return EmpiricalJoint(joint, cond, valid, m)


def empirical_joint(
    dummy: np.ndarray,
    labels: np.ndarray,
    num_target_classes: int | None = None,
    pixel_subset=None,
) -> EmpiricalJoint:
    """Pool ``P(y, z)`` over every (image, pixel) instance, or only over the
    pixel coordinates ``(row, col)`` listed in ``pixel_subset``."""
    dummy = np.asarray(dummy, dtype=np.float64)
    labels = np.asarray(labels)
    _check_field(dummy, labels)
    ct = _infer_classes(labels, num_target_classes)
    labels = _check_labels(labels, ct)
    dummy, labels = _canonical(dummy, labels)
    if pixel_subset is not None:
        coords = sorted({(int(r), int(c)) for r, c in pixel_subset})
        if not coords:
            raise ValidationError("empirical joint needs at least one instance (empty pixel subset)")
        rows, cols = np.array(coords).T
        probs = dummy[:, :, rows, cols].transpose(0, 2, 1).reshape(-1, dummy.shape[1])
        labs = labels[:, rows, cols].reshape(-1)
    else:
        probs = dummy.transpose(0, 2, 3, 1).reshape(-1, dummy.shape[1])
        labs = labels.reshape(-1)
    return _joint_from_instances(probs, labs, ct)


def _log_mixture(probs: np.ndarray, labels: np.ndarray, conditional: np.ndarray) -> np.ndarray:
    """``log(sum_z P(y|z) theta_z)`` per instance; ``probs`` is ``[M, C_s]``."""
    mix = np.einsum("mz,mz->m", conditional[labels], probs)
    return np.log(np.clip(mix, MIX_FLOOR, 1.0))


def leep_classification(dummies, labels, num_target_classes: int | None = None) -> float:
    """Average log-likelihood of the expected empirical predictor.

    >>> leep_classification([[0.5, 0.5], [0.5, 0.5]], [0, 1])  # doctest: +ELLIPSIS
    -0.693147...
    """
    probs = np.asarray(dummies, dtype=np.float64)
    labs = np.asarray(labels)
    if probs.ndim != 2 or labs.shape != (len(probs),):
        raise ShapeError(f"dummies {probs.shape} and labels {labs.shape} disagree")
    ct = _infer_classes(labs, num_target_classes)
    labs = _check_labels(labs, ct)
    probs4, labs3 = _canonical(probs[:, :, None, None], labs[:, None, None])
    probs, labs = probs4[:, :, 0, 0], labs3[:, 0, 0]
    ej = _joint_from_instances(probs, labs, ct)
    return float(_log_mixture(probs, labs, ej.conditional).sum() / len(labs))


def _pixel_logmix(dummy: np.ndarray, labels: np.ndarray, conditional: np.ndarray) -> np.ndarray:
    """``[N, H, W]`` log-mixtures under one shared conditional."""
    n, cs, h, w = dummy.shape
    probs = dummy.transpose(0, 2, 3, 1).reshape(-1, cs)
    return _log_mixture(probs, labels.reshape(-1), conditional).reshape(n, h, w)


def leep_image(dummy: np.ndarray, labels: np.ndarray, conditional: EmpiricalJoint) -> float:
    """Pixel-level LEEP: per-image sum of pixel log-mixtures, averaged over images."""
    dummy = np.asarray(dummy, dtype=np.float64)
    labels = np.asarray(labels)
    _check_field(dummy, labels)
    ct, cs = conditional.conditional.shape
    if dummy.shape[1] != cs:
        raise ShapeError(f"dummy field has {dummy.shape[1]} source classes, conditional expects {cs}")
    labels = _check_labels(labels, ct)
    dummy, labels = _canonical(dummy, labels)
    logmix = _pixel_logmix(dummy, labels, conditional.conditional)
    return float(np.sort(logmix.reshape(-1)).sum() / len(dummy))


def transferability_map(
    dummy: np.ndarray,
    labels: np.ndarray,
    mode: str = "global",
    num_target_classes: int | None = None,
) -> TransferabilityMap:
    """Per-pixel LEEP ``t[j, k] = mean_i log(sum_z P(y|z) theta_z)`` at (j, k).

    ``global`` pools one conditional over all pixels of all images;
    ``per-location`` estimates a separate conditional from the N instances at
    each pixel, falling back to the global column where a local dummy
    marginal is zero.
    """
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    dummy = np.asarray(dummy, dtype=np.float64)
    labels = np.asarray(labels)
    _check_field(dummy, labels)
    n, cs, h, w = dummy.shape
    if n < 1:
        raise ValidationError("transferability map needs at least one image")
    ct = _infer_classes(labels, num_target_classes)
    labels = _check_labels(labels, ct)
    dummy, labels = _canonical(dummy, labels)
    glob = _joint_from_instances(dummy.transpose(0, 2, 3, 1).reshape(-1, cs), labels.reshape(-1), ct)
    if mode == "global":
        logmix = _pixel_logmix(dummy, labels, glob.conditional)
    else:
        onehot = np.zeros((n, ct, h, w))
        np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
        joint = np.einsum("iyjk,izjk->yzjk", onehot, dummy) / n
        marg = joint.sum(axis=0)
        local = marg > 0
        cond = np.where(local[None], joint / np.where(local, marg, 1.0)[None], glob.conditional[:, :, None, None])
        picked = np.take_along_axis(cond[None], labels[:, None, None], axis=1)[:, 0]  # [N, C_s, H, W]
        mix = np.einsum("izjk,izjk->ijk", picked, dummy)
        logmix = np.log(np.clip(mix, MIX_FLOOR, 1.0))
    values = np.sort(logmix, axis=0).sum(axis=0) / n
    return TransferabilityMap(values, mode, n, cs, ct)

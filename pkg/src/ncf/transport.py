"""Closed-form Gaussian color transfer between pixel distributions.

The transfer matrix solves transfer @ cov_src @ transfer.T == cov_dst in
closed form via symmetric square roots; applying it is a per-pixel affine
map in Lab space. Covariances everywhere carry a small ridge (COV_RIDGE)
so flat color regions stay well conditioned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COV_RIDGE = 1e-4


class NotSPD(ValueError):
    """Matrix is not symmetric positive definite."""


class EmptyMask(ValueError):
    """Pixel selection is empty."""


@dataclass(frozen=True)
class Moments:
    """Mean (3,) and ridge-regularized covariance (3, 3) of Lab pixels."""

    mean: np.ndarray
    cov: np.ndarray


def image_moments(img, mask=None) -> Moments:
    """Population mean/covariance of (H, W, 3) pixels, plus the ridge.

    `mask` optionally selects a boolean pixel subset.
    """
    img = np.asarray(img, dtype=np.float64)
    pixels = img.reshape(-1, 3) if mask is None else img[np.asarray(mask, bool)]
    if pixels.shape[0] == 0:
        raise EmptyMask("no pixels selected")
    mean = pixels.mean(axis=0)
    centered = pixels - mean
    cov = (centered.T @ centered) / pixels.shape[0]
    return Moments(mean=mean, cov=cov + COV_RIDGE * np.eye(3))


def spd_sqrt(mat) -> np.ndarray:
    """Symmetric square root of an SPD matrix via eigendecomposition."""
    mat = np.asarray(mat, dtype=np.float64)
    asym = np.linalg.norm(mat - mat.T)
    if asym > 1e-9 * max(np.linalg.norm(mat), 1e-300):
        raise NotSPD(f"asymmetry {asym:.3e}")
    eigval, eigvec = np.linalg.eigh(mat)
    if eigval.min() <= 0.0:
        raise NotSPD(f"non-positive eigenvalue {eigval.min():.3e}")
    root = (eigvec * np.sqrt(eigval)) @ eigvec.T
    return 0.5 * (root + root.T)


def mk_transfer(src: Moments, dst: Moments) -> np.ndarray:
    """Closed-form optimal linear map between Gaussian surrogates.

    Returns the SPD matrix
      cov_src^(-1/2) (cov_src^(1/2) cov_dst cov_src^(1/2))^(1/2) cov_src^(-1/2)
    which pushes the source covariance onto the destination covariance.
    """
    root = spd_sqrt(src.cov)
    eigval, eigvec = np.linalg.eigh(root)
    root_inv = (eigvec / eigval) @ eigvec.T
    inner = spd_sqrt(root @ dst.cov @ root)
    transfer = root_inv @ inner @ root_inv
    transfer = 0.5 * (transfer + transfer.T)
    if np.linalg.eigvalsh(transfer).min() <= 0.0:
        raise NotSPD("transfer matrix lost positivity")
    return transfer


def mk_transfer_many(src: Moments, dst_covs) -> np.ndarray:
    """mk_transfer against one source for a stack of destination covariances.

    Returns (n, 3, 3). Inputs are expected ridge-regularized, so the
    per-matrix SPD validation of mk_transfer is skipped; eigenvalues are
    floored at zero before the square root to keep stray rounding from
    producing NaN. Matches mk_transfer up to floating point reassociation.
    """
    dst_covs = np.asarray(dst_covs, dtype=np.float64)
    root = spd_sqrt(src.cov)
    eigval, eigvec = np.linalg.eigh(root)
    root_inv = (eigvec / eigval) @ eigvec.T
    inner = root @ dst_covs @ root
    inner = 0.5 * (inner + np.swapaxes(inner, -1, -2))
    w, v = np.linalg.eigh(inner)
    scaled = v * np.sqrt(np.clip(w, 0.0, None))[..., None, :]
    roots = scaled @ np.swapaxes(v, -1, -2)
    transfers = root_inv @ roots @ root_inv
    return 0.5 * (transfers + np.swapaxes(transfers, -1, -2))


def apply_transfer(img, transfer, mu_src, mu_dst) -> np.ndarray:
    """Per-pixel affine recoloring: transfer @ (pixel - mu_src) + mu_dst.

    Operates in Lab; no gamut handling here (that happens on conversion
    back to RGB).
    """
    img = np.asarray(img, dtype=np.float64)
    transfer = np.asarray(transfer, dtype=np.float64)
    flat = img.reshape(-1, 3)
    # x @ T.T + (mu_dst - mu_src @ T.T) rather than (x - mu_src) @ T.T +
    # mu_dst: with T = I and equal means the offset is exactly zero, so
    # the identity map returns the input bit for bit
    offset = np.asarray(mu_dst, np.float64) - np.asarray(mu_src, np.float64) @ transfer.T
    out = flat @ transfer.T + offset
    return out.reshape(img.shape)

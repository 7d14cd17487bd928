"""Deterministic PCA projection of latent vectors for domain visualisation."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError

STAGES = ("pre_encoder", "post_encoder")


def pca_project(vectors, out_dim=2):
    """Project centred rows onto the top ``out_dim`` covariance eigenvectors.

    Each component's sign is fixed so that its first nonzero entry is positive.
    All-identical input gives all-zero coordinates (with a warning).
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise ContractError("pca_project expects a 2-D array")
    n, width = X.shape
    if n < out_dim or out_dim > width:
        raise ContractError(f"need >= {out_dim} samples and width >= {out_dim}, got {X.shape}")
    Xc = X - X.mean(axis=0)
    if not np.any(Xc):
        warnings.warn("degenerate input: all vectors identical, returning zero coordinates", RuntimeWarning, stacklevel=2)
        return np.zeros((n, out_dim))
    cov = Xc.T @ Xc / n
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:out_dim]
    comps = vecs[:, order]
    for j in range(out_dim):
        nz = np.flatnonzero(np.abs(comps[:, j]) > 1e-12)
        if nz.size and comps[nz[0], j] < 0:
            comps[:, j] = -comps[:, j]
    return Xc @ comps


@dataclass
class ProjectionExport:
    coords: np.ndarray
    k: np.ndarray
    stage: str
    truth: np.ndarray | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractError(f"stage must be one of {STAGES}")
        if len(self.coords) != len(self.k):
            raise ContractError("coordinate count must equal sample count")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "k"] + (["truth_domain"] if self.truth is not None else []))
            for i in range(len(self.k)):
                row = [repr(float(self.coords[i, 0])), repr(float(self.coords[i, 1])), int(self.k[i])]
                if self.truth is not None:
                    row.append(int(self.truth[i]))
                w.writerow(row)
        return Path(path)

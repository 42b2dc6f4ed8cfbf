"""Mixed-latent analysis: plane distances, contribution coefficients,
sibling-plane rankings, the loss-scale sweep and PCA export.

A predicted latent at a branching step is examined against the plane
spanned by the embedding rows of the two candidate children. The distance
to that plane is ranked against every vocabulary pair, and the projection
coefficients decide which sibling dominates the mixture.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateInputError
from .reasoner import Reasoner
from .trees import route_prompt, sibling_pairs
from .vocab import Vocabulary

_DEGENERATE_RATIO = 1e-10


@dataclass
class PlaneRankRecord:
    sample_id: int
    step: int
    distance: float
    percentile: float
    alpha: float
    beta: float
    correct_major: bool


# ---------------------------------------------------------------- geometry

def _gram_solve(p: np.ndarray, l0: np.ndarray, l1: np.ndarray):
    g00 = float(l0 @ l0)
    g11 = float(l1 @ l1)
    g01 = float(l0 @ l1)
    det = g00 * g11 - g01 * g01
    largest = max(g00, g11)
    if largest <= 0 or det < _DEGENERATE_RATIO * largest * largest:
        raise DegenerateInputError(
            "plane basis is (near-)collinear: smallest Gram eigenvalue below "
            f"{_DEGENERATE_RATIO:g} of the largest"
        )
    b0 = float(p @ l0)
    b1 = float(p @ l1)
    alpha = (b0 * g11 - b1 * g01) / det
    beta = (b1 * g00 - b0 * g01) / det
    return alpha, beta


def project_coefficients(p, l0, l1):
    """(alpha, beta) with alpha*l0 + beta*l1 equal to p's projection."""
    p = np.asarray(p, dtype=np.float64)
    return _gram_solve(p, np.asarray(l0, dtype=np.float64),
                       np.asarray(l1, dtype=np.float64))


def plane_distance(p, l0, l1) -> float:
    """Euclidean distance from p to span{l0, l1}."""
    p = np.asarray(p, dtype=np.float64)
    l0 = np.asarray(l0, dtype=np.float64)
    l1 = np.asarray(l1, dtype=np.float64)
    alpha, beta = _gram_solve(p, l0, l1)
    residual = p - alpha * l0 - beta * l1
    return float(np.sqrt(residual @ residual))


def all_pair_distances(p, table: np.ndarray):
    """Distances from p to every vocabulary-pair plane.

    Returns (pair index arrays i, j, distances, excluded_count); degenerate
    pairs are dropped from the arrays.
    """
    p = np.asarray(p, dtype=np.float64)
    table = np.asarray(table, dtype=np.float64)
    v = len(table)
    gram = table @ table.T
    dots = table @ p
    ii, jj = np.triu_indices(v, k=1)
    g00 = gram[ii, ii]
    g11 = gram[jj, jj]
    g01 = gram[ii, jj]
    det = g00 * g11 - g01 * g01
    largest = np.maximum(g00, g11)
    good = (largest > 0) & (det >= _DEGENERATE_RATIO * largest * largest)
    excluded = int((~good).sum())
    ii, jj, g00, g11, g01, det = (a[good] for a in (ii, jj, g00, g11, g01, det))
    b0 = dots[ii]
    b1 = dots[jj]
    alpha = (b0 * g11 - b1 * g01) / det
    beta = (b1 * g00 - b0 * g01) / det
    dist_sq = p @ p - (alpha * b0 + beta * b1)
    return ii, jj, np.sqrt(np.maximum(dist_sq, 0.0)), excluded


def rank_sibling_plane(p, table: np.ndarray, sibling_pair):
    """Percentile rank of the sibling-pair plane among all vocabulary pairs.

    Returns (percentile, excluded_count); rank 1 is the closest plane.
    """
    i, j = sorted(sibling_pair)
    ii, jj, dists, excluded = all_pair_distances(p, table)
    match = (ii == i) & (jj == j)
    if not match.any():
        raise DegenerateInputError("sibling pair is degenerate or missing")
    d_pair = float(dists[match][0])
    rank = 1 + int((dists < d_pair).sum())
    percentile = rank / len(dists) * 100.0
    return percentile, excluded


# ---------------------------------------------------------------- tree statistics

def analyze_tree_chains(reasoner: Reasoner, samples, vocab: Vocabulary,
                        chunk: int = 128):
    """PlaneRankRecords for every branching step of every sample.

    Latents come from real rollouts; the plane at step s is spanned by the
    embedding rows of the two children of the previous route node.
    """
    table = reasoner.embedding.data.astype(np.float64)
    norms = np.linalg.norm(table, axis=-1)
    records: list = []
    skipped = 0
    by_len: dict = {}
    for idx, s in enumerate(samples):
        by_len.setdefault(len(s.route), []).append(idx)
    for route_len, indices in sorted(by_len.items()):
        prompts = np.stack([route_prompt(samples[i], vocab) for i in indices])
        for lo in range(0, len(indices), chunk):
            sel = indices[lo:lo + chunk]
            looped = reasoner.rollout_batch(prompts[lo:lo + chunk], route_len)
            for row, idx in enumerate(sel):
                sample = samples[idx]
                pairs = sibling_pairs(sample)
                for step, (chosen, other) in enumerate(pairs, start=1):
                    p = looped[row, step]
                    i0 = vocab.id(chosen)
                    i1 = vocab.id(other)
                    try:
                        alpha, beta = project_coefficients(p, table[i0], table[i1])
                        dist = plane_distance(p, table[i0], table[i1])
                        pct, _ = rank_sibling_plane(p, table, (i0, i1))
                    except DegenerateInputError:
                        skipped += 1
                        continue
                    correct = abs(alpha) * norms[i0] > abs(beta) * norms[i1]
                    records.append(PlaneRankRecord(
                        sample_id=idx, step=step, distance=float(dist),
                        percentile=float(pct), alpha=float(alpha),
                        beta=float(beta), correct_major=bool(correct)))
    return records, skipped


def major_contributor_rate(records) -> float:
    if not records:
        raise ConfigError("no analyzable steps")
    return float(np.mean([r.correct_major for r in records]))


def contributor_rate(reasoner: Reasoner, samples, vocab: Vocabulary,
                     chunk: int = 128) -> float:
    """Correct-major-contributor rate only; skips the pairwise ranking.

    Fast enough to run as a training-time probe.
    """
    table = reasoner.embedding.data.astype(np.float64)
    norms = np.linalg.norm(table, axis=-1)
    flags = []
    by_len: dict = {}
    for idx, s in enumerate(samples):
        by_len.setdefault(len(s.route), []).append(idx)
    for route_len, indices in sorted(by_len.items()):
        prompts = np.stack([route_prompt(samples[i], vocab) for i in indices])
        for lo in range(0, len(indices), chunk):
            sel = indices[lo:lo + chunk]
            looped = reasoner.rollout_batch(prompts[lo:lo + chunk], route_len)
            for row, idx in enumerate(sel):
                for step, (chosen, other) in enumerate(sibling_pairs(samples[idx]),
                                                       start=1):
                    i0 = vocab.id(chosen)
                    i1 = vocab.id(other)
                    try:
                        alpha, beta = project_coefficients(
                            looped[row, step], table[i0], table[i1])
                    except DegenerateInputError:
                        continue
                    flags.append(abs(alpha) * norms[i0] > abs(beta) * norms[i1])
    if not flags:
        raise ConfigError("no analyzable steps")
    return float(np.mean(flags))


def mean_rank_percentile(records) -> float:
    if not records:
        raise ConfigError("no analyzable steps")
    return float(np.mean([r.percentile for r in records]))


def write_plane_records_csv(path, records):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "step", "distance", "percentile",
                         "alpha", "beta", "correct_major"])
        for r in records:
            writer.writerow([r.sample_id, r.step, f"{r.distance:.8g}",
                             f"{r.percentile:.6f}", f"{r.alpha:.8g}",
                             f"{r.beta:.8g}", int(r.correct_major)])


# ---------------------------------------------------------------- k sweep

def k_sweep(k_values, make_model, train_fn, probe_fn):
    """Train one run per loss scale from a shared init; probe over steps.

    ``make_model()`` must rebuild the identical starting model each time;
    ``train_fn(model, k, hook)`` runs the latent phase calling
    ``hook(step)``; ``probe_fn(model)`` returns the tracked metric.
    Returns {k: [(step, metric), ...]}.
    """
    curves = {}
    for k in k_values:
        model = make_model()
        history = []

        def hook(step, _model=model, _history=history):
            _history.append((step, probe_fn(_model)))

        train_fn(model, float(k), hook)
        curves[float(k)] = history
    return curves


def write_sweep_csv(path, curves):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "step", "major_contributor_rate"])
        for k in sorted(curves):
            for step, rate in curves[k]:
                writer.writerow([f"{k:g}", step, f"{rate:.6f}"])


# ---------------------------------------------------------------- PCA

def pca_export(vectors: np.ndarray, n_components: int = 2):
    """Principal axes by descending explained variance, via SVD.

    Returns (components, explained_variance, coordinates). Requires the
    centered data to have rank at least ``n_components``.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ConfigError("PCA needs a 2-D array with at least two rows")
    centered = x - x.mean(axis=0, keepdims=True)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(centered.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int((s > tol).sum())
    if rank < n_components:
        raise DegenerateInputError(
            f"data rank {rank} below requested {n_components} components"
        )
    components = vt[:n_components]
    explained = (s[:n_components] ** 2) / (len(x) - 1)
    coords = centered @ components.T
    return components, explained, coords


def write_pca_csv(path, origins, coords):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["origin_tag", "pc1", "pc2"])
        for tag, row in zip(origins, coords):
            writer.writerow([tag, f"{row[0]:.8g}", f"{row[1]:.8g}"])

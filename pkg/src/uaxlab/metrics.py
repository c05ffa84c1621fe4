"""Verification metrics: EER thresholding, match rates, transfer grids.

The decision threshold comes from the train gallery's genuine/imposter
score distributions at the equal error rate and is reused unchanged on the
test gallery. A probe matches a gallery image when their embedding distance
is at most tau (inclusive).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import IdentityDataset

__all__ = [
    "ScoreSet",
    "EvalReport",
    "TransferMatrix",
    "MetricsError",
    "distance",
    "build_scores",
    "compute_eer",
    "gallery_embeddings",
    "match_rates",
    "fmr_against_probe",
    "evaluate_uax",
    "transfer_matrix",
    "histogram_csv",
]

PAIR_BUDGET = 5000


class MetricsError(ValueError):
    """Invalid scores, galleries, or grid inputs."""


@dataclass
class ScoreSet:
    """Distance samples for same-identity and cross-identity pairs."""

    genuine: np.ndarray
    imposter: np.ndarray
    metric: str = "euclidean"

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64)
        self.imposter = np.asarray(self.imposter, dtype=np.float64)
        for name, arr in (("genuine", self.genuine), ("imposter", self.imposter)):
            if arr.ndim != 1 or arr.size == 0:
                raise MetricsError(f"{name} scores must be a nonempty 1-d list")
            if not np.all(np.isfinite(arr)):
                raise MetricsError(f"{name} scores contain non-finite values")
            if self.metric == "euclidean" and arr.min() < 0:
                raise MetricsError(f"{name} euclidean distances must be >= 0")
        if self.metric not in ("euclidean", "cosine"):
            raise MetricsError(f"unsupported metric {self.metric!r}")


@dataclass
class EvalReport:
    """Match rates of one probe pair (seed image vs crafted image)."""

    gallery_role: str
    threshold: float
    eer: float
    baseline_fmr: float
    uax_fmr: float
    baseline_identity_rate: float
    uax_identity_rate: float

    def __post_init__(self):
        for name in ("eer", "baseline_fmr", "uax_fmr", "baseline_identity_rate", "uax_identity_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise MetricsError(f"{name} = {v} outside [0, 1]")
        if not np.isfinite(self.threshold):
            raise MetricsError("threshold must be finite")


@dataclass
class TransferMatrix:
    """Grid of match rates: rows = crafting model, columns = scoring model."""

    source_ids: list
    target_ids: list
    values: np.ndarray
    iterations: int = 0
    xi: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.source_ids), len(self.target_ids)):
            raise MetricsError(
                f"grid shape {self.values.shape} != "
                f"({len(self.source_ids)}, {len(self.target_ids)})"
            )
        if not np.all(np.isfinite(self.values)):
            raise MetricsError("transfer grid contains non-finite entries")

    def to_csv(self) -> str:
        lines = ["source\\target," + ",".join(self.target_ids)]
        for i, sid in enumerate(self.source_ids):
            row = ",".join(f"{v:.6f}" for v in self.values[i])
            lines.append(f"{sid},{row}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# distances and score sets
# ---------------------------------------------------------------------------

def distance(a: np.ndarray, b: np.ndarray, metric: str = "euclidean") -> float:
    """Euclidean or cosine distance between two embedding vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricsError(f"embeddings must be equal-length vectors, got {a.shape} vs {b.shape}")
    if metric == "euclidean":
        return float(np.sqrt(np.sum((a - b) ** 2)))
    if metric == "cosine":
        na, nb = np.sqrt(np.sum(a * a)), np.sqrt(np.sum(b * b))
        if na == 0.0 or nb == 0.0:
            raise MetricsError("cosine distance undefined for zero vectors")
        return float(1.0 - np.dot(a, b) / (na * nb))
    raise MetricsError(f"unsupported metric {metric!r}")


def build_scores(
    model, data: IdentityDataset, pair_budget: int = PAIR_BUDGET, seed: int = 0,
    metric: str = "euclidean",
) -> ScoreSet:
    """Sample genuine and imposter pairs and score their distances.

    Pairs are drawn uniformly without replacement from the full pair
    population, up to pair_budget per side; deterministic given seed.
    """
    if pair_budget < 1:
        raise MetricsError("pair_budget must be positive")
    x, y, _names = data.as_arrays()
    n = x.shape[0]
    genuine_pairs = []
    imposter_pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            (genuine_pairs if y[i] == y[j] else imposter_pairs).append((i, j))
    if not genuine_pairs:
        raise MetricsError("no genuine pairs: need an identity with >= 2 images")
    if not imposter_pairs:
        raise MetricsError("no imposter pairs: need >= 2 identities")

    rng = np.random.Generator(np.random.PCG64(seed))

    def pick(pairs: list) -> list:
        if len(pairs) <= pair_budget:
            return pairs
        idx = rng.choice(len(pairs), size=pair_budget, replace=False)
        return [pairs[k] for k in sorted(idx)]

    genuine_pairs = pick(genuine_pairs)
    imposter_pairs = pick(imposter_pairs)

    embs = {}
    needed = sorted({k for pair in genuine_pairs + imposter_pairs for k in pair})
    for k in needed:
        embs[k] = model.embed(x[k])
    genuine = [distance(embs[i], embs[j], metric) for i, j in genuine_pairs]
    imposter = [distance(embs[i], embs[j], metric) for i, j in imposter_pairs]
    return ScoreSet(genuine=np.asarray(genuine), imposter=np.asarray(imposter), metric=metric)


# ---------------------------------------------------------------------------
# EER
# ---------------------------------------------------------------------------

def _rates_at(scores: ScoreSet, tau: float) -> tuple:
    fmr = float(np.mean(scores.imposter <= tau))
    fnmr = float(np.mean(scores.genuine > tau))
    return fmr, fnmr

def compute_eer(scores: ScoreSet) -> tuple:
    """Threshold minimizing |FMR - FNMR| over all distinct score values.

    Returns (eer, tau) with eer = (FMR + FNMR) / 2 at the chosen tau; ties
    break toward the smaller tau (candidates ascend, improvement is strict).
    """
    candidates = np.unique(np.concatenate([scores.genuine, scores.imposter]))
    best_tau, best_gap, best_eer = None, None, None
    for tau in candidates:
        fmr, fnmr = _rates_at(scores, tau)
        gap = abs(fmr - fnmr)
        if best_gap is None or gap < best_gap:
            best_tau, best_gap, best_eer = float(tau), gap, (fmr + fnmr) / 2.0
    return best_eer, best_tau


# ---------------------------------------------------------------------------
# match rates
# ---------------------------------------------------------------------------

def gallery_embeddings(model, gallery: IdentityDataset) -> tuple:
    """Embed every gallery image once; returns ((N, d) matrix, identity idx).

    Row order is the dataset's canonical order (sorted labels, then image
    index), so repeated calls are bit-identical.
    """
    x, y, _names = gallery.as_arrays()
    embs = np.stack([model.embed(x[i]) for i in range(x.shape[0])])
    return embs, y


def match_rates(
    probe_emb: np.ndarray, embs: np.ndarray, identity_idx: np.ndarray, tau: float,
    metric: str = "euclidean",
) -> tuple:
    """Image- and identity-level match rates of one probe embedding.

    An identity counts as matched when at least one of its images is within
    tau of the probe.
    """
    if not np.isfinite(tau):
        raise MetricsError("threshold must be finite (compute it via compute_eer first)")
    if metric == "euclidean":
        diffs = embs - probe_emb
        d = np.sqrt(np.sum(diffs * diffs, axis=1))
    elif metric == "cosine":
        norms = np.sqrt(np.sum(embs * embs, axis=1))
        pn = np.sqrt(np.sum(probe_emb * probe_emb))
        if pn == 0.0 or np.any(norms == 0.0):
            raise MetricsError("cosine distance undefined for zero vectors")
        d = 1.0 - (embs @ probe_emb) / (norms * pn)
    else:
        raise MetricsError(f"unsupported metric {metric!r}")
    matched = d <= tau
    image_rate = float(np.mean(matched))
    total_ids = int(identity_idx.max()) + 1
    identity_rate = len(np.unique(identity_idx[matched])) / total_ids
    return image_rate, identity_rate


def fmr_against_probe(
    model, probe: np.ndarray, gallery: IdentityDataset, tau: float,
    metric: str = "euclidean",
) -> tuple:
    """Fraction of gallery images (and identities) the probe matches at tau.

    Returns (image_match_rate, per_identity_match_rate). Embeds the whole
    gallery on each call; for repeated probes against one gallery, hold
    :func:`gallery_embeddings` and call :func:`match_rates` directly.
    """
    embs, y = gallery_embeddings(model, gallery)
    return match_rates(model.embed(probe), embs, y, tau, metric)


def evaluate_uax(
    model, artifact, train_gallery: IdentityDataset, test_gallery: IdentityDataset,
    tau: float, eer: float = 0.0, metric: str = "euclidean",
) -> tuple:
    """Score the seed image and the crafted image on both galleries at tau.

    Returns (train EvalReport, test EvalReport). Galleries must be
    identity-disjoint; the baseline probe is x_A and the attack probe is
    x' = clamp(x_A + nu).
    """
    overlap = set(train_gallery.labels) & set(test_gallery.labels)
    if overlap:
        raise MetricsError(f"galleries share identities: {sorted(overlap)[:3]}")
    if not np.isfinite(tau):
        raise MetricsError("threshold must be set before evaluation")

    base_emb = model.embed(artifact.seed_image)
    uax_emb = model.embed(artifact.adversarial_image)
    reports = []
    for gallery in (train_gallery, test_gallery):
        embs, y = gallery_embeddings(model, gallery)
        base_img, base_id = match_rates(base_emb, embs, y, tau, metric)
        uax_img, uax_id = match_rates(uax_emb, embs, y, tau, metric)
        reports.append(
            EvalReport(
                gallery_role=gallery.role,
                threshold=tau,
                eer=eer,
                baseline_fmr=base_img,
                uax_fmr=uax_img,
                baseline_identity_rate=base_id,
                uax_identity_rate=uax_id,
            )
        )
    return reports[0], reports[1]


def transfer_matrix(
    models: dict, artifacts: dict, gallery: IdentityDataset, taus: dict,
    metric: str = "euclidean", iterations: int = 0, xi: float = 0.0,
) -> TransferMatrix:
    """Cross-model grid: artifacts from each source scored on every target.

    ``models`` maps model id to extractor; ``artifacts`` maps source model
    id to a list of its crafted artifacts; ``taus`` maps model id to that
    model's own decision threshold. Entry (i, j) is the mean crafted-image
    match rate of source i's artifacts scored by model j at taus[j].
    """
    if len(models) < 1:
        raise MetricsError("need at least one model")
    source_ids = sorted(artifacts)
    target_ids = sorted(models)
    for sid in source_ids:
        if sid not in models:
            raise MetricsError(f"artifact source {sid!r} has no model")
        if not artifacts[sid]:
            raise MetricsError(f"artifact list for source {sid!r} is empty")
    for tid in target_ids:
        if tid not in taus:
            raise MetricsError(f"no threshold for target model {tid!r}")

    values = np.zeros((len(source_ids), len(target_ids)))
    embedded = {tid: gallery_embeddings(models[tid], gallery) for tid in target_ids}
    for j, tid in enumerate(target_ids):
        embs, y = embedded[tid]
        for i, sid in enumerate(source_ids):
            rates = [
                match_rates(
                    models[tid].embed(art.adversarial_image), embs, y, taus[tid], metric
                )[0]
                for art in artifacts[sid]
            ]
            values[i, j] = float(np.mean(rates))
    return TransferMatrix(
        source_ids=source_ids, target_ids=target_ids, values=values,
        iterations=iterations, xi=xi,
    )


# ---------------------------------------------------------------------------
# histogram export
# ---------------------------------------------------------------------------

def histogram_csv(scores: ScoreSet, uax_scores: np.ndarray | None = None, bins: int = 40) -> str:
    """Fixed-bin score histogram as CSV (bin_lo, bin_hi, counts per class)."""
    if bins < 1:
        raise MetricsError("bins must be positive")
    uax = np.asarray(uax_scores, dtype=np.float64) if uax_scores is not None else np.empty(0)
    allv = np.concatenate([scores.genuine, scores.imposter, uax])
    lo, hi = float(allv.min()), float(allv.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    g_counts, _ = np.histogram(scores.genuine, bins=edges)
    i_counts, _ = np.histogram(scores.imposter, bins=edges)
    u_counts, _ = np.histogram(uax, bins=edges)
    lines = ["bin_lo,bin_hi,genuine_count,imposter_count,uax_count"]
    for k in range(bins):
        lines.append(
            f"{edges[k]:.9g},{edges[k + 1]:.9g},{g_counts[k]},{i_counts[k]},{u_counts[k]}"
        )
    return "\n".join(lines) + "\n"

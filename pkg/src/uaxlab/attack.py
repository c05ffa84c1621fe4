"""Crafting of universal spoofing perturbations.

One perturbation ν is optimized so that x' = clamp(x_A + ν) embeds close to
many gallery images at once: minimize the mean embedding distance to a
random mini-batch per iteration, by SGD on the tanh-reparameterized image,
projecting ν back into the lp ball after every step.

Artifacts serialize as a 16-bit PNG of x' plus a raw float64 ν tensor and a
JSON sidecar carrying shape, budget, config, and the loss trace.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from . import pngio
from .dataset import IdentityDataset

__all__ = [
    "PerturbationBudget",
    "CraftConfig",
    "UaxArtifact",
    "AttackError",
    "apply_perturbation",
    "reparam",
    "reparam_inverse",
    "project",
    "pairwise_loss",
    "batch_loss",
    "craft_uax",
    "save_artifact",
    "load_artifact",
]

BOUNDARY_NUDGE = 1e-6


class AttackError(RuntimeError):
    """Invalid crafting configuration or a poisoned optimization run."""


@dataclass(frozen=True)
class PerturbationBudget:
    """lp ball constraint on the perturbation, on the [0,1] pixel scale."""

    p: float
    xi: float

    def validate(self) -> None:
        if self.p not in (2.0, float("inf")):
            raise AttackError(f"unsupported norm order p={self.p}; use 2 or inf")
        if not self.xi > 0:
            raise AttackError(f"budget radius xi must be > 0, got {self.xi}")

    @property
    def epsilon(self) -> float:
        """8-bit-scale equivalent radius."""
        return 255.0 * self.xi


@dataclass
class CraftConfig:
    """Optimization settings for one crafting run."""

    budget: PerturbationBudget
    iterations: int = 500
    batch_size: int = 32
    learning_rate: float = 0.01
    rng_seed: int = 0
    metric: str = "euclidean"
    stratified: bool = False
    project_every_step: bool = True

    def validate(self) -> None:
        self.budget.validate()
        if self.iterations < 1:
            raise AttackError("iterations must be >= 1")
        if self.batch_size < 1:
            raise AttackError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise AttackError("learning_rate must be positive")
        if self.metric not in ("euclidean", "cosine"):
            raise AttackError(f"unsupported metric {self.metric!r}")


@dataclass
class UaxArtifact:
    """A crafted perturbation with its provenance."""

    seed_image: np.ndarray
    nu: np.ndarray
    config: CraftConfig
    final_loss: float
    loss_trace: list = field(default_factory=list)

    @property
    def adversarial_image(self) -> np.ndarray:
        return apply_perturbation(self.seed_image, self.nu)


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def apply_perturbation(x_a: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """x' = clamp(x_A + nu, 0, 1)."""
    x_a = np.asarray(x_a, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if x_a.shape != nu.shape:
        raise nm.ShapeError(f"shape mismatch: image {x_a.shape} vs perturbation {nu.shape}")
    return np.clip(x_a + nu, 0.0, 1.0)


def reparam(w: np.ndarray) -> np.ndarray:
    """Map unconstrained w into (0,1): x = (tanh(w) + 1) / 2."""
    return (np.tanh(np.asarray(w, dtype=np.float64)) + 1.0) / 2.0


def reparam_inverse(x: np.ndarray, nudge: bool = True) -> np.ndarray:
    """Inverse map w = artanh(2x - 1).

    Pixels at exactly 0 or 1 have no finite preimage; with ``nudge`` they
    are pulled inward by 1e-6 first, otherwise they raise.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.min() < 0.0 or x.max() > 1.0:
        raise AttackError("reparam_inverse: values outside [0, 1]")
    at_edge = (x <= 0.0) | (x >= 1.0)
    if at_edge.any():
        if not nudge:
            raise AttackError("reparam_inverse: values at 0 or 1 require nudging")
        x = np.clip(x, BOUNDARY_NUDGE, 1.0 - BOUNDARY_NUDGE)
    return np.arctanh(2.0 * x - 1.0)


def project(nu: np.ndarray, budget: PerturbationBudget) -> np.ndarray:
    """Euclidean projection of nu onto the closed lp ball of radius xi.

    p=inf: elementwise clamp to [-xi, xi]. p=2: radial scaling when the
    norm exceeds xi. Idempotent bit for bit: re-projecting a projected
    tensor returns it unchanged.
    """
    budget.validate()
    nu = np.asarray(nu, dtype=np.float64)
    if budget.p == float("inf"):
        return np.clip(nu, -budget.xi, budget.xi)
    out = nu.copy()
    norm = np.sqrt(np.sum(out * out))
    # repeat in case one rounding step leaves the norm a few ulps outside
    while norm > budget.xi:
        out *= budget.xi / norm
        norm = np.sqrt(np.sum(out * out))
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _embedding_distance(emb: nm.Tensor, target: nm.Tensor, metric: str) -> nm.Tensor:
    if metric == "euclidean":
        return nm.l2norm(nm.sub(emb, target))
    # cosine distance: 1 - <a,b> / (|a||b|)
    dot = nm.mean(nm.mul(emb, target))
    dot = nm.scale(dot, float(emb.data.size))
    denom = nm.mul(nm.l2norm(emb), nm.l2norm(target))
    if float(denom.data) == 0.0:
        raise AttackError("cosine metric undefined for a zero embedding")
    return nm.sub(nm.Tensor(1.0), nm.div(dot, denom))


def pairwise_loss(model, x_prime, x_j, metric: str = "euclidean") -> nm.Tensor:
    """Embedding distance between a candidate image and one gallery image."""
    x_prime = x_prime if isinstance(x_prime, nm.Tensor) else nm.Tensor(x_prime)
    x_j = x_j if isinstance(x_j, nm.Tensor) else nm.Tensor(x_j)
    emb = model.embed_t(x_prime)
    target = model.embed_t(x_j)
    return _embedding_distance(emb, target, metric)


def batch_loss(model, x_prime, batch, metric: str = "euclidean") -> nm.Tensor:
    """Mean pairwise loss of x_prime against a nonempty image batch."""
    if len(batch) == 0:
        raise AttackError("batch_loss: empty batch")
    x_prime = x_prime if isinstance(x_prime, nm.Tensor) else nm.Tensor(x_prime)
    emb = model.embed_t(x_prime)
    total = None
    for x_j in batch:
        x_j = x_j if isinstance(x_j, nm.Tensor) else nm.Tensor(x_j)
        target = model.embed_t(x_j)
        term = _embedding_distance(emb, target, metric)
        total = term if total is None else nm.add(total, term)
    return nm.scale(total, 1.0 / len(batch))


def _batch_loss_cached(model, emb: nm.Tensor, targets: list, metric: str) -> nm.Tensor:
    # crafting-loop fast path: gallery embeddings precomputed as constants
    total = None
    for target in targets:
        term = _embedding_distance(emb, target, metric)
        total = term if total is None else nm.add(total, term)
    return nm.scale(total, 1.0 / len(targets))


# ---------------------------------------------------------------------------
# crafting loop
# ---------------------------------------------------------------------------

def craft_uax(model, x_a: np.ndarray, train_gallery: IdentityDataset, cfg: CraftConfig) -> UaxArtifact:
    """Optimize one universal perturbation against a training gallery.

    Starts from nu = 0. Each iteration samples a mini-batch from the
    gallery's image pool (uniform over images, or one image per sampled
    identity when cfg.stratified), takes one SGD step on w, recomputes
    nu = reparam(w) - x_A, and projects it back into the budget ball.
    Deterministic given cfg.rng_seed.
    """
    cfg.validate()
    x_a = np.asarray(x_a, dtype=np.float64)
    if tuple(x_a.shape) != tuple(model.spec.input_shape):
        raise nm.ShapeError(
            f"seed image shape {x_a.shape} != model input_shape {tuple(model.spec.input_shape)}"
        )
    pool, pool_y, _names = train_gallery.as_arrays()
    if cfg.batch_size > pool.shape[0]:
        raise AttackError(
            f"batch_size {cfg.batch_size} exceeds gallery image pool ({pool.shape[0]})"
        )

    # gallery embeddings never change during crafting; compute once
    target_embs = [nm.Tensor(model.embed(pool[i])) for i in range(pool.shape[0])]
    by_label: dict[int, list[int]] = {}
    for i, lab in enumerate(pool_y):
        by_label.setdefault(int(lab), []).append(i)
    label_list = sorted(by_label)

    rng = np.random.Generator(np.random.PCG64(cfg.rng_seed))
    w = reparam_inverse(x_a)  # nu = reparam(w) - x_A = 0 up to the edge nudge
    nu = np.zeros_like(x_a)
    loss_trace: list[float] = []

    for it in range(cfg.iterations):
        if cfg.stratified:
            labs = rng.choice(len(label_list), size=cfg.batch_size, replace=True)
            idx = [by_label[label_list[li]][rng.integers(len(by_label[label_list[li]]))] for li in labs]
        else:
            idx = rng.choice(pool.shape[0], size=cfg.batch_size, replace=False)
        batch_targets = [target_embs[i] for i in idx]

        wt = nm.Tensor(w, requires_grad=True)
        try:
            with nm.ComputeGraph() as graph:
                x_prime = nm.scale(nm.add(nm.tanh(wt), nm.Tensor(np.ones_like(w))), 0.5)
                emb = model.embed_t(x_prime)
                loss = _batch_loss_cached(model, emb, batch_targets, cfg.metric)
            grad_w = nm.backpropagate(graph, loss)[wt]
        except nm.NonFiniteError as exc:
            raise AttackError(f"non-finite loss at iteration {it}: {exc}") from None
        loss_trace.append(loss.item())

        w = w - cfg.learning_rate * grad_w
        nu = reparam(w) - x_a
        if cfg.project_every_step or it == cfg.iterations - 1:
            nu = project(nu, cfg.budget)
            # resync w so the next step optimizes from the projected point
            w = reparam_inverse(np.clip(x_a + nu, 0.0, 1.0))

    final_loss = _eval_loss(model, apply_perturbation(x_a, nu), target_embs, cfg.metric)
    return UaxArtifact(
        seed_image=x_a,
        nu=nu,
        config=cfg,
        final_loss=final_loss,
        loss_trace=loss_trace,
    )


def _eval_loss(model, x: np.ndarray, target_embs: list, metric: str) -> float:
    emb = nm.Tensor(model.embed(x))
    total = 0.0
    for target in target_embs:
        total += _embedding_distance(emb, target, metric).item()
    return total / len(target_embs)


# ---------------------------------------------------------------------------
# artifact serialization
# ---------------------------------------------------------------------------

def _budget_to_json(b: PerturbationBudget) -> dict:
    return {"p": "inf" if b.p == float("inf") else "2", "xi": b.xi}


def _budget_from_json(d: dict) -> PerturbationBudget:
    return PerturbationBudget(p=float("inf") if d["p"] == "inf" else 2.0, xi=d["xi"])


def save_artifact(artifact: UaxArtifact, out_dir: str, stem: str = "uax") -> dict:
    """Write x' (16-bit PNG), nu (raw float64), and a JSON sidecar.

    Returns the paths written, keyed by role.
    """
    os.makedirs(out_dir, exist_ok=True)
    x_prime = artifact.adversarial_image
    png_path = os.path.join(out_dir, f"{stem}.png")
    quant = np.round(x_prime * 65535.0).astype(np.uint16)
    pngio.write_png(png_path, quant[:, :, 0] if quant.shape[2] == 1 else quant, bit_depth=16)

    nu_path = os.path.join(out_dir, f"{stem}_nu.f64")
    with open(nu_path, "wb") as fh:
        fh.write(np.ascontiguousarray(artifact.nu, dtype="<f8").tobytes())
    seed_path = os.path.join(out_dir, f"{stem}_seed.f64")
    with open(seed_path, "wb") as fh:
        fh.write(np.ascontiguousarray(artifact.seed_image, dtype="<f8").tobytes())

    cfg = artifact.config
    sidecar = {
        "shape": list(artifact.nu.shape),
        "budget": _budget_to_json(cfg.budget),
        "epsilon_8bit": cfg.budget.epsilon,
        "config": {
            "iterations": cfg.iterations,
            "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate,
            "rng_seed": cfg.rng_seed,
            "metric": cfg.metric,
            "stratified": cfg.stratified,
            "project_every_step": cfg.project_every_step,
        },
        "final_loss": artifact.final_loss,
        "loss_trace": artifact.loss_trace,
        "files": {
            "adversarial_png": os.path.basename(png_path),
            "nu_raw": os.path.basename(nu_path),
            "seed_raw": os.path.basename(seed_path),
        },
    }
    json_path = os.path.join(out_dir, f"{stem}.json")
    with open(json_path, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"png": png_path, "nu": nu_path, "seed": seed_path, "sidecar": json_path}


def load_artifact(sidecar_path: str) -> UaxArtifact:
    """Rebuild an artifact from its sidecar and raw tensors."""
    with open(sidecar_path) as fh:
        sidecar = json.load(fh)
    base = os.path.dirname(sidecar_path)
    shape = tuple(sidecar["shape"])
    count = int(np.prod(shape))

    def read_raw(name: str) -> np.ndarray:
        path = os.path.join(base, sidecar["files"][name])
        with open(path, "rb") as fh:
            buf = fh.read()
        if len(buf) != count * 8:
            raise AttackError(f"raw tensor {path} has {len(buf)} bytes, expected {count * 8}")
        return np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)

    c = sidecar["config"]
    cfg = CraftConfig(
        budget=_budget_from_json(sidecar["budget"]),
        iterations=c["iterations"],
        batch_size=c["batch_size"],
        learning_rate=c["learning_rate"],
        rng_seed=c["rng_seed"],
        metric=c["metric"],
        stratified=c["stratified"],
        project_every_step=c["project_every_step"],
    )
    return UaxArtifact(
        seed_image=read_raw("seed_raw"),
        nu=read_raw("nu_raw"),
        config=cfg,
        final_loss=sidecar["final_loss"],
        loss_trace=list(sidecar["loss_trace"]),
    )

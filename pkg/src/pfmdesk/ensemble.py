"""Fixed-expert ensembles: many variability-differentiated frozen devices
coordinated by a trainable digital router.

The experts are never updated and never differentiated through. Router
training treats each expert's detector outputs as precomputed features of
the input; only the gating parameters (a linear map on the input vector,
softmaxed into expert weights) receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .medium import PfmDesign, PropagationSettings, design_hash
from .training import (
    TrainConfig,
    ToyDataset,
    _dtype,
    cross_entropy,
    cross_entropy_grad,
    detector_logits,
    detector_logits_vjp,
)
from .variability import PerturbationSpec, ReprogrammableMask, finetune_reprogrammable, perturb


class EnsembleError(ValueError):
    pass


@dataclass(frozen=True)
class ExpertPool:
    """Immutable collection of fixed devices sharing facet dimensions."""

    experts: tuple[PfmDesign, ...]
    provenance: dict

    def __post_init__(self):
        if not self.experts:
            raise EnsembleError("pool must contain at least one expert")
        dims = {(e.input_dim, e.output_dim) for e in self.experts}
        if len(dims) != 1:
            raise EnsembleError(f"experts disagree on facet dimensions: {dims}")

    def __len__(self):
        return len(self.experts)

    @property
    def input_dim(self) -> int:
        return self.experts[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.experts[0].output_dim

    def hashes(self) -> list[str]:
        return [design_hash(e) for e in self.experts]


def spawn_ensemble(base: PfmDesign, k: int, spec: PerturbationSpec) -> ExpertPool:
    """k fabrication copies of a base design, perturbed with consecutive
    seeds spec.seed .. spec.seed + k - 1. The base is untouched."""
    if k < 1:
        raise EnsembleError(f"k must be >= 1, got {k}")
    experts = []
    seeds = []
    for i in range(k):
        s = PerturbationSpec(
            sigma=spec.sigma,
            correlation_length=spec.correlation_length,
            dead_voxel_rate=spec.dead_voxel_rate,
            seed=spec.seed + i,
        )
        experts.append(base.with_medium(perturb(base.medium, s)))
        seeds.append(s.seed)
    return ExpertPool(
        experts=tuple(experts),
        provenance={
            "base_hash": design_hash(base),
            "seeds": seeds,
            "perturbation": spec.to_dict(),
        },
    )


def specialize_expert(
    design: PfmDesign,
    dataset: ToyDataset,
    classes: list[int],
    mask: ReprogrammableMask,
    cfg: TrainConfig,
    settings: PropagationSettings,
) -> PfmDesign:
    """Fine-tune a device's reprogrammable voxels on a class subset,
    producing a specialist for those classes."""
    return finetune_reprogrammable(
        design, mask, dataset.restricted_to_classes(classes), cfg, settings
    )


# ---------------------------------------------------------------------------
# Router
# ---------------------------------------------------------------------------

@dataclass
class Router:
    """Softmax gating over experts, linear in the input vector."""

    weights: np.ndarray          # (n_experts, input_dim)
    bias: np.ndarray             # (n_experts,)
    top_k: int | None = None     # None: mix all experts
    diverged: bool = False

    @classmethod
    def uniform(cls, n_experts: int, input_dim: int, top_k: int | None = None) -> "Router":
        return cls(np.zeros((n_experts, input_dim)), np.zeros(n_experts), top_k)

    @property
    def n_experts(self) -> int:
        return self.weights.shape[0]

    def gate_scores(self, vectors: np.ndarray) -> np.ndarray:
        return np.atleast_2d(vectors) @ self.weights.T + self.bias

    def route(self, vectors: np.ndarray) -> np.ndarray:
        """(batch, n_experts) weights: nonnegative, top_k-sparse, sum to 1."""
        s = self.gate_scores(vectors)
        s = s - s.max(axis=1, keepdims=True)
        w = np.exp(s)
        w /= w.sum(axis=1, keepdims=True)
        if self.top_k is not None and self.top_k < self.n_experts:
            order = np.argsort(w, axis=1)
            drop = order[:, : self.n_experts - self.top_k]
            np.put_along_axis(w, drop, 0.0, axis=1)
            w /= w.sum(axis=1, keepdims=True)
        return w


def expert_outputs(
    pool: ExpertPool,
    vectors: np.ndarray,
    settings: PropagationSettings,
    precision: str = "double",
    chunk: int = 128,
) -> np.ndarray:
    """(n_experts, batch, output_dim) raw detector powers; the fixed features
    router training runs on."""
    from .propagation import infer_batch

    vectors = np.atleast_2d(vectors)
    feats = []
    for e in pool.experts:
        parts = [
            infer_batch(vectors[i:i + chunk], e, settings, dtype=_dtype(precision))
            for i in range(0, len(vectors), chunk)
        ]
        feats.append(np.concatenate(parts, axis=0))
    return np.stack(feats)


def _combine(bins: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted expert combination: (E,B,K) bins, (B,E) weights -> (B,K)."""
    return np.einsum("ebk,be->bk", bins, w)


def train_router(
    pool: ExpertPool,
    dataset: ToyDataset,
    cfg: TrainConfig,
    settings: PropagationSettings,
    top_k: int | None = None,
) -> Router:
    """Gradient descent on the gating parameters only.

    Expert outputs are precomputed once and treated as constants; the
    experts stay frozen and non-differentiated throughout. Divergence
    returns the uniform router with ``diverged`` set.
    """
    router = Router.uniform(len(pool), pool.input_dim, top_k)
    if cfg.steps == 0:
        return router
    train_x, train_y = dataset.train_split()
    val_x, val_y = dataset.val_split()
    feats_train = expert_outputs(pool, train_x, settings, cfg.precision)
    feats_val = expert_outputs(pool, val_x, settings, cfg.precision)
    rng = np.random.default_rng(cfg.seed)

    def val_accuracy(r: Router) -> float:
        z = detector_logits(_combine(feats_val, r.route(val_x)), cfg.logit_scale)
        return float(np.mean(np.argmax(z, axis=1) == val_y))

    best = Router(router.weights.copy(), router.bias.copy(), top_k)
    best_acc = val_accuracy(router)
    for step in range(cfg.steps):
        pick = rng.choice(len(train_x), size=min(cfg.batch_size, len(train_x)), replace=False)
        v, labels = train_x[pick], train_y[pick]
        bins = feats_train[:, pick, :]
        # Full-mixture routing during training; sparsity is inference-time.
        s = v @ router.weights.T + router.bias
        s = s - s.max(axis=1, keepdims=True)
        w = np.exp(s)
        w /= w.sum(axis=1, keepdims=True)
        combined = _combine(bins, w)
        z = detector_logits(combined, cfg.logit_scale)
        loss, gz = cross_entropy_grad(z, labels)
        if not np.isfinite(loss):
            failed = Router.uniform(len(pool), pool.input_dim, top_k)
            failed.diverged = True
            return failed
        gy = detector_logits_vjp(combined, cfg.logit_scale, gz)
        gw = np.einsum("bk,ebk->be", gy, bins)
        gs = w * (gw - np.sum(gw * w, axis=1, keepdims=True))
        router.weights -= cfg.learning_rate * (gs.T @ v)
        router.bias -= cfg.learning_rate * gs.sum(axis=0)
        acc = val_accuracy(router)
        if acc > best_acc:
            best_acc = acc
            best = Router(router.weights.copy(), router.bias.copy(), top_k)
    return best


def ensemble_infer(
    pool: ExpertPool,
    router: Router,
    v: np.ndarray,
    settings: PropagationSettings,
    precision: str = "double",
) -> np.ndarray:
    """Router-weighted combination of expert detector outputs for one input."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != pool.input_dim:
        raise EnsembleError(f"input shape {v.shape} != ({pool.input_dim},)")
    if router.n_experts != len(pool):
        raise EnsembleError(
            f"router gates {router.n_experts} experts, pool has {len(pool)}"
        )
    bins = expert_outputs(pool, v[None, :], settings, precision)
    w = router.route(v[None, :])
    return _combine(bins, w)[0]


def evaluate_ensemble(
    pool: ExpertPool,
    router: Router,
    dataset: ToyDataset,
    settings: PropagationSettings,
    logit_scale: float = 10.0,
    precision: str = "double",
) -> dict:
    """Validation metrics plus the top-1 routing fraction per expert."""
    val_x, val_y = dataset.val_split()
    bins = expert_outputs(pool, val_x, settings, precision)
    w = router.route(val_x)
    z = detector_logits(_combine(bins, w), logit_scale)
    top1 = np.argmax(w, axis=1)
    utilization = np.bincount(top1, minlength=len(pool)) / len(val_x)
    return {
        "accuracy": float(np.mean(np.argmax(z, axis=1) == val_y)),
        "loss": cross_entropy(z, val_y),
        "utilization": utilization,
    }


def single_expert_accuracies(
    pool: ExpertPool,
    dataset: ToyDataset,
    settings: PropagationSettings,
    logit_scale: float = 10.0,
    precision: str = "double",
) -> np.ndarray:
    """Validation accuracy of each expert used alone."""
    val_x, val_y = dataset.val_split()
    bins = expert_outputs(pool, val_x, settings, precision)
    accs = []
    for e in range(len(pool)):
        z = detector_logits(bins[e], logit_scale)
        accs.append(float(np.mean(np.argmax(z, axis=1) == val_y)))
    return np.array(accs)

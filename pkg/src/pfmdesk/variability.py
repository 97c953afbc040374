"""Fabrication variability and the two mitigation routes: digital pre/post
compensation around a frozen device, and fine-tuning a small reprogrammable
fraction of its voxels.

Perturbations use counter-based Philox streams keyed on (seed, stream id),
so a given spec produces the same noise field on any platform and under any
parallel execution order. Correlated noise is white noise smoothed by a
separable moving average under wrap boundary, rescaled so the per-voxel
standard deviation equals the requested sigma exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .medium import PfmDesign, PropagationSettings, VoxelMedium, design_hash
from .propagation import (
    StepInstabilityError,
    backward_pass,
    bins_cotangent_to_field,
    encode_batch,
    forward_pass,
    input_gradient,
    readout_batch,
)
from .training import (
    TrainConfig,
    ToyDataset,
    _dtype,
    cross_entropy,
    cross_entropy_grad,
    detector_logits,
    detector_logits_vjp,
)


class VariabilityError(ValueError):
    pass


def _philox(seed: int, stream: int) -> np.random.Generator:
    if seed < 0:
        raise VariabilityError(f"seed must be >= 0, got {seed}")
    return np.random.Generator(np.random.Philox(key=np.array([seed, stream], dtype=np.uint64)))


@dataclass(frozen=True)
class PerturbationSpec:
    """Additive correlated index noise plus catastrophic bright defects."""

    sigma: float = 0.0
    correlation_length: int = 1   # voxels, per axis
    dead_voxel_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise VariabilityError(f"sigma must be >= 0, got {self.sigma}")
        if not 0 <= self.dead_voxel_rate <= 1:
            raise VariabilityError(f"dead_voxel_rate must be in [0,1], got {self.dead_voxel_rate}")
        if self.correlation_length < 1:
            raise VariabilityError(f"correlation_length must be >= 1, got {self.correlation_length}")

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "correlation_length": self.correlation_length,
            "dead_voxel_rate": self.dead_voxel_rate,
            "seed": self.seed,
        }


def perturb(medium: VoxelMedium, spec: PerturbationSpec) -> VoxelMedium:
    """Fabricate one noisy copy of a medium. The original is untouched."""
    if spec.sigma == 0 and spec.dead_voxel_rate == 0:
        return medium
    w = spec.correlation_length
    if w > min(medium.delta_n.shape):
        raise VariabilityError(
            f"correlation_length {w} exceeds smallest grid dimension "
            f"{min(medium.delta_n.shape)}"
        )
    dn = medium.delta_n.copy()
    if spec.sigma > 0:
        noise = _philox(spec.seed, 0).standard_normal(dn.shape)
        if w > 1:
            # Circular moving average: variance drops by exactly w^3.
            noise = uniform_filter(noise, size=w, mode="wrap") * w**1.5
        dn += spec.sigma * noise
    if spec.dead_voxel_rate > 0:
        dead = _philox(spec.seed, 1).random(dn.shape) < spec.dead_voxel_rate
        dn[dead] = medium.delta_n_max
    np.clip(dn, -medium.delta_n_max, medium.delta_n_max, out=dn)
    return medium.replace_delta_n(dn)


# ---------------------------------------------------------------------------
# Digital compensation
# ---------------------------------------------------------------------------

@dataclass
class CompensationStack:
    """Affine maps wrapped around a frozen device.

    The pre map acts on input vectors before encoding; the post map acts on
    the calibrated detector logits (so an identity stack reproduces the
    uncompensated pipeline bit for bit).
    """

    pre_matrix: np.ndarray
    pre_offset: np.ndarray
    post_matrix: np.ndarray
    post_offset: np.ndarray
    trained_on: str = ""     # design content hash
    diverged: bool = False

    @classmethod
    def identity(cls, input_dim: int, output_dim: int, trained_on: str = "") -> "CompensationStack":
        return cls(
            pre_matrix=np.eye(input_dim),
            pre_offset=np.zeros(input_dim),
            post_matrix=np.eye(output_dim),
            post_offset=np.zeros(output_dim),
            trained_on=trained_on,
        )

    def copy(self) -> "CompensationStack":
        return CompensationStack(
            self.pre_matrix.copy(), self.pre_offset.copy(),
            self.post_matrix.copy(), self.post_offset.copy(),
            self.trained_on, self.diverged,
        )

    def pre(self, vectors: np.ndarray) -> np.ndarray:
        return vectors @ self.pre_matrix.T + self.pre_offset

    def post(self, logits: np.ndarray) -> np.ndarray:
        return logits @ self.post_matrix.T + self.post_offset

    def check_dims(self, design: PfmDesign):
        if self.pre_matrix.shape != (design.input_dim, design.input_dim):
            raise VariabilityError(
                f"pre map {self.pre_matrix.shape} does not match input dim {design.input_dim}"
            )
        if self.post_matrix.shape != (design.output_dim, design.output_dim):
            raise VariabilityError(
                f"post map {self.post_matrix.shape} does not match output dim {design.output_dim}"
            )


def compensated_logits(
    design: PfmDesign,
    vectors: np.ndarray,
    settings: PropagationSettings,
    comp: CompensationStack | None,
    logit_scale: float = 10.0,
    precision: str = "double",
    chunk: int = 128,
) -> np.ndarray:
    from .propagation import infer_batch

    v = vectors if comp is None else comp.pre(vectors)
    parts = []
    for start in range(0, len(v), chunk):
        y = infer_batch(v[start:start + chunk], design, settings, dtype=_dtype(precision))
        parts.append(detector_logits(y, logit_scale))
    z = np.concatenate(parts, axis=0)
    return z if comp is None else comp.post(z)


def evaluate(
    design: PfmDesign,
    dataset: ToyDataset,
    settings: PropagationSettings,
    comp: CompensationStack | None = None,
    logit_scale: float = 10.0,
    precision: str = "double",
) -> dict:
    """Accuracy and loss on the validation split, optionally compensated."""
    if comp is not None:
        comp.check_dims(design)
    val_x, val_y = dataset.val_split()
    z = compensated_logits(design, val_x, settings, comp, logit_scale, precision)
    return {
        "accuracy": float(np.mean(np.argmax(z, axis=1) == val_y)),
        "loss": cross_entropy(z, val_y),
    }


def fit_compensation(
    design: PfmDesign,
    dataset: ToyDataset,
    settings: PropagationSettings,
    steps: int = 120,
    learning_rate_pre: float = 0.02,
    learning_rate_post: float = 0.05,
    batch_size: int = 32,
    seed: int = 0,
    logit_scale: float = 10.0,
    precision: str = "single",
    eval_every: int = 5,
    mode: str = "pre_post",
) -> CompensationStack:
    """Train pre/post affine maps by gradient descent through the frozen
    device. The device itself is never updated.

    Returns the stack with the best validation accuracy seen, which includes
    the identity initialization, so compensation can only help or tie. On a
    non-finite loss the identity stack is returned with ``diverged`` set.
    """
    if mode not in ("pre_post", "post"):
        raise VariabilityError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    train_x, train_y = dataset.train_split()
    dhash = design_hash(design)
    stack = CompensationStack.identity(design.input_dim, design.output_dim, trained_on=dhash)
    best = stack.copy()
    best_acc = evaluate(design, dataset, settings, stack, logit_scale, precision)["accuracy"]
    dtype = _dtype(precision)

    def _diverged() -> CompensationStack:
        failed = CompensationStack.identity(
            design.input_dim, design.output_dim, trained_on=dhash
        )
        failed.diverged = True
        return failed

    for step in range(steps):
        pick = rng.choice(len(train_x), size=min(batch_size, len(train_x)), replace=False)
        v, labels = train_x[pick], train_y[pick]
        try:
            v_pre = stack.pre(v)
            amps = encode_batch(v_pre, design, dtype=dtype)
            trace = forward_pass(amps, design.medium, settings, design.wavelength_vacuum)
            y = readout_batch(trace.amp_out, design)
            z = detector_logits(y, logit_scale)
            z_post = stack.post(z)
            loss, gz_post = cross_entropy_grad(z_post, labels)
            if not np.isfinite(loss):
                return _diverged()
            # Post map gradients (acts on logits).
            g_post_matrix = gz_post.T @ z
            g_post_offset = gz_post.sum(axis=0)
            gz = gz_post @ stack.post_matrix
            gy = detector_logits_vjp(y, logit_scale, gz)
            if mode == "pre_post":
                cot = bins_cotangent_to_field(trace.amp_out, design, gy)
                adj = backward_pass(trace, cot)
                g_v = input_gradient(v_pre, design, adj.input_cotangent)
                g_pre_matrix = g_v.T @ v
                g_pre_offset = g_v.sum(axis=0)
                stack.pre_matrix -= learning_rate_pre * g_pre_matrix
                stack.pre_offset -= learning_rate_pre * g_pre_offset
            stack.post_matrix -= learning_rate_post * g_post_matrix
            stack.post_offset -= learning_rate_post * g_post_offset
            if (step + 1) % eval_every == 0 or step == steps - 1:
                acc = evaluate(design, dataset, settings, stack, logit_scale, precision)["accuracy"]
                if acc > best_acc:
                    best_acc, best = acc, stack.copy()
        except StepInstabilityError:
            # A runaway pre map amplified the input past the physical
            # stability bound; same verdict as a non-finite loss.
            return _diverged()
    return best


# ---------------------------------------------------------------------------
# Partial reprogrammability
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReprogrammableMask:
    """The small set of voxels left tunable after fabrication."""

    fraction: float
    indices: np.ndarray       # sorted flat indices into delta_n
    grid_numel: int

    def __post_init__(self):
        expected = round(self.fraction * self.grid_numel)
        if len(self.indices) != expected:
            raise VariabilityError(
                f"mask has {len(self.indices)} voxels, expected "
                f"round({self.fraction} * {self.grid_numel}) = {expected}"
            )
        self.indices.setflags(write=False)

    @classmethod
    def random(cls, medium: VoxelMedium, fraction: float, seed: int = 0) -> "ReprogrammableMask":
        if not 0 <= fraction <= 1:
            raise VariabilityError(f"fraction must be in [0,1], got {fraction}")
        total = medium.delta_n.size
        k = round(fraction * total)
        idx = np.sort(_philox(seed, 2).choice(total, size=k, replace=False))
        return cls(fraction=fraction, indices=idx, grid_numel=total)


def finetune_reprogrammable(
    design: PfmDesign,
    mask: ReprogrammableMask,
    dataset: ToyDataset,
    cfg: TrainConfig,
    settings: PropagationSettings,
    eval_every: int = 5,
) -> PfmDesign:
    """Gradient descent restricted to the masked voxels; every frozen voxel
    stays bit-identical. Returns the best-validation design (the input
    design competes, so fine-tuning can only help or tie)."""
    from .training import accuracy_and_loss, loss_and_gradients

    if mask.fraction > 0.1 + 1e-12:
        raise VariabilityError(
            f"reprogrammable fraction {mask.fraction} exceeds the 0.1 design limit"
        )
    if mask.grid_numel != design.medium.delta_n.size:
        raise VariabilityError(
            f"mask built for {mask.grid_numel} voxels, design has "
            f"{design.medium.delta_n.size}"
        )
    if len(mask.indices) == 0:
        return design
    rng = np.random.default_rng(cfg.seed)
    train_x, train_y = dataset.train_split()
    val_x, val_y = dataset.val_split()
    dn_max = design.medium.delta_n_max

    current = design
    best = design
    best_acc, _ = accuracy_and_loss(
        design, val_x, val_y, settings, cfg.logit_scale, precision=cfg.precision
    )
    for step in range(cfg.steps):
        pick = rng.choice(len(train_x), size=min(cfg.batch_size, len(train_x)), replace=False)
        try:
            lg = loss_and_gradients(
                current, train_x[pick], train_y[pick], settings, cfg.logit_scale, cfg.precision
            )
        except StepInstabilityError:
            break
        if not np.isfinite(lg.loss):
            break
        dn = current.medium.delta_n.copy()
        flat = dn.reshape(-1)
        flat[mask.indices] = np.clip(
            flat[mask.indices] - cfg.learning_rate * lg.grad_delta_n.reshape(-1)[mask.indices],
            -dn_max, dn_max,
        )
        current = current.with_medium(current.medium.replace_delta_n(dn))
        if (step + 1) % eval_every == 0 or step == cfg.steps - 1:
            acc, _ = accuracy_and_loss(
                current, val_x, val_y, settings, cfg.logit_scale, precision=cfg.precision
            )
            if acc > best_acc:
                best_acc, best = acc, current
    return best


# ---------------------------------------------------------------------------
# Sweep output
# ---------------------------------------------------------------------------

SWEEP_CSV_HEADER = "sigma,dead_rate,seed,variant,accuracy,loss"


def sweep_rows_to_csv(rows: list[dict]) -> str:
    """Rows with keys sigma, dead_rate, seed, variant, accuracy, loss."""
    lines = [SWEEP_CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r['sigma']!r},{r['dead_rate']!r},{r['seed']},{r['variant']},"
            f"{r['accuracy']!r},{r['loss']!r}"
        )
    return "\n".join(lines) + "\n"

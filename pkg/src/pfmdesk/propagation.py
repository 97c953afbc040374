"""Split-step beam propagation through a voxel medium, with readout and a
hand-rolled reverse sweep for design gradients.

The forward model is scalar paraxial propagation. Each z substep applies,
in order: a half step of diffraction in the spatial-frequency domain, the
local phase accumulated from the designed index perturbation plus the
intensity-dependent Kerr term, the per-slice gain factor, and a second
diffraction half step. With periodic boundaries and unit gain every factor
is unitary, so power conservation is exact up to floating point and is used
as a standing diagnostic. Under periodic boundaries the trailing and
leading half steps of adjacent substeps are fused into full steps, which
halves the FFT count without changing the operator sequence.

The reverse sweep propagates the cotangent of a real scalar objective,
``a = dL/d(conj(E))``, backwards through the same chain. Diffraction
backpropagates with the conjugate transfer phase; the Kerr phase screen
couples ``a`` and ``conj(a)`` because the accumulated phase depends on the
local intensity. Field slices are checkpointed every ~sqrt(nz) slices and
recomputed segment by segment, keeping memory at O(nx*ny*sqrt(nz)) fields
instead of a full tape.

Compute precision follows the field dtype: complex128 (the default, used by
every oracle and conservation check) or complex64 (roughly 2-4x faster,
used by the desk-scale training loop).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .medium import DesignError, OpticalField, PfmDesign, PropagationSettings, VoxelMedium

MAX_STEP_NL_PHASE = math.pi / 4
DEFAULT_CHECKPOINT_BUDGET = 1 << 30  # bytes


class StepInstabilityError(RuntimeError):
    """Per-step nonlinear phase exceeded the split-step stability bound."""


class CheckpointBudgetError(MemoryError):
    """Reverse sweep would need more checkpoint memory than allowed."""


def _fft_workers() -> int:
    return max(1, int(os.environ.get("PFMDESK_THREADS", "1")))


def _fft2(a):
    return scipy.fft.fft2(a, axes=(-2, -1), workers=_fft_workers())


def _ifft2(a):
    return scipy.fft.ifft2(a, axes=(-2, -1), workers=_fft_workers())


def _cis(theta: np.ndarray) -> np.ndarray:
    """exp(1j*theta) for real theta, via cos/sin (much faster than complex exp)."""
    return np.cos(theta) + 1j * np.sin(theta)


def _absorber_mask(nx: int, ny: int, border_frac: float = 0.125) -> np.ndarray:
    """Separable cos^2 taper to ~0 over the outer border of the grid."""
    def taper(n):
        b = max(1, int(round(n * border_frac)))
        m = np.ones(n)
        ramp = np.sin(0.5 * math.pi * (np.arange(b) + 0.5) / b) ** 2
        m[:b] = ramp
        m[n - b:] = ramp[::-1]
        return m
    return taper(nx)[:, None] * taper(ny)[None, :]


class _StepPlan:
    """Precomputed constants for one propagation run at one dtype."""

    def __init__(self, medium: VoxelMedium, settings: PropagationSettings,
                 wavelength: float, dtype):
        self.medium = medium
        self.settings = settings
        self.wavelength = wavelength
        self.cdtype = np.complex64 if dtype == np.complex64 else np.complex128
        self.rdtype = np.float32 if self.cdtype == np.complex64 else np.float64
        nx, ny, _ = medium.grid_shape
        dx, dy, dz = medium.voxel_pitch
        self.sub = settings.z_steps_per_voxel
        self.dz_sub = dz / self.sub
        self.k0 = 2 * math.pi / wavelength
        kx = 2 * math.pi * np.fft.fftfreq(nx, dx)
        ky = 2 * math.pi * np.fft.fftfreq(ny, dy)
        k_sq = kx[:, None] ** 2 + ky[None, :] ** 2
        spectral_rate = k_sq / (2 * self.k0 * medium.background_index)
        self.half_phase = _cis(-spectral_rate * (self.dz_sub / 2)).astype(self.cdtype)
        self.full_phase = _cis(-spectral_rate * self.dz_sub).astype(self.cdtype)
        self.fused = settings.boundary == "periodic"
        self.mask = (
            None if self.fused else _absorber_mask(nx, ny).astype(self.rdtype)
        )
        self.c2 = (self.k0 * settings.n2 * self.dz_sub) if settings.kerr_enabled else 0.0
        self.gain = medium.gain_per_step
        self._dn32 = medium.delta_n.astype(self.rdtype) if self.rdtype == np.float32 else medium.delta_n
        self._linear_screen_cache: dict[int, np.ndarray] = {}

    # -- elementary operators ------------------------------------------------

    def _diffract(self, amp, transfer):
        return _ifft2(_fft2(amp) * transfer)

    def _diffract_adj(self, a, transfer):
        return _ifft2(_fft2(a) * np.conj(transfer))

    def _theta(self, j: int, intensity):
        if self.c2:
            return (self.k0 * self.dz_sub) * (self._dn32[j] + self.rdtype(self.settings.n2) * intensity)
        return (self.k0 * self.dz_sub) * self._dn32[j]

    def _linear_screen(self, j: int):
        scr = self._linear_screen_cache.get(j)
        if scr is None:
            scr = _cis(self._theta(j, None)).astype(self.cdtype)
            self._linear_screen_cache[j] = scr
        return scr

    def _check_stability(self, j: int, intensity):
        max_nl = self.c2 * float(intensity.max())
        if max_nl > MAX_STEP_NL_PHASE:
            raise StepInstabilityError(
                f"nonlinear phase {max_nl:.3f} rad in slice {j} exceeds the "
                f"{MAX_STEP_NL_PHASE:.3f} rad per-step bound; increase "
                f"z_steps_per_voxel (>= {math.ceil(max_nl / MAX_STEP_NL_PHASE) * self.sub}) "
                f"or reduce input power"
            )

    def _screen(self, amp, j: int, s: int):
        """Index + Kerr phase, plus the per-slice gain on the first substep."""
        if self.c2:
            intensity = amp.real**2 + amp.imag**2
            self._check_stability(j, intensity)
            out = amp * _cis(self._theta(j, intensity))
        else:
            out = amp * self._linear_screen(j)
        if s == 0 and self.gain != 1.0:
            out *= self.rdtype(self.gain)
        return out

    # -- forward -------------------------------------------------------------

    def forward_range(self, amp, j0: int, j1: int, tape: list | None = None):
        """Propagate from the entry plane of slice j0 to that of slice j1.

        ``tape``, when given, collects the pre-phase-screen field of every
        substep in forward order (needed by the reverse sweep).
        """
        if self.fused:
            amp = self._diffract(amp, self.half_phase)
            n_sub = (j1 - j0) * self.sub
            count = 0
            for j in range(j0, j1):
                for s in range(self.sub):
                    if tape is not None:
                        tape.append(amp)
                    amp = self._screen(amp, j, s)
                    count += 1
                    transfer = self.half_phase if count == n_sub else self.full_phase
                    amp = self._diffract(amp, transfer)
            return amp
        for j in range(j0, j1):
            for s in range(self.sub):
                amp = self._diffract(amp, self.half_phase)
                if tape is not None:
                    tape.append(amp)
                amp = self._screen(amp, j, s)
                amp = self._diffract(amp, self.half_phase)
                amp = amp * self.mask
        return amp

    # -- reverse -------------------------------------------------------------

    def backward_range(self, a, j0: int, j1: int, tape: list,
                       grad_dn: np.ndarray):
        """Reverse sweep from the exit of slice j1-1 back to the entry of j0.

        Accumulates into grad_dn (slices j0..j1-1) and returns
        (a_at_entry, grad_gain_contribution).
        """
        grad_gain = 0.0
        steps = [(j, s) for j in range(j0, j1) for s in range(self.sub)]
        if self.fused:
            a = self._diffract_adj(a, self.half_phase)
        for idx in range(len(steps) - 1, -1, -1):
            j, s = steps[idx]
            b = tape[idx]
            if not self.fused:
                a = a * self.mask
                a = self._diffract_adj(a, self.half_phase)
            elif idx != len(steps) - 1:
                a = self._diffract_adj(a, self.full_phase)
            # Recompute the screen outputs for this substep.
            if self.c2:
                intensity = b.real**2 + b.imag**2
                phase = _cis(self._theta(j, intensity))
            else:
                phase = self._linear_screen(j)
            u = b * phase
            if s == 0:
                # u is the pre-gain field, a its post-gain cotangent.
                grad_gain += 2.0 * float(np.sum(np.real(np.conj(a) * u)))
                if self.gain != 1.0:
                    a = a * self.rdtype(self.gain)
            contrib = (2.0 * self.k0 * self.dz_sub) * np.imag(np.conj(u) * a)
            grad_dn[j] += contrib.sum(axis=0) if contrib.ndim == 3 else contrib
            if self.c2:
                jac_bb = phase * (1 + 1j * self.rdtype(self.c2) * intensity)
                a = np.conj(a) * ((1j * self.rdtype(self.c2)) * b * u) + a * np.conj(jac_bb)
            else:
                a = a * np.conj(phase)
            if not self.fused:
                a = self._diffract_adj(a, self.half_phase)
        if self.fused:
            a = self._diffract_adj(a, self.half_phase)
        return a, grad_gain


# ---------------------------------------------------------------------------
# Forward propagation
# ---------------------------------------------------------------------------

def propagate_amplitude(
    amp: np.ndarray,
    medium: VoxelMedium,
    settings: PropagationSettings,
    wavelength: float,
) -> np.ndarray:
    """Propagate a (..., nx, ny) complex amplitude through the whole medium.

    The output dtype follows the input: complex64 stays complex64.
    """
    amp = np.asarray(amp)
    if amp.dtype != np.complex64:
        amp = amp.astype(np.complex128, copy=False)
    plan = _StepPlan(medium, settings, wavelength, amp.dtype)
    out = plan.forward_range(amp, 0, medium.delta_n.shape[0])
    if not np.all(np.isfinite(out)):
        raise DesignError("propagation produced non-finite field values")
    return out


def propagate(
    field: OpticalField, medium: VoxelMedium, settings: PropagationSettings
) -> OpticalField:
    """Propagate an optical field through the medium (spec-level entry point)."""
    nx, ny, _ = medium.grid_shape
    if field.amplitude.shape != (nx, ny):
        raise DesignError(
            f"field grid {field.amplitude.shape} != medium transverse grid {(nx, ny)}"
        )
    dx, dy, _ = medium.voxel_pitch
    if not np.allclose(field.transverse_pitch, (dx, dy), rtol=1e-9):
        raise DesignError(
            f"field pitch {field.transverse_pitch} != medium transverse pitch {(dx, dy)}"
        )
    out = propagate_amplitude(field.amplitude, medium, settings, field.wavelength_vacuum)
    return OpticalField(out, field.wavelength_vacuum, field.transverse_pitch)


# ---------------------------------------------------------------------------
# Facet encoding and readout
# ---------------------------------------------------------------------------

def _amplitude_scale(design: PfmDesign) -> float:
    """Per-pixel amplitude for a unit vector entry, sized so a unit-norm
    input vector carries design.peak_power_scale watts."""
    pix_area = design.medium.voxel_pitch[0] * design.medium.voxel_pitch[1]
    m = design.input_map.pixels_per_region
    return math.sqrt(design.peak_power_scale / (m * pix_area))


def encode_batch(
    vectors: np.ndarray, design: PfmDesign, dtype=np.complex128
) -> np.ndarray:
    """Encode (batch, dim) vectors as (batch, nx, ny) complex amplitudes."""
    v = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if v.shape[1] != design.input_dim:
        raise DesignError(f"input dim {v.shape[1]} != design input dim {design.input_dim}")
    if not np.all(np.isfinite(v)):
        raise DesignError("input vector contains non-finite values")
    labels = design.input_map.labels()
    if design.input_encoding == "amplitude":
        # Signed amplitudes: negative entries ride at pi phase.
        amp = _amplitude_scale(design) * v[:, labels]
        return amp.astype(dtype)
    # Phase encoding: constant amplitude, data in the phase (mod 2*pi).
    c0 = _amplitude_scale(design) / math.sqrt(design.input_dim)
    return (c0 * _cis(v[:, labels])).astype(dtype)


def encode_input(v: np.ndarray, design: PfmDesign) -> OpticalField:
    amp = encode_batch(np.asarray(v)[None, :], design)[0]
    dx, dy, _ = design.medium.voxel_pitch
    return OpticalField(amp, design.wavelength_vacuum, (dx, dy))


def readout_batch(
    amps: np.ndarray,
    design: PfmDesign,
    calibration: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Integrated intensity per output bin for (batch, nx, ny) amplitudes.

    ``calibration``, when given, is a per-bin affine map (gain, offset)
    applied to the raw bin powers.
    """
    labels = design.output_map.labels().ravel()
    pix_area = design.medium.voxel_pitch[0] * design.medium.voxel_pitch[1]
    amps = np.asarray(amps)
    if amps.ndim == 2:
        amps = amps[None]
    intensity = (amps.real.astype(np.float64) ** 2 + amps.imag.astype(np.float64) ** 2)
    intensity = intensity.reshape(amps.shape[0], -1)
    powers = np.stack(
        [np.bincount(labels, weights=row, minlength=design.output_dim) for row in intensity]
    ) * pix_area
    if calibration is not None:
        gain, offset = calibration
        powers = powers * gain + offset
    return powers


def readout(
    field: OpticalField,
    design: PfmDesign,
    calibration: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    nx, ny, _ = design.medium.grid_shape
    if field.amplitude.shape != (nx, ny):
        raise DesignError(f"field grid {field.amplitude.shape} != design grid {(nx, ny)}")
    return readout_batch(field.amplitude[None], design, calibration)[0]


def infer_batch(
    vectors: np.ndarray,
    design: PfmDesign,
    settings: PropagationSettings,
    dtype=np.complex128,
) -> np.ndarray:
    """encode -> propagate -> readout for a batch of input vectors."""
    amps = encode_batch(vectors, design, dtype=dtype)
    out = propagate_amplitude(amps, design.medium, settings, design.wavelength_vacuum)
    return readout_batch(out, design)


def infer(v: np.ndarray, design: PfmDesign, settings: PropagationSettings) -> np.ndarray:
    return infer_batch(np.asarray(v)[None, :], design, settings)[0]


def nonlinearity_witness(
    design: PfmDesign,
    settings: PropagationSettings,
    v: np.ndarray,
    alpha: float = 2.0,
) -> float:
    """Relative deviation of infer(alpha*v) from alpha^2 * infer(v).

    Zero (to rounding) for any linear field map with intensity readout;
    bounded away from zero when the Kerr term is doing real work.
    """
    y1 = infer(np.asarray(v), design, settings)
    y2 = infer(alpha * np.asarray(v), design, settings)
    ref = alpha**2 * y1
    return float(np.linalg.norm(y2 - ref) / max(np.linalg.norm(ref), 1e-300))


# ---------------------------------------------------------------------------
# Linear-map probing
# ---------------------------------------------------------------------------

def extract_linear_matrix(
    design_or_medium,
    settings: PropagationSettings,
    wavelength: float | None = None,
    chunk: int = 64,
) -> np.ndarray:
    """Probe the field-level map with pixel-basis inputs.

    Returns the complex matrix M with flattened output amplitudes
    M @ flattened input amplitudes (C order). Only valid for linear
    propagation, so Kerr must be disabled.
    """
    if settings.kerr_enabled:
        raise DesignError("extract_linear_matrix requires kerr_enabled=False")
    if isinstance(design_or_medium, PfmDesign):
        medium = design_or_medium.medium
        wavelength = wavelength or design_or_medium.wavelength_vacuum
    else:
        medium = design_or_medium
        if wavelength is None:
            raise DesignError("wavelength required when probing a bare medium")
    nx, ny, _ = medium.grid_shape
    npix = nx * ny
    cols = np.empty((npix, npix), dtype=np.complex128)
    for start in range(0, npix, chunk):
        stop = min(start + chunk, npix)
        basis = np.zeros((stop - start, npix), dtype=np.complex128)
        basis[np.arange(stop - start), np.arange(start, stop)] = 1.0
        out = propagate_amplitude(
            basis.reshape(-1, nx, ny), medium, settings, wavelength
        )
        cols[:, start:stop] = out.reshape(stop - start, npix).T
    return cols


# ---------------------------------------------------------------------------
# Reverse sweep
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Checkpointed forward state, ready for a reverse sweep."""

    plan: _StepPlan
    checkpoints: dict[int, np.ndarray]  # slice index -> field entering that slice
    stride: int
    amp_out: np.ndarray


@dataclass
class AdjointResult:
    grad_delta_n: np.ndarray        # (nz, nx, ny), summed over the batch
    grad_gain: float
    input_cotangent: np.ndarray     # dL/d(conj(E_in)), per batch element


def forward_pass(
    amp_in: np.ndarray,
    medium: VoxelMedium,
    settings: PropagationSettings,
    wavelength: float,
    checkpoint_budget: int = DEFAULT_CHECKPOINT_BUDGET,
) -> ForwardTrace:
    """Forward propagation that stores slice checkpoints for backward_pass."""
    amp = np.asarray(amp_in)
    if amp.dtype != np.complex64:
        amp = amp.astype(np.complex128, copy=False)
    plan = _StepPlan(medium, settings, wavelength, amp.dtype)
    nz = medium.delta_n.shape[0]
    sub = settings.z_steps_per_voxel
    stride = max(1, round(math.sqrt(nz / sub)))
    field_bytes = amp.size * amp.dtype.itemsize
    n_checkpoints = (nz + stride - 1) // stride
    required = (n_checkpoints + stride * sub + 2) * field_bytes
    if required > checkpoint_budget:
        raise CheckpointBudgetError(
            f"reverse sweep needs {required} bytes of checkpoint memory "
            f"({n_checkpoints} checkpoints + {stride * sub} tape fields of "
            f"{field_bytes} bytes) but the budget is {checkpoint_budget}"
        )
    checkpoints = {}
    for j0 in range(0, nz, stride):
        checkpoints[j0] = amp
        amp = plan.forward_range(amp, j0, min(j0 + stride, nz))
    if not np.all(np.isfinite(amp)):
        raise DesignError("propagation produced non-finite field values")
    return ForwardTrace(plan=plan, checkpoints=checkpoints, stride=stride, amp_out=amp)


def backward_pass(trace: ForwardTrace, output_cotangent: np.ndarray) -> AdjointResult:
    """Propagate dL/d(conj(E_out)) back to the input facet, accumulating
    gradients for every voxel and for the per-slice gain factor."""
    plan = trace.plan
    nz = plan.medium.delta_n.shape[0]
    grad_dn = np.zeros(plan.medium.delta_n.shape)
    grad_gain = 0.0
    a = np.asarray(output_cotangent).astype(plan.cdtype, copy=False)
    starts = sorted(trace.checkpoints)
    for seg_idx in range(len(starts) - 1, -1, -1):
        j0 = starts[seg_idx]
        j1 = starts[seg_idx + 1] if seg_idx + 1 < len(starts) else nz
        tape: list[np.ndarray] = []
        plan.forward_range(trace.checkpoints[j0], j0, j1, tape=tape)
        a, g_gain = plan.backward_range(a, j0, j1, tape, grad_dn)
        grad_gain += g_gain
    return AdjointResult(grad_delta_n=grad_dn, grad_gain=grad_gain, input_cotangent=a)


def bins_cotangent_to_field(
    amp_out: np.ndarray, design: PfmDesign, d_loss_d_bins: np.ndarray
) -> np.ndarray:
    """Jacobian of the intensity readout: map dL/d(bin powers) to
    dL/d(conj(E_out))."""
    labels = design.output_map.labels()
    pix_area = design.medium.voxel_pitch[0] * design.medium.voxel_pitch[1]
    d = np.atleast_2d(d_loss_d_bins)
    return (d[:, labels] * pix_area).astype(amp_out.real.dtype) * amp_out


def input_gradient(
    vectors: np.ndarray, design: PfmDesign, input_cotangent: np.ndarray
) -> np.ndarray:
    """Map dL/d(conj(E_in)) back to dL/d(input vector) for either encoding."""
    labels = design.input_map.labels().ravel()
    v = np.atleast_2d(vectors)
    a = input_cotangent.reshape(v.shape[0], -1)
    if design.input_encoding == "amplitude":
        per_pixel = 2.0 * _amplitude_scale(design) * a.real.astype(np.float64)
    else:
        e_in = encode_batch(v, design).reshape(v.shape[0], -1)
        per_pixel = 2.0 * np.imag(np.conj(e_in) * a.astype(np.complex128))
    return np.stack(
        [np.bincount(labels, weights=row, minlength=design.input_dim) for row in per_pixel]
    )

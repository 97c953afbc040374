"""Voxel media, optical fields, and device designs.

A device is a fixed block of material: a 3D grid of refractive-index
perturbations ``delta_n`` on top of a uniform background, plus the optical
interfaces at its two facets (how an input vector becomes a field, and how
the exit field is binned onto detectors).

Arrays are stored z-major: ``delta_n`` has shape ``(nz, nx, ny)`` so that
``delta_n[j]`` is the transverse slice the field crosses at step ``j``.
All ``VoxelMedium`` arrays are frozen (non-writeable); updates go through
``replace_delta_n`` which re-validates and re-freezes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, replace

import numpy as np

DESIGN_MAGIC = b"PFMDSN01"
DESIGN_SCHEMA_VERSION = 1


class DesignError(ValueError):
    """Invalid medium, facet map, or design file."""


@dataclass(frozen=True)
class VoxelMedium:
    """Refractive-index perturbation grid.

    delta_n        : (nz, nx, ny) float64, dimensionless index perturbation
    voxel_pitch    : (dx, dy, dz) in metres
    background_index: uniform index the perturbation rides on
    gain_per_step  : scalar amplitude factor applied once per z slice
    delta_n_max    : clamp bound for |delta_n|
    """

    delta_n: np.ndarray
    voxel_pitch: tuple[float, float, float]
    background_index: float = 1.5
    gain_per_step: float = 1.0
    delta_n_max: float = 0.1

    def __post_init__(self):
        arr = np.asarray(self.delta_n, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise DesignError(f"delta_n must be 3D (nz, nx, ny), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DesignError("delta_n contains non-finite values")
        if np.max(np.abs(arr), initial=0.0) > self.delta_n_max * (1 + 1e-12):
            raise DesignError(
                f"|delta_n| exceeds delta_n_max={self.delta_n_max}: "
                f"max {np.max(np.abs(arr)):.3e}"
            )
        if len(self.voxel_pitch) != 3 or min(self.voxel_pitch) <= 0:
            raise DesignError(f"voxel_pitch must be three positive lengths, got {self.voxel_pitch}")
        if self.background_index <= 0 or self.gain_per_step <= 0 or self.delta_n_max <= 0:
            raise DesignError("background_index, gain_per_step, delta_n_max must be positive")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "delta_n", arr)

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        """(nx, ny, nz)"""
        nz, nx, ny = self.delta_n.shape
        return nx, ny, nz

    @property
    def length(self) -> float:
        """Total propagation length nz * dz."""
        return self.delta_n.shape[0] * self.voxel_pitch[2]

    def replace_delta_n(self, delta_n: np.ndarray) -> "VoxelMedium":
        return replace(self, delta_n=delta_n)


@dataclass(frozen=True)
class OpticalField:
    """Complex transverse field at one propagation position.

    amplitude samples carry units sqrt(W/m^2); intensity is |amplitude|^2.
    """

    amplitude: np.ndarray          # (nx, ny) complex128
    wavelength_vacuum: float       # m
    transverse_pitch: tuple[float, float]  # (dx, dy) m

    def __post_init__(self):
        amp = np.asarray(self.amplitude, dtype=np.complex128)
        if amp.ndim != 2:
            raise DesignError(f"field amplitude must be 2D, got shape {amp.shape}")
        if not np.all(np.isfinite(amp)):
            raise DesignError("field amplitude contains non-finite values")
        object.__setattr__(self, "amplitude", amp)

    @property
    def pixel_area(self) -> float:
        return self.transverse_pitch[0] * self.transverse_pitch[1]

    def power(self) -> float:
        """Total beam power in watts."""
        return float(np.sum(np.abs(self.amplitude) ** 2)) * self.pixel_area


@dataclass(frozen=True)
class FacetMap:
    """Rectangular tiling of a facet into equal regions, row-major.

    Region ``r * cols + c`` covers x-tile r and y-tile c. Tile grids must
    divide the transverse grid exactly, which keeps regions disjoint,
    in-bounds, and equal-sized by construction.
    """

    grid: tuple[int, int]       # (nx, ny) of the facet
    tiles: tuple[int, int]      # (rows along x, cols along y)

    def __post_init__(self):
        nx, ny = self.grid
        rows, cols = self.tiles
        if rows < 1 or cols < 1:
            raise DesignError(f"tile counts must be >= 1, got {self.tiles}")
        if nx % rows or ny % cols:
            raise DesignError(f"tiles {self.tiles} do not divide grid {self.grid}")

    @property
    def n_regions(self) -> int:
        return self.tiles[0] * self.tiles[1]

    @property
    def pixels_per_region(self) -> int:
        nx, ny = self.grid
        return (nx // self.tiles[0]) * (ny // self.tiles[1])

    def labels(self) -> np.ndarray:
        """(nx, ny) int array mapping each pixel to its region index."""
        nx, ny = self.grid
        rows, cols = self.tiles
        rx = np.repeat(np.arange(rows), nx // rows)
        cy = np.repeat(np.arange(cols), ny // cols)
        return rx[:, None] * cols + cy[None, :]

    def region_mask(self, index: int) -> np.ndarray:
        return self.labels() == index


@dataclass(frozen=True)
class PropagationSettings:
    """Numerical and physical settings for one propagation run."""

    kerr_enabled: bool = True
    n2: float = 1e-20              # m^2/W
    z_steps_per_voxel: int = 1
    boundary: str = "periodic"     # or "absorbing"

    def __post_init__(self):
        if self.z_steps_per_voxel < 1:
            raise DesignError(f"z_steps_per_voxel must be >= 1, got {self.z_steps_per_voxel}")
        if self.boundary not in ("periodic", "absorbing"):
            raise DesignError(f"unknown boundary {self.boundary!r}")
        if self.n2 < 0:
            raise DesignError(f"n2 must be >= 0, got {self.n2}")


@dataclass(frozen=True)
class PfmDesign:
    """A fixed device: medium plus facet encodings and readout bins."""

    medium: VoxelMedium
    input_map: FacetMap
    output_map: FacetMap
    input_encoding: str = "amplitude"   # or "phase"
    peak_power_scale: float = 1.0       # W carried by a unit-norm input vector
    wavelength_vacuum: float = 1550e-9  # m

    def __post_init__(self):
        nx, ny, _ = self.medium.grid_shape
        for fmap, name in ((self.input_map, "input_map"), (self.output_map, "output_map")):
            if fmap.grid != (nx, ny):
                raise DesignError(f"{name} grid {fmap.grid} != medium transverse grid {(nx, ny)}")
        if self.input_encoding not in ("amplitude", "phase"):
            raise DesignError(f"unknown input encoding {self.input_encoding!r}")
        if self.peak_power_scale <= 0 or self.wavelength_vacuum <= 0:
            raise DesignError("peak_power_scale and wavelength_vacuum must be positive")

    @property
    def input_dim(self) -> int:
        return self.input_map.n_regions

    @property
    def output_dim(self) -> int:
        return self.output_map.n_regions

    def with_medium(self, medium: VoxelMedium) -> "PfmDesign":
        return replace(self, medium=medium)


def make_tiled_design(
    grid_shape: tuple[int, int, int],
    voxel_pitch: tuple[float, float, float],
    input_tiles: tuple[int, int],
    output_tiles: tuple[int, int],
    delta_n: np.ndarray | None = None,
    background_index: float = 1.5,
    gain_per_step: float = 1.0,
    delta_n_max: float = 0.1,
    input_encoding: str = "amplitude",
    peak_power_scale: float = 1.0,
    wavelength_vacuum: float = 1550e-9,
) -> PfmDesign:
    """Build a design with equal rectangular input regions and output bins."""
    nx, ny, nz = grid_shape
    if delta_n is None:
        delta_n = np.zeros((nz, nx, ny))
    medium = VoxelMedium(
        delta_n=delta_n,
        voxel_pitch=voxel_pitch,
        background_index=background_index,
        gain_per_step=gain_per_step,
        delta_n_max=delta_n_max,
    )
    return PfmDesign(
        medium=medium,
        input_map=FacetMap((nx, ny), input_tiles),
        output_map=FacetMap((nx, ny), output_tiles),
        input_encoding=input_encoding,
        peak_power_scale=peak_power_scale,
        wavelength_vacuum=wavelength_vacuum,
    )


# Desk-scale defaults: ~5e5 voxels, in-medium-wavelength transverse sampling,
# elongated voxels in z. The peak power keeps the per-step Kerr phase of the
# brightest pixel under the stability bound with a 4x intensity margin (the
# nonlinearity witness doubles the input amplitude of a trained design).
DESK_GRID = (64, 64, 128)
DESK_PITCH = (1.0333e-6, 1.0333e-6, 1.0333e-5)
DESK_PEAK_POWER = 5e7


def desk_design(
    delta_n: np.ndarray | None = None,
    input_tiles: tuple[int, int] = (4, 4),
    output_tiles: tuple[int, int] = (2, 2),
    peak_power_scale: float = DESK_PEAK_POWER,
) -> PfmDesign:
    """The default desk-scale device used by training and acceptance runs."""
    return make_tiled_design(
        DESK_GRID,
        DESK_PITCH,
        input_tiles=input_tiles,
        output_tiles=output_tiles,
        delta_n=delta_n,
        peak_power_scale=peak_power_scale,
    )


def desk_settings(kerr_enabled: bool = True) -> PropagationSettings:
    return PropagationSettings(kerr_enabled=kerr_enabled, n2=1e-20)


# ---------------------------------------------------------------------------
# Content hashing and the design file format
# ---------------------------------------------------------------------------

def _structural_header(design: PfmDesign) -> dict:
    nx, ny, nz = design.medium.grid_shape
    return {
        "schema_version": DESIGN_SCHEMA_VERSION,
        "grid": [nx, ny, nz],
        "voxel_pitch_m": list(design.medium.voxel_pitch),
        "background_index": design.medium.background_index,
        "gain_per_step": design.medium.gain_per_step,
        "delta_n_max": design.medium.delta_n_max,
        "input_encoding": design.input_encoding,
        "input_tiles": list(design.input_map.tiles),
        "output_tiles": list(design.output_map.tiles),
        "peak_power_scale_w": design.peak_power_scale,
        "wavelength_vacuum_m": design.wavelength_vacuum,
        "order": "z,x,y",
    }


def _delta_n_bytes(design: PfmDesign) -> bytes:
    return design.medium.delta_n.astype("<f4").tobytes(order="C")


def design_hash(design: PfmDesign) -> str:
    """Content hash of a design: structure plus the float32 delta_n payload.

    Provenance metadata is excluded, so a no-op transformation of a design
    keeps its hash even if it is re-saved with new provenance.
    """
    canon = json.dumps(_structural_header(design), sort_keys=True).encode()
    h = hashlib.sha256()
    h.update(canon)
    h.update(b"\0")
    h.update(_delta_n_bytes(design))
    return h.hexdigest()


def save_design(path, design: PfmDesign, provenance: dict | None = None) -> str:
    """Write a design file: magic, header length, JSON header, raw float32
    delta_n in z-major order. Returns the design content hash."""
    header = _structural_header(design)
    header["content_hash"] = design_hash(design)
    if provenance:
        header["provenance"] = provenance
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(DESIGN_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(_delta_n_bytes(design))
    return header["content_hash"]


def load_design(path) -> tuple[PfmDesign, dict]:
    """Read a design file, verifying shape and content hash.

    Returns (design, header). Raises DesignError on any mismatch.
    """
    with open(path, "rb") as f:
        magic = f.read(len(DESIGN_MAGIC))
        if magic != DESIGN_MAGIC:
            raise DesignError(f"{path}: not a design file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        try:
            header = json.loads(f.read(hlen).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DesignError(f"{path}: corrupt header: {exc}") from exc
        nx, ny, nz = header["grid"]
        payload = f.read()
    expected = nx * ny * nz * 4
    if len(payload) != expected:
        raise DesignError(
            f"{path}: delta_n payload is {len(payload)} bytes, expected {expected} "
            f"for grid {nx}x{ny}x{nz}"
        )
    delta_n = np.frombuffer(payload, dtype="<f4").reshape(nz, nx, ny).astype(np.float64)
    try:
        design = make_tiled_design(
            (nx, ny, nz),
            tuple(header["voxel_pitch_m"]),
            input_tiles=tuple(header["input_tiles"]),
            output_tiles=tuple(header["output_tiles"]),
            delta_n=delta_n,
            background_index=header["background_index"],
            gain_per_step=header["gain_per_step"],
            delta_n_max=header["delta_n_max"],
            input_encoding=header["input_encoding"],
            peak_power_scale=header["peak_power_scale_w"],
            wavelength_vacuum=header["wavelength_vacuum_m"],
        )
    except (DesignError, KeyError) as exc:
        raise DesignError(f"{path}: corrupt design file: {exc}") from exc
    if design_hash(design) != header["content_hash"]:
        raise DesignError(f"{path}: content hash mismatch, file is corrupt or was edited")
    return design, header


def save_field(path, field_out: OpticalField) -> None:
    """Export a field as paired real/imag float32 arrays with a JSON header."""
    amp = field_out.amplitude.astype(np.complex128)
    header = {
        "schema_version": DESIGN_SCHEMA_VERSION,
        "grid": list(amp.shape),
        "wavelength_vacuum_m": field_out.wavelength_vacuum,
        "transverse_pitch_m": list(field_out.transverse_pitch),
        "layout": "real_f4_then_imag_f4",
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(b"PFMFLD01")
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(amp.real.astype("<f4").tobytes(order="C"))
        f.write(amp.imag.astype("<f4").tobytes(order="C"))

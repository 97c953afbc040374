"""Closed-form scaling model for tube-geometry optical inference hardware.

Everything in this module is a pure function of its inputs: device volume
and geometry from a parameter count, Kerr peak power and pulse energy from
the geometry, per-inference energy/time for the optical device and for a
GPU-style digital baseline, plus the storage-side arithmetic (memory wall,
metasurface pixel counts, I/O bandwidth).

Raw values are never rounded here. The ``round_up_pow10`` /
``round_down_pow10`` / ``round_nearest_pow10`` helpers exist so callers can
produce order-of-magnitude table entries while tests keep asserting exact
values.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, asdict

SPEED_OF_LIGHT = 299_792_458.0  # m/s

# Relative slack used when flooring mode counts, so exact boundary cases
# (area == lambda^2/n^2) are not lost to floating-point rounding.
_FLOOR_SLACK = 1e-12


class ScalingError(ValueError):
    """Invalid input to a scaling computation."""


class InfeasibleGeometryError(ScalingError):
    """No tube shape of the requested volume supports the required modes."""


@dataclass(frozen=True)
class PhysicalConstants:
    """Material, laser, and cost assumptions behind the scaling model.

    All quantities are SI. ``beam_area_fraction`` converts the tube
    cross-section into the effective area of the propagating beam (a
    Gaussian beam whose 1/e^2 intensity radius is half the tube side has
    effective area pi/8 of the square cross-section); peak powers quoted
    for the full cross-section are recovered with ``beam_area_fraction=1``.
    """

    wavelength_vacuum: float = 1550e-9       # m
    refractive_index: float = 1.5            # fused silica
    nonlinear_index: float = 1e-20           # m^2/W, fused silica Kerr index
    pulse_duration: float = 1e-12            # s
    io_cost_per_element: float = 100e-12     # J per input/output vector element
    avg_power_cap: float = 1e3               # W, average optical power limit
    nl_phase_target: float = 2 * math.pi     # rad of Kerr phase per transit
    digital_op_cost: float = 1e-12           # J per 8-bit op
    hbm_capacity: float = 192e9              # bytes per accelerator
    hbm_bandwidth: float = 8e12              # bytes/s
    gpu_volume: float = 1e-3                 # m^3 per accelerator card
    digital_bytes_per_param: float = 1.0     # 8-bit parameters
    beam_area_fraction: float = math.pi / 8  # effective beam area / cross-section

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (value > 0 and math.isfinite(value)):
                raise ScalingError(f"constant {name!r} must be finite and positive, got {value!r}")
        if not (100e-9 < self.wavelength_vacuum < 10e-6):
            raise ScalingError(
                f"wavelength_vacuum {self.wavelength_vacuum} m outside optical range (100 nm, 10 um)"
            )


@dataclass(frozen=True)
class TubeGeometry:
    """Square-cross-section tube: side x side x length."""

    side: float                # m
    length: float              # m
    cross_section_area: float  # m^2
    guided_modes: int


@dataclass(frozen=True)
class MemoryWallReport:
    param_count: float
    storage_area: float    # m^2
    stacked_volume: float  # m^3
    read_time: float       # s


@dataclass(frozen=True)
class ScalingReport:
    """All derived quantities for one parameter count."""

    param_count: float
    volume: float                 # m^3
    geometry: TubeGeometry
    io_dimension: int
    peak_power: float             # W
    pulse_energy: float           # J
    io_energy: float              # J
    inference_energy: float       # J
    propagation_delay: float      # s
    inference_time: float         # s
    inference_rate: float         # Hz
    critical_power_ratio: float
    digital_energy: float         # J
    digital_time: float           # s
    digital_cube_side: float      # m


def optical_volume(param_count: float, c: PhysicalConstants) -> float:
    """Medium volume for ``param_count`` parameters at one cubic in-medium
    wavelength per parameter."""
    if param_count < 1:
        raise ScalingError(f"param_count must be >= 1, got {param_count}")
    cell = c.wavelength_vacuum / c.refractive_index
    return param_count * cell**3


def io_dimension(param_count: float) -> int:
    """Input/output vector dimension, the rounded cube root of the
    parameter count."""
    if param_count < 1:
        raise ScalingError(f"param_count must be >= 1, got {param_count}")
    return max(1, round(param_count ** (1.0 / 3.0)))


def guided_modes(area: float, c: PhysicalConstants) -> int:
    """Transverse mode count of a guiding cross-section: floor(A n^2 / lambda^2)."""
    if area <= 0:
        raise ScalingError(f"area must be positive, got {area}")
    m = area * c.refractive_index**2 / c.wavelength_vacuum**2
    return int(math.floor(m * (1 + _FLOOR_SLACK) + _FLOOR_SLACK))


def tube_geometry(
    volume: float,
    n_required: int,
    c: PhysicalConstants,
    aspect_ratio: float = 1000.0,
) -> TubeGeometry:
    """Distribute ``volume`` into a side^2 x length tube.

    Starts from the requested length/side aspect ratio and widens the
    cross-section (shrinking length, preserving volume) when it would guide
    fewer than ``n_required`` modes.
    """
    if volume <= 0:
        raise ScalingError(f"volume must be positive, got {volume}")
    if n_required < 1:
        raise ScalingError(f"n_required must be >= 1, got {n_required}")
    if aspect_ratio < 1:
        raise ScalingError(f"aspect_ratio must be >= 1, got {aspect_ratio}")

    side = (volume / aspect_ratio) ** (1.0 / 3.0)
    length = aspect_ratio * side
    if guided_modes(side * side, c) < n_required:
        # Smallest cross-section guiding n_required modes.
        side = math.sqrt(n_required) * c.wavelength_vacuum / c.refractive_index
        length = volume / side**2
        if side > length * (1 + 1e-12):
            raise InfeasibleGeometryError(
                f"volume {volume:.3e} m^3 cannot guide {n_required} modes: "
                f"needs side >= {side:.3e} m, leaving length {length:.3e} m < side"
            )
    return TubeGeometry(
        side=side,
        length=length,
        cross_section_area=side * side,
        guided_modes=guided_modes(side * side, c),
    )


def kerr_peak_power(
    g: TubeGeometry, c: PhysicalConstants, effective_area: float | None = None
) -> float:
    """Peak power reaching the target Kerr phase over the tube length.

    Inverts phase = (2 pi / lambda) * n2 * (P0 / A) * L for P0, using the
    full cross-section by default. Pass ``effective_area`` for a narrower
    beam (e.g. ``beam_area_fraction * cross_section_area``).
    """
    area = g.cross_section_area if effective_area is None else effective_area
    return c.nl_phase_target * c.wavelength_vacuum * area / (
        2 * math.pi * c.nonlinear_index * g.length
    )


def pulse_energy(peak_power: float, c: PhysicalConstants) -> float:
    """Energy of a rectangular pulse: peak power times duration."""
    if peak_power < 0:
        raise ScalingError(f"peak_power must be >= 0, got {peak_power}")
    return peak_power * c.pulse_duration


def inference_energy(n_dim: int, pulse: float, c: PhysicalConstants) -> float:
    """Energy per inference: the larger of I/O cost (N in + N out elements)
    and the optical pulse energy."""
    if n_dim < 1:
        raise ScalingError(f"n_dim must be >= 1, got {n_dim}")
    return max(2 * n_dim * c.io_cost_per_element, pulse)


def inference_time(
    pulse: float, g: TubeGeometry, c: PhysicalConstants
) -> tuple[float, float]:
    """(time, rate) per inference.

    Time is the larger of the average-power throughput limit
    (pulse energy / power cap) and the transit delay n L / c_light.
    """
    if pulse <= 0:
        raise ScalingError(f"pulse energy must be positive, got {pulse}")
    delay = propagation_delay(g, c)
    t = max(pulse / c.avg_power_cap, delay)
    return t, 1.0 / t


def propagation_delay(g: TubeGeometry, c: PhysicalConstants) -> float:
    return c.refractive_index * g.length / SPEED_OF_LIGHT


def critical_power(c: PhysicalConstants) -> float:
    """Critical power for Kerr self-focusing, 3.79 lambda^2 / (8 pi n n2)."""
    return 3.79 * c.wavelength_vacuum**2 / (8 * math.pi * c.refractive_index * c.nonlinear_index)


def critical_power_ratio(peak_power: float, c: PhysicalConstants) -> float:
    if peak_power < 0:
        raise ScalingError(f"peak_power must be >= 0, got {peak_power}")
    return peak_power / critical_power(c)


def digital_reference(param_count: float, c: PhysicalConstants) -> tuple[float, float, float]:
    """(energy, time, cube_side) for a weight-streaming digital baseline.

    One op per parameter; latency pinned to one full HBM read regardless of
    scale; volume from the (fractional) number of accelerators needed to
    hold the weights, expressed as the side of a perfectly packed cube.
    """
    if param_count < 1:
        raise ScalingError(f"param_count must be >= 1, got {param_count}")
    energy = param_count * c.digital_op_cost
    time = c.hbm_capacity / c.hbm_bandwidth
    gpus = param_count * c.digital_bytes_per_param / c.hbm_capacity
    cube_side = (gpus * c.gpu_volume) ** (1.0 / 3.0)
    return energy, time, cube_side


def memory_wall(
    param_count: float,
    bits_per_param: float,
    density: float,
    bandwidth: float,
    layer_thickness: float,
) -> MemoryWallReport:
    """Planar area, stacked volume, and read-in time for storing a model in
    external memory.

    ``density`` in bits/m^2, ``bandwidth`` in bits/s. Stacking N layers
    divides area by N and multiplies thickness by N, so the volume is
    independent of the stack count.
    """
    if param_count < 0:
        raise ScalingError(f"param_count must be >= 0, got {param_count}")
    for name, v in (("bits_per_param", bits_per_param), ("density", density),
                    ("bandwidth", bandwidth), ("layer_thickness", layer_thickness)):
        if v <= 0:
            raise ScalingError(f"{name} must be positive, got {v}")
    total_bits = param_count * bits_per_param
    area = total_bits / density
    return MemoryWallReport(
        param_count=param_count,
        storage_area=area,
        stacked_volume=area * layer_thickness,
        read_time=total_bits / bandwidth,
    )


def metasurface_capacity(wafer_diameter: float, pixel_pitch: float) -> int:
    """Pixel count of a circular wafer at the given pitch."""
    if pixel_pitch <= 0:
        raise ScalingError(f"pixel_pitch must be positive, got {pixel_pitch}")
    if wafer_diameter <= pixel_pitch:
        raise ScalingError(
            f"wafer_diameter {wafer_diameter} must exceed pixel_pitch {pixel_pitch}"
        )
    return int(math.floor(math.pi * (wafer_diameter / 2) ** 2 / pixel_pitch**2))


def io_bandwidth(n_dim: int, bits_per_element: float, rate: float) -> float:
    """Vector I/O throughput in bytes/s."""
    if n_dim < 1 or bits_per_element <= 0 or rate <= 0:
        raise ScalingError("io_bandwidth inputs must be positive")
    return n_dim * bits_per_element * rate / 8.0


def scaling_report(
    param_count: float,
    c: PhysicalConstants | None = None,
    aspect_ratio: float = 1000.0,
) -> ScalingReport:
    """Compose the full optical + digital comparison for one parameter count.

    The peak power entering the energy/time chain uses the effective beam
    area (``beam_area_fraction`` of the cross-section); the full-area value
    is recovered by setting that fraction to 1.
    """
    c = c or PhysicalConstants()
    vol = optical_volume(param_count, c)
    n_dim = io_dimension(param_count)
    geom = tube_geometry(vol, n_dim, c, aspect_ratio=aspect_ratio)
    p0 = kerr_peak_power(
        geom, c, effective_area=c.beam_area_fraction * geom.cross_section_area
    )
    e_pulse = pulse_energy(p0, c)
    e_io = 2 * n_dim * c.io_cost_per_element
    e_inf = inference_energy(n_dim, e_pulse, c)
    t_inf, rate = inference_time(e_pulse, geom, c)
    e_dig, t_dig, cube = digital_reference(param_count, c)
    return ScalingReport(
        param_count=param_count,
        volume=vol,
        geometry=geom,
        io_dimension=n_dim,
        peak_power=p0,
        pulse_energy=e_pulse,
        io_energy=e_io,
        inference_energy=e_inf,
        propagation_delay=propagation_delay(geom, c),
        inference_time=t_inf,
        inference_rate=rate,
        critical_power_ratio=critical_power_ratio(p0, c),
        digital_energy=e_dig,
        digital_time=t_dig,
        digital_cube_side=cube,
    )


# ---------------------------------------------------------------------------
# Order-of-magnitude formatting for table comparison
# ---------------------------------------------------------------------------

def _snapped_log10(x: float) -> float:
    if x <= 0:
        raise ScalingError(f"cannot take log10 of {x}")
    lg = math.log10(x)
    nearest = round(lg)
    # Exact powers of ten survive the log/exp round trip.
    if abs(lg - nearest) < 1e-9:
        return float(nearest)
    return lg


def round_up_pow10(x: float) -> float:
    """Round up to the nearest power of ten (energies in table entries)."""
    return 10.0 ** math.ceil(_snapped_log10(x))


def round_down_pow10(x: float) -> float:
    """Round down to the nearest power of ten (rates in table entries)."""
    return 10.0 ** math.floor(_snapped_log10(x))


def round_nearest_pow10(x: float) -> float:
    """Round to the nearest power of ten in log space (lengths in table entries)."""
    return 10.0 ** round(_snapped_log10(x))


_SI_PREFIXES = [
    (1e24, "Y"), (1e21, "Z"), (1e18, "E"), (1e15, "P"), (1e12, "T"),
    (1e9, "G"), (1e6, "M"), (1e3, "k"), (1.0, ""), (1e-3, "m"),
    (1e-6, "u"), (1e-9, "n"), (1e-12, "p"), (1e-15, "f"), (1e-18, "a"),
]


def format_si(value: float, unit: str, digits: int = 3) -> str:
    """Human-readable SI string, e.g. 6.29e-5 J -> '62.9 uJ'."""
    if value == 0:
        return f"0 {unit}"
    mag = abs(value)
    for factor, prefix in _SI_PREFIXES:
        if mag >= factor:
            return f"{value / factor:.{digits}g} {prefix}{unit}"
    factor, prefix = _SI_PREFIXES[-1]
    return f"{value / factor:.{digits}g} {prefix}{unit}"


def format_length(value: float, digits: int = 3) -> str:
    """Length with centimetres in [1 cm, 1 m), as table entries are quoted."""
    if 1e-2 <= abs(value) < 1.0:
        return f"{value / 1e-2:.{digits}g} cm"
    return format_si(value, "m", digits)


def table_cells(report: ScalingReport) -> dict[str, str]:
    """The six order-of-magnitude comparison cells for one parameter count."""
    side = round_nearest_pow10(report.geometry.side)
    length = round_nearest_pow10(report.geometry.length)
    return {
        "optical_size": f"({format_length(side)})^2 x {format_length(length)}",
        "optical_energy": format_si(round_up_pow10(report.inference_energy), "J", 3),
        "optical_time": format_si(round_up_pow10(report.inference_time), "s", 3),
        "digital_size": f"({format_length(report.digital_cube_side, 2)})^3",
        "digital_energy": format_si(report.digital_energy, "J", 3),
        "digital_time": format_si(report.digital_time, "s", 3),
    }


def render_table(reports: list[ScalingReport]) -> str:
    """Plain-text comparison table, one column per parameter count."""
    headers = ["Platform", "Metric"] + [f"P={r.param_count:.0e}" for r in reports]
    cells = [table_cells(r) for r in reports]
    rows = [
        ["Optical", "Size (Volume)"] + [c["optical_size"] for c in cells],
        ["Optical", "Energy / Inference"] + [c["optical_energy"] for c in cells],
        ["Optical", "Time / Inference"] + [c["optical_time"] for c in cells],
        ["Digital (Ref.)", "Size (Volume)"] + [c["digital_size"] for c in cells],
        ["Digital (Ref.)", "Energy / Inference"] + [c["digital_energy"] for c in cells],
        ["Digital (Ref.)", "Time / Inference"] + [c["digital_time"] for c in cells],
    ]
    widths = [max(len(row[i]) for row in [headers] + rows) for i in range(len(headers))]
    def fmt(row):
        return " | ".join(s.ljust(w) for s, w in zip(row, widths))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(headers), sep] + [fmt(r) for r in rows]) + "\n"


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def report_to_dict(report: ScalingReport) -> dict:
    d = asdict(report)
    d["geometry"]["guided_modes"] = int(d["geometry"]["guided_modes"])
    return d


def report_to_json(report: ScalingReport) -> str:
    return json.dumps(report_to_dict(report), sort_keys=True, indent=2) + "\n"


def report_from_json(text: str) -> ScalingReport:
    d = json.loads(text)
    geom = TubeGeometry(**d.pop("geometry"))
    return ScalingReport(geometry=geom, **d)


_CSV_FIELDS = [
    "param_count", "volume", "side", "length", "io_dimension", "peak_power",
    "pulse_energy", "io_energy", "inference_energy", "propagation_delay",
    "inference_time", "inference_rate", "critical_power_ratio",
    "digital_energy", "digital_time", "digital_cube_side",
]


def reports_to_csv(reports: list[ScalingReport]) -> str:
    """One CSV row per parameter count, for sweep output."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_CSV_FIELDS)
    for r in reports:
        writer.writerow([
            repr(r.param_count), repr(r.volume), repr(r.geometry.side),
            repr(r.geometry.length), r.io_dimension, repr(r.peak_power),
            repr(r.pulse_energy), repr(r.io_energy), repr(r.inference_energy),
            repr(r.propagation_delay), repr(r.inference_time),
            repr(r.inference_rate), repr(r.critical_power_ratio),
            repr(r.digital_energy), repr(r.digital_time), repr(r.digital_cube_side),
        ])
    return buf.getvalue()

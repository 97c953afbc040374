"""Unit and property tests for the closed-form scaling model."""

import math

import pytest
from hypothesis import given, settings, strategies as st

from pfmdesk import scaling
from pfmdesk.scaling import (
    InfeasibleGeometryError,
    PhysicalConstants,
    ScalingError,
    critical_power,
    critical_power_ratio,
    digital_reference,
    guided_modes,
    inference_energy,
    inference_time,
    io_bandwidth,
    io_dimension,
    kerr_peak_power,
    memory_wall,
    metasurface_capacity,
    optical_volume,
    pulse_energy,
    report_from_json,
    report_to_json,
    round_down_pow10,
    round_nearest_pow10,
    round_up_pow10,
    scaling_report,
    tube_geometry,
)

C = PhysicalConstants()
CELL = C.wavelength_vacuum / C.refractive_index  # in-medium wavelength, 1.0333 um


class TestOpticalVolume:
    def test_single_parameter_is_one_cell(self):
        assert optical_volume(1, C) == pytest.approx(CELL**3)
        assert optical_volume(1, C) == pytest.approx(1.10337e-18, rel=1e-4)

    def test_1e18_parameters(self):
        assert optical_volume(1e18, C) == pytest.approx(1.10337, rel=1e-4)

    def test_1e12_parameters(self):
        assert optical_volume(1e12, C) == pytest.approx(1.10337e-6, rel=1e-4)

    def test_rejects_nonpositive(self):
        with pytest.raises(ScalingError):
            optical_volume(0, C)

    @given(st.integers(1, 10**6), st.integers(1, 10**9))
    def test_linearity(self, k, p):
        assert optical_volume(k * p, C) == pytest.approx(k * optical_volume(p, C), rel=1e-12)


class TestIoDimension:
    @pytest.mark.parametrize("p,n", [(1, 1), (1e12, 10**4), (1e18, 10**6), (8, 2), (27, 3)])
    def test_cube_root(self, p, n):
        assert io_dimension(p) == n

    def test_rejects_zero(self):
        with pytest.raises(ScalingError):
            io_dimension(0)


class TestGuidedModes:
    def test_paper_footnote_inputs(self):
        # 5 cm x 5 cm at lambda = 1 um: A n^2 / lambda^2 = 5.625e9. (The
        # source footnote prints 3.75e9 for the same inputs, which matches
        # A n / lambda^2 instead; we implement the stated formula.)
        c = PhysicalConstants(wavelength_vacuum=1e-6)
        assert guided_modes(0.05 * 0.05, c) == pytest.approx(5.625e9, rel=1e-9)

    def test_single_mode_limit(self):
        area = C.wavelength_vacuum**2 / C.refractive_index**2
        assert guided_modes(area, C) == 1

    def test_one_mm2(self):
        assert guided_modes(1e-6, C) == 936524
        assert guided_modes(1e-6, C) >= 10**4


class TestTubeGeometry:
    def test_table_row_1e12(self):
        g = tube_geometry(1.103370e-6, 10**4, C)
        assert g.side == pytest.approx(1.0333e-3, rel=1e-3)
        assert g.length == pytest.approx(1.0333, rel=1e-3)
        assert g.guided_modes >= 10**4

    def test_table_row_1e18(self):
        g = tube_geometry(1.10337, 10**6, C)
        assert g.side == pytest.approx(0.10333, rel=1e-3)
        assert g.length == pytest.approx(103.33, rel=1e-3)

    def test_cube_case(self):
        g = tube_geometry(1.0, 1, C, aspect_ratio=1.0)
        assert g.side == pytest.approx(1.0)
        assert g.length == pytest.approx(1.0)

    def test_widening_preserves_volume(self):
        # Small volume where the aspect-1000 tube guides too few modes.
        vol = optical_volume(1000, C)
        g = tube_geometry(vol, 10, C)
        assert g.side**2 * g.length == pytest.approx(vol, rel=1e-6)
        assert g.guided_modes >= 10
        assert g.side <= g.length

    def test_infeasible(self):
        with pytest.raises(InfeasibleGeometryError):
            tube_geometry(1e-18, 10**6, C)

    @given(st.floats(1e-12, 1e3), st.integers(1, 10**6))
    @settings(max_examples=200)
    def test_volume_and_mode_postconditions(self, vol, n_req):
        try:
            g = tube_geometry(vol, n_req, C)
        except InfeasibleGeometryError:
            return
        assert g.side**2 * g.length == pytest.approx(vol, rel=1e-6)
        assert g.guided_modes >= n_req
        assert g.side <= g.length * (1 + 1e-12)


class TestKerrPeakPower:
    def test_table_geometry_full_area(self):
        g = tube_geometry(optical_volume(1e12, C), 10**4, C)
        p0 = kerr_peak_power(g, C)
        assert p0 == pytest.approx(1.6017e8, rel=1e-3)
        # Underdetermined source geometry: agree with 44 MW within factor 5.
        assert 44e6 / 5 < p0 < 44e6 * 5

    def test_inverse_length(self):
        g1 = scaling.TubeGeometry(1e-3, 1.0, 1e-6, 10**5)
        g2 = scaling.TubeGeometry(1e-3, 2.0, 1e-6, 10**5)
        assert kerr_peak_power(g1, C) == pytest.approx(2 * kerr_peak_power(g2, C))

    def test_zero_phase_target(self):
        c = PhysicalConstants(nl_phase_target=1e-300)
        g = tube_geometry(optical_volume(1e12, c), 10**4, c)
        assert kerr_peak_power(g, c) == pytest.approx(0.0, abs=1e-200)


class TestPulseEnergy:
    def test_44mw_gives_44uj(self):
        assert pulse_energy(44e6, C) == pytest.approx(44e-6)

    def test_zero(self):
        assert pulse_energy(0.0, C) == 0.0

    def test_4p5gw(self):
        assert pulse_energy(4.5e9, C) == pytest.approx(4.5e-3)


class TestInferenceEnergy:
    def test_pulse_dominated(self):
        e = inference_energy(10**4, 44e-6, C)
        assert e == pytest.approx(44e-6)
        assert round_up_pow10(e) == pytest.approx(100e-6)

    def test_1e6_dims(self):
        e = inference_energy(10**6, 4.4e-3, C)
        assert e == pytest.approx(4.4e-3)
        assert round_up_pow10(e) == pytest.approx(10e-3)

    def test_io_floor(self):
        assert inference_energy(1, 0.0, C) == pytest.approx(200e-12)

    @given(st.integers(1, 10**7), st.integers(1, 10**7),
           st.floats(0, 1e-2), st.floats(0, 1e-2))
    def test_monotone(self, n1, n2, p1, p2):
        if n2 < n1:
            n1, n2 = n2, n1
        if p2 < p1:
            p1, p2 = p2, p1
        assert inference_energy(n2, p2, C) >= inference_energy(n1, p1, C)


class TestInferenceTime:
    def test_power_cap_dominated(self):
        g = tube_geometry(optical_volume(1e12, C), 10**4, C)
        t, rate = inference_time(44e-6, g, C)
        assert t == pytest.approx(44e-9)
        assert rate == pytest.approx(1 / 44e-9)
        assert round_down_pow10(rate) == pytest.approx(10e6)

    def test_4p4mj(self):
        g = tube_geometry(optical_volume(1e18, C), 10**6, C)
        t, _ = inference_time(4.4e-3, g, C)
        assert t == pytest.approx(4.4e-6)
        assert round_up_pow10(t) == pytest.approx(10e-6)

    def test_delay_limited(self):
        c = PhysicalConstants(avg_power_cap=1e30)
        g = tube_geometry(optical_volume(1e12, c), 10**4, c)
        t, _ = inference_time(44e-6, g, c)
        assert t == pytest.approx(c.refractive_index * g.length / scaling.SPEED_OF_LIGHT)

    def test_monotone_in_power_cap(self):
        g = tube_geometry(optical_volume(1e12, C), 10**4, C)
        caps = [1e2, 1e3, 1e4, 1e8]
        times = [
            inference_time(44e-6, g, PhysicalConstants(avg_power_cap=cap))[0]
            for cap in caps
        ]
        assert times == sorted(times, reverse=True)


class TestCriticalPower:
    def test_value(self):
        assert critical_power(C) == pytest.approx(2.4153e7, rel=1e-3)
        assert critical_power_ratio(44e6, C) == pytest.approx(1.8217, rel=1e-3)
        assert critical_power_ratio(44e6, C) > 1

    def test_boundaries(self):
        assert critical_power_ratio(0.0, C) == 0.0
        assert critical_power_ratio(critical_power(C), C) == pytest.approx(1.0)


class TestDigitalReference:
    def test_1e12(self):
        e, t, cube = digital_reference(1e12, C)
        assert e == pytest.approx(1.0)
        assert t == pytest.approx(0.024)
        assert cube == pytest.approx(0.17334, rel=1e-4)

    def test_1e15(self):
        e, t, cube = digital_reference(1e15, C)
        assert e == pytest.approx(1e3)
        assert t == pytest.approx(0.024)
        assert cube == pytest.approx(1.73340, rel=1e-4)

    def test_single_param(self):
        e, _, _ = digital_reference(1, C)
        assert e == pytest.approx(1e-12)

    @given(st.integers(1, 10**18), st.integers(1, 10**3))
    def test_energy_linear_time_constant(self, p, k):
        e1, t1, _ = digital_reference(p, C)
        e2, t2, _ = digital_reference(k * p, C)
        assert e2 == pytest.approx(k * e1, rel=1e-12)
        assert t1 == t2


class TestMemoryWall:
    DENSITY = 30e9 * 1e6  # 30 Gb/mm^2 in bits/m^2

    def test_1e18_parameters(self):
        r = memory_wall(1e18, 8, self.DENSITY, 1e12, 50e-6)
        assert r.storage_area == pytest.approx(266.667, rel=1e-4)
        assert r.stacked_volume == pytest.approx(1.33333e-2, rel=1e-4)
        assert r.read_time == pytest.approx(8e6)
        assert r.read_time / 86400 == pytest.approx(92.59, rel=1e-3)

    def test_zero_params(self):
        r = memory_wall(0, 8, self.DENSITY, 1e12, 50e-6)
        assert r.storage_area == 0 and r.stacked_volume == 0 and r.read_time == 0

    def test_read_time_identity(self):
        r = memory_wall(1e18, 8, self.DENSITY, 8e18, 50e-6)
        assert r.read_time == pytest.approx(1.0)


class TestMetasurface:
    def test_300mm_wafer(self):
        cap = metasurface_capacity(0.3, 250e-9)
        assert cap == 1130973355292
        assert cap > 10**12

    def test_quadratic_pitch_scaling(self):
        a = metasurface_capacity(0.3, 250e-9)
        b = metasurface_capacity(0.3, 500e-9)
        assert abs(b - a / 4) <= 1

    def test_coarse_pitch(self):
        assert metasurface_capacity(1.0, 0.5) == int(math.floor(math.pi * 0.25 / 0.25))


class TestIoBandwidth:
    def test_25_petabytes(self):
        assert io_bandwidth(10**9, 2, 100e6) == pytest.approx(2.5e16)

    def test_unit_case(self):
        assert io_bandwidth(1, 8, 1.0) == pytest.approx(1.0)

    @given(st.integers(1, 10**9))
    def test_linear_in_n(self, n):
        assert io_bandwidth(2 * n, 2, 1e6) == pytest.approx(2 * io_bandwidth(n, 2, 1e6))


class TestScalingReport:
    def test_1e15_table_cells(self):
        r = scaling_report(1e15)
        assert round_up_pow10(r.inference_energy) == pytest.approx(1e-3)
        assert round_up_pow10(r.inference_time) == pytest.approx(1e-6)
        assert round_nearest_pow10(r.geometry.side) == pytest.approx(1e-2)
        assert round_nearest_pow10(r.geometry.length) == pytest.approx(10.0)

    def test_max_branch_switches_under_heavy_io(self):
        c = PhysicalConstants(io_cost_per_element=100e-12 * 1e6)
        r = scaling_report(1e12, c)
        assert r.inference_energy == pytest.approx(r.io_energy)
        assert r.io_energy > r.pulse_energy

    def test_invariants(self):
        for p in (1, 1e6, 1e12, 1e15, 1e18):
            r = scaling_report(p)
            assert r.inference_energy == max(r.io_energy, r.pulse_energy)
            assert r.inference_time == pytest.approx(
                max(r.pulse_energy / C.avg_power_cap, r.propagation_delay)
            )
            for name, v in scaling.report_to_dict(r).items():
                if name == "geometry":
                    continue
                assert math.isfinite(v) and v > 0, (name, v)

    def test_p13_energy_scaling(self):
        reports = [scaling_report(p) for p in (1e12, 1e15, 1e18)]
        for lo, hi in zip(reports, reports[1:]):
            ratio = math.log10(hi.inference_energy / lo.inference_energy)
            assert abs(ratio - 1.0) <= 0.05

    def test_json_round_trip_is_fixed_point(self):
        text = report_to_json(scaling_report(1e12))
        again = report_to_json(report_from_json(text))
        assert text == again

    def test_csv_has_row_per_report(self):
        text = scaling.reports_to_csv([scaling_report(p) for p in (1e12, 1e15)])
        lines = text.strip().split("\n")
        assert len(lines) == 3


class TestRounding:
    @pytest.mark.parametrize("x,up,down", [
        (44e-6, 100e-6, 10e-6),
        (2.27e7, 1e8, 1e7),
        (1e-3, 1e-3, 1e-3),
        (0.024, 0.1, 0.01),
    ])
    def test_pow10(self, x, up, down):
        assert round_up_pow10(x) == pytest.approx(up)
        assert round_down_pow10(x) == pytest.approx(down)

    def test_nearest(self):
        assert round_nearest_pow10(1.0333e-3) == pytest.approx(1e-3)
        assert round_nearest_pow10(103.33) == pytest.approx(100.0)

    def test_format_si(self):
        assert scaling.format_si(62.9e-6, "J") == "62.9 uJ"
        assert scaling.format_si(0.024, "s") == "24 ms"

    def test_format_length(self):
        assert scaling.format_length(1e-3) == "1 mm"
        assert scaling.format_length(1e-2) == "1 cm"
        assert scaling.format_length(0.1) == "10 cm"
        assert scaling.format_length(0.17334, 2) == "17 cm"
        assert scaling.format_length(100.0) == "100 m"


class TestConstants:
    def test_rejects_nonpositive(self):
        with pytest.raises(ScalingError):
            PhysicalConstants(refractive_index=0)

    def test_rejects_nonoptical_wavelength(self):
        with pytest.raises(ScalingError):
            PhysicalConstants(wavelength_vacuum=50e-9)

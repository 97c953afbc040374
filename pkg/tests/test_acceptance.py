"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL
line (run with ``pytest tests/test_acceptance.py -s`` to see them live).

A1/A2 pin the closed-form arithmetic to the published reference numbers at
their stated tolerances. B1-B5 verify the simulated device lifecycle:
propagation physics, gradient correctness against the finite-difference
oracle, desk-grid trainability, variability recovery, and ensemble
dominance. Every tolerance is fixed here, not tuned at runtime.
"""

import math
import time

import numpy as np
import pytest

from pfmdesk import scaling
from pfmdesk.medium import (
    OpticalField,
    PropagationSettings,
    VoxelMedium,
    design_hash,
    desk_design,
    desk_settings,
)
from pfmdesk.propagation import (
    encode_input,
    nonlinearity_witness,
    propagate,
    propagate_amplitude,
    extract_linear_matrix,
)
from pfmdesk.training import (
    TrainConfig,
    desk_train_config,
    gradient_adjoint,
    gradient_fd,
    make_toy_dataset,
    train,
)
from pfmdesk.variability import (
    PerturbationSpec,
    ReprogrammableMask,
    evaluate,
    fit_compensation,
    finetune_reprogrammable,
    perturb,
)
from pfmdesk.ensemble import (
    ExpertPool,
    single_expert_accuracies,
    spawn_ensemble,
    specialize_expert,
    train_router,
    evaluate_ensemble,
)

pytestmark = pytest.mark.acceptance

WAVELENGTH = 1550e-9
DESK_PITCH = (1.0333e-6, 1.0333e-6, 1.0333e-5)


class Criterion:
    """Collects sub-checks for one criterion and prints a single verdict."""

    def __init__(self, name: str, runtime_budget_s: float):
        self.name = name
        self.budget = runtime_budget_s
        self.failures: list[str] = []
        self.t0 = time.monotonic()

    def check(self, ok: bool, msg: str):
        if not ok:
            self.failures.append(msg)

    def finish(self, detail: str = ""):
        elapsed = time.monotonic() - self.t0
        if elapsed > self.budget:
            self.failures.append(f"runtime {elapsed:.1f}s exceeds {self.budget:.0f}s budget")
        ok = not self.failures
        verdict = "PASS" if ok else "FAIL"
        extra = f" ({detail})" if detail else ""
        print(f"[acceptance] {self.name}: {verdict} in {elapsed:.1f}s{extra}", flush=True)
        assert ok, f"{self.name}: " + "; ".join(self.failures)


# ---------------------------------------------------------------------------
# A1: Table reproduction
# ---------------------------------------------------------------------------

def test_a1_table_reproduction():
    c = Criterion("A1 table reproduction", runtime_budget_s=1.0)
    consts = scaling.PhysicalConstants()
    reports = {p: scaling.scaling_report(p, consts) for p in (1e12, 1e15, 1e18)}

    # Optical size cells: (1 mm)^2 x 1 m, (1 cm)^2 x 10 m, (10 cm)^2 x 100 m.
    size_cells = {1e12: (1e-3, 1.0), 1e15: (1e-2, 10.0), 1e18: (1e-1, 100.0)}
    for p, (side, length) in size_cells.items():
        g = reports[p].geometry
        c.check(
            math.isclose(scaling.round_nearest_pow10(g.side), side, rel_tol=1e-12)
            and math.isclose(scaling.round_nearest_pow10(g.length), length, rel_tol=1e-12),
            f"P={p:.0e} size cell: got side {g.side:.3e}, length {g.length:.3e}",
        )
    # Optical energy cells: 100 uJ, 1 mJ, 10 mJ (rounded up to a power of 10).
    energy_cells = {1e12: 1e-4, 1e15: 1e-3, 1e18: 1e-2}
    for p, cell in energy_cells.items():
        got = scaling.round_up_pow10(reports[p].inference_energy)
        c.check(math.isclose(got, cell, rel_tol=1e-12),
                f"P={p:.0e} energy cell {got} != {cell}")
    # Optical time cells: 100 ns, 1 us, 10 us.
    time_cells = {1e12: 1e-7, 1e15: 1e-6, 1e18: 1e-5}
    for p, cell in time_cells.items():
        got = scaling.round_up_pow10(reports[p].inference_time)
        c.check(math.isclose(got, cell, rel_tol=1e-12),
                f"P={p:.0e} time cell {got} != {cell}")
    # Digital energy cells are exact: 1 J, 1 kJ, 1 MJ.
    for p, cell in {1e12: 1.0, 1e15: 1e3, 1e18: 1e6}.items():
        c.check(math.isclose(reports[p].digital_energy, cell, rel_tol=1e-12),
                f"P={p:.0e} digital energy {reports[p].digital_energy} != {cell}")
    # Digital time: 24 ms computed, published cell reads ~25 ms.
    for p in reports:
        t = reports[p].digital_time
        c.check(math.isclose(t, 0.024, rel_tol=1e-12), f"digital time {t} != 24 ms")
        c.check(abs(t - 0.025) / 0.025 <= 0.05, f"digital time {t} vs 25 ms cell")
    # Digital cube sides: (17 cm)^3, (1.7 m)^3, (17 m)^3 within 2%.
    for p, cell in {1e12: 0.17, 1e15: 1.7, 1e18: 17.0}.items():
        got = reports[p].digital_cube_side
        c.check(abs(got - cell) / cell <= 0.02, f"P={p:.0e} cube {got:.4f} vs {cell}")
    # Raw pulse energies from the published peak powers (the consistent
    # P^(1/3) family 44 MW / 440 MW / 4.4 GW): 44 uJ / 440 uJ / 4.4 mJ.
    for p0, e in ((44e6, 44e-6), (440e6, 440e-6), (4.4e9, 4.4e-3)):
        got = scaling.pulse_energy(p0, consts)
        c.check(abs(got - e) / e <= 0.02, f"pulse_energy({p0:.2e}) = {got:.3e} vs {e:.3e}")
    # Computed peak powers within a factor of 5 of the published 44 MW /
    # 450 MW / 4.5 GW (source geometry is underdetermined).
    for p, ref in {1e12: 44e6, 1e15: 450e6, 1e18: 4.5e9}.items():
        ratio = reports[p].peak_power / ref
        c.check(0.2 <= ratio <= 5.0, f"P={p:.0e} peak power ratio {ratio:.2f}")
    c.finish("18 table cells + pulse energies + peak powers")


# ---------------------------------------------------------------------------
# A2: supporting arithmetic
# ---------------------------------------------------------------------------

def test_a2_appendix_arithmetic():
    c = Criterion("A2 supporting arithmetic", runtime_budget_s=1.0)
    # Mode count at 5 cm x 5 cm, n = 1.5, lambda = 1 um: the formula
    # A n^2 / lambda^2 evaluates to 5.625e9. (The source text prints
    # 3.75e9 for the same inputs, which matches A n / lambda^2; we
    # implement the stated formula.)
    c1um = scaling.PhysicalConstants(wavelength_vacuum=1e-6)
    modes = scaling.guided_modes(0.05 * 0.05, c1um)
    c.check(abs(modes - 5.625e9) / 5.625e9 < 1e-9, f"mode count {modes}")
    # I/O bandwidth: 1e9 dims x 2 bits x 100 MHz = 25 PB/s.
    bw = scaling.io_bandwidth(10**9, 2, 100e6)
    c.check(math.isclose(bw, 2.5e16, rel_tol=1e-12), f"io bandwidth {bw}")
    # Metasurface capacity: 300 mm wafer at 250 nm pitch, > 1e12.
    cap = scaling.metasurface_capacity(0.3, 250e-9)
    c.check(cap == 1130973355292, f"metasurface capacity {cap}")
    c.check(cap > 10**12, "capacity must exceed 1e12")
    # Memory wall: 266.7 m^2 and 92.6 days, within 10% of the published
    # ~250 m^2 and ~90 days.
    wall = scaling.memory_wall(1e18, 8, 30e9 * 1e6, 1e12, 50e-6)
    c.check(abs(wall.storage_area - 266.667) < 0.1, f"area {wall.storage_area}")
    c.check(abs(wall.storage_area - 250) / 250 <= 0.10, "area vs 250 m^2")
    days = wall.read_time / 86400
    c.check(abs(days - 92.59) < 0.05, f"read-in {days} days")
    c.check(abs(days - 90) / 90 <= 0.10, "read-in vs 90 days")
    # Inference rates round down to 10 MHz / 1 MHz / 100 kHz.
    for p, cell in {1e12: 1e7, 1e15: 1e6, 1e18: 1e5}.items():
        rep = scaling.scaling_report(p)
        got = scaling.round_down_pow10(rep.inference_rate)
        c.check(math.isclose(got, cell, rel_tol=1e-12), f"P={p:.0e} rate cell {got}")
    c.finish()


# ---------------------------------------------------------------------------
# B1: propagation physics on the desk grid
# ---------------------------------------------------------------------------

def _random_desk_medium(seed=0, scale=0.01, shape=(128, 64, 64)):
    rng = np.random.default_rng(seed)
    return VoxelMedium(rng.normal(0, scale, shape).clip(-0.1, 0.1), DESK_PITCH)


def test_b1_propagation_physics():
    c = Criterion("B1 propagation physics", runtime_budget_s=120.0)
    kerr = desk_settings()
    linear = PropagationSettings(kerr_enabled=False)

    # Power conservation on the full desk grid (unitary configuration).
    design = desk_design().with_medium(_random_desk_medium(seed=1))
    rng = np.random.default_rng(2)
    v = rng.normal(size=16)
    v /= np.linalg.norm(v)
    f_in = encode_input(v, design)
    f_out = propagate(f_in, design.medium, kerr)
    cons = abs(f_out.power() - f_in.power()) / f_in.power()
    c.check(cons <= 1e-9, f"power conservation error {cons:.2e}")

    # Plane-wave Kerr phase against the closed form, to 1e-3 relative.
    intensity = 1e16
    uniform = VoxelMedium(np.zeros((128, 64, 64)), DESK_PITCH)
    amp = np.full((64, 64), math.sqrt(intensity), dtype=complex)
    out = propagate(OpticalField(amp, WAVELENGTH, DESK_PITCH[:2]), uniform, kerr)
    expected = (2 * math.pi / WAVELENGTH) * kerr.n2 * intensity * uniform.length
    got = float(np.angle(out.amplitude[0, 0]))
    got += 2 * math.pi * round((expected - got) / (2 * math.pi))
    c.check(abs(got - expected) / expected <= 1e-3,
            f"plane-wave Kerr phase {got:.6f} vs {expected:.6f}")

    # Superposition of the linear field map at full desk scale, to 1e-9.
    m = design.medium
    w1 = rng.normal(size=(64, 64)) + 1j * rng.normal(size=(64, 64))
    w2 = rng.normal(size=(64, 64)) + 1j * rng.normal(size=(64, 64))
    alpha, beta = 0.8 - 0.3j, -0.4 + 0.9j
    lhs = propagate_amplitude(alpha * w1 + beta * w2, m, linear, WAVELENGTH)
    rhs = alpha * propagate_amplitude(w1, m, linear, WAVELENGTH) \
        + beta * propagate_amplitude(w2, m, linear, WAVELENGTH)
    sup = np.max(np.abs(lhs - rhs)) / np.max(np.abs(lhs))
    c.check(sup <= 1e-9, f"superposition error {sup:.2e}")

    # Literal unitarity of the extracted matrix. Probing all 4096 desk
    # pixels breaks the runtime budget, so the matrix test runs at the desk
    # z-depth with a reduced 16x16 cross-section; the full-grid map is
    # covered operationally just below.
    m_small = VoxelMedium(
        np.random.default_rng(3).normal(0, 0.01, (128, 16, 16)).clip(-0.1, 0.1),
        DESK_PITCH,
    )
    M = extract_linear_matrix(m_small, linear, wavelength=WAVELENGTH)
    gram_err = np.max(np.abs(M.conj().T @ M - np.eye(256)))
    c.check(gram_err <= 1e-6, f"unitarity |M^H M - I| = {gram_err:.2e}")

    # Operational unitarity on the full desk grid: norms and inner products
    # preserved for random fields.
    x = rng.normal(size=(64, 64)) + 1j * rng.normal(size=(64, 64))
    y = rng.normal(size=(64, 64)) + 1j * rng.normal(size=(64, 64))
    mx = propagate_amplitude(x, m, linear, WAVELENGTH)
    my = propagate_amplitude(y, m, linear, WAVELENGTH)
    ip_err = abs(np.vdot(mx, my) - np.vdot(x, y)) / abs(np.vdot(x, y))
    c.check(ip_err <= 1e-6, f"inner-product preservation {ip_err:.2e}")

    # Step-halving convergence order >= 1.8 on a smooth medium, probed with
    # a smooth beam (a hard-edged input carries high-k content whose large
    # per-step spectral phases sit outside the asymptotic regime).
    xg = np.linspace(0, 2 * math.pi, 64, endpoint=False)
    profile = 0.02 * np.sin(xg)[:, None] * np.cos(xg)[None, :]
    dn = np.stack([profile * math.sin(math.pi * (j + 0.5) / 128) for j in range(128)])
    smooth = VoxelMedium(dn, DESK_PITCH)
    xs = (np.arange(64) - 31.5) * DESK_PITCH[0]
    waist = 12 * DESK_PITCH[0]
    beam = (
        math.sqrt(2e16)
        * np.exp(-(xs[:, None] ** 2 + xs[None, :] ** 2) / waist**2)
    ).astype(complex)
    outs = {}
    for sub in (1, 2, 4):
        s = PropagationSettings(kerr_enabled=True, n2=1e-20, z_steps_per_voxel=sub)
        outs[sub] = propagate_amplitude(beam, smooth, s, WAVELENGTH)
    order = math.log2(
        np.linalg.norm(outs[1] - outs[2]) / np.linalg.norm(outs[2] - outs[4])
    )
    c.check(order >= 1.8, f"step-halving order {order:.2f}")
    c.finish(f"conservation {cons:.1e}, unitarity {gram_err:.1e}, order {order:.2f}")


# ---------------------------------------------------------------------------
# B2: gradient correctness
# ---------------------------------------------------------------------------

def _grad_probe(seed, kerr_on):
    from pfmdesk.medium import FacetMap, PfmDesign

    rng = np.random.default_rng(seed)
    dn = rng.normal(0, 0.01, (8, 8, 8)).clip(-0.1, 0.1)
    design = PfmDesign(
        medium=VoxelMedium(dn, DESK_PITCH),
        input_map=FacetMap((8, 8), (2, 2)),
        output_map=FacetMap((8, 8), (2, 2)),
        peak_power_scale=1e7,
        wavelength_vacuum=WAVELENGTH,
    )
    v = rng.normal(size=(4, 4))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    labels = rng.integers(0, 4, size=4)
    settings = PropagationSettings(kerr_enabled=kerr_on, n2=1e-20)
    cfg = TrainConfig()
    g_adj = gradient_adjoint(design, (v, labels), cfg, settings)
    g_fd = gradient_fd(design, (v, labels), cfg, settings)
    scale = np.max(np.abs(g_fd))
    denom = np.maximum(np.abs(g_fd), 1e-3 * scale)
    return float(np.max(np.abs(g_adj - g_fd) / denom))


def test_b2_gradient_correctness():
    c = Criterion("B2 gradient correctness", runtime_budget_s=300.0)
    err_lin = _grad_probe(seed=0, kerr_on=False)
    c.check(err_lin <= 1e-4, f"linear adjoint-FD error {err_lin:.2e} > 1e-4")
    err_kerr = _grad_probe(seed=0, kerr_on=True)
    c.check(err_kerr <= 1e-3, f"Kerr adjoint-FD error {err_kerr:.2e} > 1e-3")
    c.finish(f"linear {err_lin:.1e}, kerr {err_kerr:.1e}")


# ---------------------------------------------------------------------------
# B3-B5 share one trained desk design (expensive, built once)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def desk_task():
    t0 = time.monotonic()
    dataset = make_toy_dataset(classes=4, dim=16, samples=400, seed=7)
    settings = desk_settings()
    cfg = desk_train_config(steps=150)
    best, history = train(desk_design(), dataset, cfg, settings)
    return {
        "design": best,
        "dataset": dataset,
        "settings": settings,
        "history": history,
        "train_seconds": time.monotonic() - t0,
    }


@pytest.mark.slow
def test_b3_trainability(desk_task):
    c = Criterion("B3 desk-grid trainability", runtime_budget_s=1800.0)
    c.t0 -= desk_task["train_seconds"]  # charge fixture cost to this criterion
    hist = desk_task["history"]
    best_acc = float(hist.val_accuracy.max())
    c.check(len(hist) <= 500, f"ran {len(hist)} steps")
    c.check(best_acc >= 0.90, f"best validation accuracy {best_acc:.3f} < 0.90")
    c.check(not hist.diverged, "training diverged")
    # Nonlinearity witness on the trained design, probed at half amplitude
    # so the alpha=2 leg sits exactly at the design operating power. (At
    # 4x the operating intensity the trained focusing structure undergoes
    # genuine self-focusing collapse and the simulator refuses the step,
    # which is correct physics but not a usable homogeneity probe.)
    wit = nonlinearity_witness(
        desk_task["design"], desk_task["settings"],
        0.5 * desk_task["dataset"].inputs[0],
    )
    c.check(wit > 1e-3, f"nonlinearity witness {wit:.2e} <= 1e-3")
    c.finish(f"best acc {best_acc:.3f}, witness {wit:.2e}")


@pytest.mark.slow
def test_b4_variability_pipeline(desk_task):
    c = Criterion("B4 variability pipeline", runtime_budget_s=3600.0)
    design = desk_task["design"]
    dataset = desk_task["dataset"]
    settings = desk_task["settings"]

    # sigma = 0 must be an exact no-op.
    noop = design.with_medium(perturb(design.medium, PerturbationSpec(sigma=0.0, seed=0)))
    c.check(design_hash(noop) == design_hash(design), "sigma=0 changed the design hash")
    m0 = evaluate(design, dataset, settings, precision="single")
    m1 = evaluate(noop, dataset, settings, precision="single")
    c.check(m0 == m1, "sigma=0 changed metrics")

    raw_accs, comp_accs, ft_accs = [], [], []
    for seed in range(5):
        spec = PerturbationSpec(sigma=0.003, seed=seed)
        p = design.with_medium(perturb(design.medium, spec))
        raw = evaluate(p, dataset, settings, precision="single")["accuracy"]
        stack = fit_compensation(p, dataset, settings, steps=100, seed=0, precision="single")
        comp = evaluate(p, dataset, settings, stack, precision="single")["accuracy"]
        mask = ReprogrammableMask.random(p.medium, 0.05, seed=seed)
        cfg = TrainConfig(learning_rate=3e-4, steps=100, batch_size=32, seed=0,
                          precision="single")
        tuned = finetune_reprogrammable(p, mask, dataset, cfg, settings)
        ft = evaluate(tuned, dataset, settings, precision="single")["accuracy"]
        raw_accs.append(raw)
        comp_accs.append(comp)
        ft_accs.append(ft)
        c.check(comp >= raw, f"seed {seed}: compensation hurt ({comp:.3f} < {raw:.3f})")
        c.check(ft >= raw, f"seed {seed}: fine-tuning hurt ({ft:.3f} < {raw:.3f})")
    raw_m, comp_m, ft_m = map(np.mean, (raw_accs, comp_accs, ft_accs))
    c.check(comp_m > raw_m, f"compensation mean {comp_m:.3f} not > raw {raw_m:.3f}")
    c.check(ft_m > raw_m, f"fine-tune mean {ft_m:.3f} not > raw {raw_m:.3f}")
    c.finish(f"raw {raw_m:.3f}, compensated {comp_m:.3f}, fine-tuned {ft_m:.3f}")


@pytest.mark.slow
def test_b5_ensemble_dominance(desk_task):
    c = Criterion("B5 ensemble dominance", runtime_budget_s=3600.0)
    design = desk_task["design"]
    dataset = desk_task["dataset"]
    settings = desk_task["settings"]

    # Specialists are constructed by perturbing hard enough to break the
    # base (sigma = 0.005 drops it well below ceiling) and then fine-tuning
    # each copy's reprogrammable voxels on half the classes.
    ens_accs, solo_best, util_own = [], [], []
    val_x, val_y = dataset.val_split()
    for seed in range(5):
        pool0 = spawn_ensemble(design, 2, PerturbationSpec(sigma=0.005, seed=100 + 2 * seed))
        tcfg = TrainConfig(learning_rate=6e-4, steps=120, batch_size=32, seed=0,
                           precision="single")
        experts = []
        groups = ([0, 1], [2, 3])
        for expert, classes in zip(pool0.experts, groups):
            mask = ReprogrammableMask.random(expert.medium, 0.1, seed=seed)
            experts.append(specialize_expert(expert, dataset, classes, mask, tcfg, settings))
        pool = ExpertPool(tuple(experts), provenance=pool0.provenance)
        hashes_before = pool.hashes()
        rcfg = TrainConfig(learning_rate=0.5, steps=60, batch_size=32, seed=0,
                           precision="single")
        router = train_router(pool, dataset, rcfg, settings)
        c.check(pool.hashes() == hashes_before,
                f"seed {seed}: experts changed during router training")
        metrics = evaluate_ensemble(pool, router, dataset, settings, precision="single")
        solo = single_expert_accuracies(pool, dataset, settings, precision="single")
        ens_accs.append(metrics["accuracy"])
        solo_best.append(float(solo.max()))
        top1 = np.argmax(router.route(val_x), axis=1)
        util_own.append([
            float(np.mean(top1[np.isin(val_y, cls)] == e)) for e, cls in enumerate(groups)
        ])
    ens_m, solo_m = np.mean(ens_accs), np.mean(solo_best)
    c.check(ens_m >= solo_m,
            f"ensemble mean {ens_m:.3f} below best-expert mean {solo_m:.3f}")
    # Routing concentrates on each specialist's own classes (seed-averaged).
    own_m = np.mean(util_own, axis=0)
    c.check(bool(np.all(own_m >= 0.7)),
            f"specialty routing fractions {own_m} below 0.7")
    c.finish(f"ensemble {ens_m:.3f} vs best expert {solo_m:.3f}, "
             f"specialty routing {own_m.round(2)}")

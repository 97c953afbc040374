"""Command-line pipeline: scaling reports, device simulation, training,
perturbation studies, and ensemble construction, each emitting a
reproducible report bundle.

A bundle is a directory of emitted files plus ``manifest.json`` listing
every file with its sha256 and the configuration hash that produced it.
Emitted bytes are fully determined by (config, seed, code version), with
one documented exception: wall-clock timing columns in training histories.
An exclusive lockfile guards each output directory against concurrent
writes.

Exit codes: 0 success; 2 bad configuration or arguments; 3 runtime failure
(infeasible geometry, corrupt design file, instability); 4 internal checks
requested via --check failed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import scaling
from .medium import (
    DesignError,
    PfmDesign,
    PropagationSettings,
    design_hash,
    load_design,
    make_tiled_design,
    save_design,
)
from .propagation import (
    StepInstabilityError,
    encode_input,
    infer_batch,
    nonlinearity_witness,
    propagate,
)
from .training import (
    TrainConfig,
    TrainingError,
    make_toy_dataset,
    train,
)
from .variability import (
    PerturbationSpec,
    ReprogrammableMask,
    VariabilityError,
    evaluate,
    fit_compensation,
    finetune_reprogrammable,
    perturb,
    sweep_rows_to_csv,
)
from .ensemble import (
    ExpertPool,
    Router,
    evaluate_ensemble,
    single_expert_accuracies,
    spawn_ensemble,
    specialize_expert,
    train_router,
)

SCHEMA_VERSION = 1
LOCKFILE = ".pfmdesk.lock"
ROUTER_MAGIC = b"PFMRTR01"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_CHECKS = 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------

# Constants overrides carry their unit in the key, matching the JSON report
# fields they feed.
_CONSTANT_KEYS = {
    "wavelength_vacuum_m": "wavelength_vacuum",
    "refractive_index": "refractive_index",
    "nonlinear_index_m2_per_w": "nonlinear_index",
    "pulse_duration_s": "pulse_duration",
    "io_cost_per_element_j": "io_cost_per_element",
    "avg_power_cap_w": "avg_power_cap",
    "nl_phase_target_rad": "nl_phase_target",
    "digital_op_cost_j": "digital_op_cost",
    "hbm_capacity_bytes": "hbm_capacity",
    "hbm_bandwidth_bytes_per_s": "hbm_bandwidth",
    "gpu_volume_m3": "gpu_volume",
    "digital_bytes_per_param": "digital_bytes_per_param",
    "beam_area_fraction": "beam_area_fraction",
}

_SCHEMAS = {
    "scale": {"schema_version", "constants", "params", "sweep", "aspect_ratio",
              "memory_wall", "metasurface", "io_bandwidth"},
    "simulate": {"schema_version", "design", "inputs", "settings"},
    "train": {"schema_version", "design", "dataset", "train", "settings"},
    "perturb": {"schema_version", "design", "perturbation", "dataset", "settings",
                "sigmas", "seeds", "variants", "compensation", "finetune"},
    "ensemble": {"schema_version", "design", "dataset", "settings", "pool",
                 "specialists", "router"},
}

_SETTINGS_KEYS = {"kerr_enabled", "n2_m2_per_w", "z_steps_per_voxel", "boundary"}
_DATASET_KEYS = {"classes", "dim", "samples", "seed", "separation"}
_TRAIN_KEYS = {"learning_rate", "steps", "batch_size", "gradient_mode", "fd_step",
               "seed", "logit_scale", "precision"}


def load_config(path: str | None, command: str) -> dict:
    cfg = {}
    if path:
        try:
            cfg = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(cfg) - _SCHEMAS[command]
    if unknown:
        raise ConfigError(
            f"unknown config keys for '{command}': {sorted(unknown)} "
            f"(allowed: {sorted(_SCHEMAS[command])})"
        )
    version = cfg.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}, expected {SCHEMA_VERSION}")
    return cfg


def _check_keys(section: dict, allowed: set, name: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)} (allowed: {sorted(allowed)})")


def constants_from_config(cfg: dict) -> scaling.PhysicalConstants:
    overrides = cfg.get("constants", {})
    _check_keys(overrides, set(_CONSTANT_KEYS), "constants")
    kwargs = {_CONSTANT_KEYS[k]: float(v) for k, v in overrides.items()}
    return scaling.PhysicalConstants(**kwargs)


def settings_from_config(cfg: dict) -> PropagationSettings:
    s = cfg.get("settings", {})
    _check_keys(s, _SETTINGS_KEYS, "settings")
    return PropagationSettings(
        kerr_enabled=bool(s.get("kerr_enabled", True)),
        n2=float(s.get("n2_m2_per_w", 1e-20)),
        z_steps_per_voxel=int(s.get("z_steps_per_voxel", 1)),
        boundary=s.get("boundary", "periodic"),
    )


def dataset_from_config(cfg: dict, seed_override: int | None):
    d = cfg.get("dataset")
    if d is None:
        raise ConfigError("this command needs a 'dataset' section")
    _check_keys(d, _DATASET_KEYS, "dataset")
    return make_toy_dataset(
        classes=int(d.get("classes", 4)),
        dim=int(d.get("dim", 16)),
        samples=int(d.get("samples", 400)),
        seed=int(seed_override if seed_override is not None else d.get("seed", 7)),
        separation=float(d.get("separation", 6.0)),
    )


def train_config_from(cfg: dict, seed_override: int | None) -> TrainConfig:
    t = cfg.get("train", {})
    _check_keys(t, _TRAIN_KEYS, "train")
    kwargs = dict(t)
    if seed_override is not None:
        kwargs["seed"] = seed_override
    return TrainConfig(**kwargs)


def config_hash(cfg: dict, seed: int | None) -> str:
    canon = json.dumps({"config": cfg, "seed": seed}, sort_keys=True).encode()
    return hashlib.sha256(canon).hexdigest()


def parse_sweep(text: str) -> list[float]:
    """A:B:xK geometric sweep, inclusive of both ends (K also accepted as 'Kx')."""
    try:
        lo_s, hi_s, k_s = text.split(":")
        factor = float(k_s.lower().strip().removeprefix("x").removesuffix("x"))
        lo, hi = float(lo_s), float(hi_s)
    except ValueError as exc:
        raise ConfigError(f"bad sweep {text!r}, expected A:B:xK") from exc
    if lo <= 0 or hi < lo or factor <= 1:
        raise ConfigError(f"bad sweep {text!r}: need 0 < A <= B and K > 1")
    out = []
    p = lo
    while p <= hi * (1 + 1e-9):
        out.append(p)
        p *= factor
    return out


# ---------------------------------------------------------------------------
# Report bundles
# ---------------------------------------------------------------------------

class ReportBundle:
    """Collects emitted files under one directory and writes the manifest."""

    def __init__(self, out_dir: str, command: str, cfg_hash: str):
        self.dir = Path(out_dir)
        self.command = command
        self.cfg_hash = cfg_hash
        self.files: dict[str, str] = {}
        self.dir.mkdir(parents=True, exist_ok=True)
        self._lock = self.dir / LOCKFILE
        try:
            self._lock_fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"output directory {out_dir} is locked by another run "
                f"(remove {self._lock} if stale)"
            )

    def write_text(self, name: str, text: str):
        path = self.dir / name
        path.write_text(text)
        self.files[name] = hashlib.sha256(text.encode()).hexdigest()

    def write_config(self, cfg: dict):
        # The effective config round-trips: parse(serialize(parse(x))) is a
        # fixed point, and reruns can consume the emitted file directly.
        self.write_json("config.json", cfg)

    def write_json(self, name: str, obj):
        self.write_text(name, json.dumps(obj, sort_keys=True, indent=2) + "\n")

    def add_file(self, name: str):
        """Register a file written directly into the bundle directory."""
        data = (self.dir / name).read_bytes()
        self.files[name] = hashlib.sha256(data).hexdigest()

    def close(self) -> Path:
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "code_version": __version__,
            "config_hash": self.cfg_hash,
            "files": self.files,
        }
        path = self.dir / "manifest.json"
        path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
        os.close(self._lock_fd)
        self._lock.unlink(missing_ok=True)
        return path

    def abandon(self):
        os.close(self._lock_fd)
        self._lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# Router file format
# ---------------------------------------------------------------------------

def save_router(path, router: Router, provenance: dict | None = None):
    import struct

    header = {
        "schema_version": SCHEMA_VERSION,
        "n_experts": router.n_experts,
        "input_dim": router.weights.shape[1],
        "top_k": router.top_k,
        "layout": "weights_f4_then_bias_f4",
    }
    if provenance:
        header["provenance"] = provenance
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(ROUTER_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(router.weights.astype("<f4").tobytes(order="C"))
        f.write(router.bias.astype("<f4").tobytes(order="C"))


def load_router(path) -> Router:
    import struct

    with open(path, "rb") as f:
        if f.read(len(ROUTER_MAGIC)) != ROUTER_MAGIC:
            raise DesignError(f"{path}: not a router file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        e, d = header["n_experts"], header["input_dim"]
        w = np.frombuffer(f.read(e * d * 4), dtype="<f4").reshape(e, d).astype(np.float64)
        b = np.frombuffer(f.read(e * 4), dtype="<f4").astype(np.float64)
    return Router(weights=w, bias=b, top_k=header["top_k"])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_scale(args) -> int:
    cfg = load_config(args.config, "scale")
    constants = constants_from_config(cfg)
    if args.params:
        params = [float(p) for p in args.params.split(",")]
    else:
        params = [float(p) for p in cfg.get("params", [1e12, 1e15, 1e18])]
    if any(p < 1 for p in params):
        raise ConfigError(f"parameter counts must be >= 1, got {params}")
    aspect = float(cfg.get("aspect_ratio", 1000.0))

    bundle = ReportBundle(args.out, "scale", config_hash(cfg, args.seed))
    try:
        bundle.write_config(cfg)
        reports = [scaling.scaling_report(p, constants, aspect_ratio=aspect) for p in params]
        for rep in reports:
            bundle.write_text(
                f"report_p{rep.param_count:.0e}.json".replace("+", ""),
                scaling.report_to_json(rep),
            )
        bundle.write_text("table.txt", scaling.render_table(reports))
        bundle.write_text("reports.csv", scaling.reports_to_csv(reports))

        if args.sweep or cfg.get("sweep"):
            sweep_params = parse_sweep(args.sweep or cfg["sweep"])
            sweep_reports = [
                scaling.scaling_report(p, constants, aspect_ratio=aspect) for p in sweep_params
            ]
            bundle.write_text("sweep.csv", scaling.reports_to_csv(sweep_reports))

        mw = cfg.get("memory_wall", {})
        _check_keys(mw, {"param_count", "bits_per_param", "density_bits_per_m2",
                         "bandwidth_bits_per_s", "layer_thickness_m"}, "memory_wall")
        wall = scaling.memory_wall(
            float(mw.get("param_count", 1e18)),
            float(mw.get("bits_per_param", 8)),
            float(mw.get("density_bits_per_m2", 30e9 * 1e6)),
            float(mw.get("bandwidth_bits_per_s", 1e12)),
            float(mw.get("layer_thickness_m", 50e-6)),
        )
        ms = cfg.get("metasurface", {})
        _check_keys(ms, {"wafer_diameter_m", "pixel_pitch_m"}, "metasurface")
        io = cfg.get("io_bandwidth", {})
        _check_keys(io, {"n_dim", "bits_per_element", "rate_hz"}, "io_bandwidth")
        side = {
            "memory_wall": {
                "param_count": wall.param_count,
                "storage_area_m2": wall.storage_area,
                "stacked_volume_m3": wall.stacked_volume,
                "read_time_s": wall.read_time,
                "read_time_days": wall.read_time / 86400.0,
            },
            "metasurface_capacity": scaling.metasurface_capacity(
                float(ms.get("wafer_diameter_m", 0.3)), float(ms.get("pixel_pitch_m", 250e-9))
            ),
            "io_bandwidth_bytes_per_s": scaling.io_bandwidth(
                int(io.get("n_dim", 10**9)), float(io.get("bits_per_element", 2)),
                float(io.get("rate_hz", 100e6)),
            ),
        }
        bundle.write_json("appendix.json", side)
    except Exception:
        bundle.abandon()
        raise
    bundle.close()
    print(f"scale: wrote {len(bundle.files) + 1} files to {bundle.dir}")
    return EXIT_OK


def _load_inputs(path: str, dim: int) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".json":
        arr = np.asarray(json.loads(p.read_text()), dtype=np.float64)
    else:
        arr = np.loadtxt(p, delimiter=",", dtype=np.float64, ndmin=2)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ConfigError(f"inputs {path}: expected shape (n, {dim}), got {arr.shape}")
    return arr


def _run_checks(design: PfmDesign, settings: PropagationSettings) -> dict:
    """Standing invariant suite behind --check: conservation, the plane-wave
    phase oracle, and the nonlinearity witness."""
    import dataclasses

    nx, ny, _ = design.medium.grid_shape
    results = {}
    # Power conservation on a unitary configuration of this grid.
    unitary = PropagationSettings(
        kerr_enabled=settings.kerr_enabled, n2=settings.n2,
        z_steps_per_voxel=settings.z_steps_per_voxel, boundary="periodic",
    )
    gain_free = dataclasses.replace(design.medium, gain_per_step=1.0)
    rng = np.random.default_rng(0)
    v = rng.normal(size=design.input_dim)
    v /= np.linalg.norm(v)
    f_in = encode_input(v, design)
    f_out = propagate(f_in, gain_free, unitary)
    cons_err = abs(f_out.power() - f_in.power()) / f_in.power()
    results["power_conservation_rel_error"] = cons_err
    results["power_conservation_ok"] = bool(cons_err < 1e-9)
    # Plane-wave phase against the closed form.
    delta = 0.01
    m = dataclasses.replace(
        gain_free, delta_n=np.full(design.medium.delta_n.shape, delta)
    )
    from .medium import OpticalField

    amp = np.ones((nx, ny), dtype=complex)
    out = propagate(
        OpticalField(amp, design.wavelength_vacuum, design.medium.voxel_pitch[:2]),
        m,
        PropagationSettings(kerr_enabled=False, boundary="periodic"),
    )
    expected = (2 * math.pi / design.wavelength_vacuum) * delta * m.length
    got = float(np.angle(out.amplitude[0, 0]))
    phase_err = abs((got - expected + math.pi) % (2 * math.pi) - math.pi)
    results["plane_wave_phase_error_rad"] = phase_err
    results["plane_wave_phase_ok"] = bool(phase_err < 1e-6)
    if settings.kerr_enabled:
        # Half-amplitude probe: the alpha=2 witness leg then runs at the
        # design operating power instead of 4x it, which on focusing
        # designs would cross the self-focusing stability bound.
        results["nonlinearity_witness"] = nonlinearity_witness(design, settings, 0.5 * v)
    results["all_ok"] = bool(results["power_conservation_ok"] and results["plane_wave_phase_ok"])
    return results


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, "simulate")
    settings = settings_from_config(cfg)
    design_path = args.design or cfg.get("design")
    if not design_path:
        raise ConfigError("simulate needs --design or a 'design' path in the config")
    design, header = load_design(design_path)
    inputs_path = args.inputs or cfg.get("inputs")

    bundle = ReportBundle(args.out, "simulate", config_hash(cfg, args.seed))
    try:
        bundle.write_config(cfg)
        diag = {"design_hash": header["content_hash"]}
        if inputs_path:
            vectors = _load_inputs(inputs_path, design.input_dim)
            outputs = infer_batch(vectors, design, settings)
            lines = [",".join(f"bin{i}" for i in range(design.output_dim))]
            lines += [",".join(repr(float(x)) for x in row) for row in outputs]
            bundle.write_text("outputs.csv", "\n".join(lines) + "\n")
            powers = [encode_input(v, design).power() for v in vectors]
            diag["input_power_w"] = powers
            diag["output_power_w"] = [float(row.sum()) for row in outputs]
        checks = None
        if args.check:
            checks = _run_checks(design, settings)
            bundle.write_json("checks.json", checks)
        bundle.write_json("diagnostics.json", diag)
    except Exception:
        bundle.abandon()
        raise
    bundle.close()
    if args.check and not checks["all_ok"]:
        print("simulate: checks FAILED", file=sys.stderr)
        return EXIT_CHECKS
    print(f"simulate: wrote results to {bundle.dir}")
    return EXIT_OK


def _design_from_config(cfg: dict) -> PfmDesign:
    d = cfg.get("design", {})
    if isinstance(d, str):
        return load_design(d)[0]
    _check_keys(d, {"grid", "voxel_pitch_m", "input_tiles", "output_tiles",
                    "peak_power_scale_w", "wavelength_vacuum_m", "init_scale",
                    "init_seed"}, "design")
    from .medium import DESK_GRID, DESK_PITCH, DESK_PEAK_POWER

    grid = tuple(d.get("grid", DESK_GRID))
    pitch = tuple(d.get("voxel_pitch_m", DESK_PITCH))
    init_scale = float(d.get("init_scale", 0.0))
    delta_n = None
    if init_scale > 0:
        rng = np.random.default_rng(int(d.get("init_seed", 0)))
        delta_n = rng.normal(0, init_scale, (grid[2], grid[0], grid[1])).clip(-0.1, 0.1)
    return make_tiled_design(
        grid, pitch,
        input_tiles=tuple(d.get("input_tiles", (4, 4))),
        output_tiles=tuple(d.get("output_tiles", (2, 2))),
        delta_n=delta_n,
        peak_power_scale=float(d.get("peak_power_scale_w", DESK_PEAK_POWER)),
        wavelength_vacuum=float(d.get("wavelength_vacuum_m", 1550e-9)),
    )


def cmd_train(args) -> int:
    cfg = load_config(args.config, "train")
    settings = settings_from_config(cfg)
    dataset = dataset_from_config(cfg, None)
    tcfg = train_config_from(cfg, args.seed)
    if args.design:
        design = load_design(args.design)[0]
    else:
        design = _design_from_config(cfg)

    bundle = ReportBundle(args.out, "train", config_hash(cfg, args.seed))
    try:
        bundle.write_config(cfg)
        best, history = train(design, dataset, tcfg, settings)
        provenance = {
            "config_hash": bundle.cfg_hash,
            "dataset_seed": dataset.seed,
            "code_version": __version__,
        }
        save_design(bundle.dir / "trained.pfm", best, provenance=provenance)
        bundle.add_file("trained.pfm")
        bundle.write_text("history.csv", history.to_csv())
        metrics = evaluate(best, dataset, settings, logit_scale=tcfg.logit_scale,
                           precision=tcfg.precision)
        bundle.write_json("summary.json", {
            "steps_run": len(history),
            "diverged": history.diverged,
            "best_val_accuracy": metrics["accuracy"],
            "val_loss": metrics["loss"],
            "design_hash": design_hash(best),
        })
    except Exception:
        bundle.abandon()
        raise
    bundle.close()
    print(f"train: {len(history)} steps, best val accuracy "
          f"{metrics['accuracy']:.3f}, bundle at {bundle.dir}")
    return EXIT_RUNTIME if history.diverged else EXIT_OK


def cmd_perturb(args) -> int:
    cfg = load_config(args.config, "perturb")
    settings = settings_from_config(cfg)
    design_path = args.design or cfg.get("design")
    if not design_path:
        raise ConfigError("perturb needs --design or a 'design' path in the config")
    design, _ = load_design(design_path)

    p = cfg.get("perturbation", {})
    _check_keys(p, {"sigma", "correlation_length", "dead_voxel_rate", "seed"}, "perturbation")
    base_seed = int(args.seed if args.seed is not None else p.get("seed", 0))
    spec = PerturbationSpec(
        sigma=float(p.get("sigma", 0.0)),
        correlation_length=int(p.get("correlation_length", 1)),
        dead_voxel_rate=float(p.get("dead_voxel_rate", 0.0)),
        seed=base_seed,
    )

    bundle = ReportBundle(args.out, "perturb", config_hash(cfg, args.seed))
    try:
        bundle.write_config(cfg)
        perturbed = design.with_medium(perturb(design.medium, spec))
        save_design(bundle.dir / "perturbed.pfm", perturbed,
                    provenance={"config_hash": bundle.cfg_hash,
                                "base_hash": design_hash(design),
                                "perturbation": spec.to_dict()})
        bundle.add_file("perturbed.pfm")
        summary = {
            "base_hash": design_hash(design),
            "perturbed_hash": design_hash(perturbed),
            "perturbation": spec.to_dict(),
        }

        if "dataset" in cfg:
            dataset = dataset_from_config(cfg, None)
            sigmas = [float(s) for s in cfg.get("sigmas", [spec.sigma])]
            seeds = [int(s) for s in cfg.get("seeds", [base_seed])]
            variants = cfg.get("variants", ["raw"])
            allowed_variants = {"raw", "compensated", "compensated_post", "finetuned"}
            if set(variants) - allowed_variants:
                raise ConfigError(f"unknown variants {set(variants) - allowed_variants}")
            comp_cfg = cfg.get("compensation", {})
            _check_keys(comp_cfg, {"steps", "learning_rate_pre", "learning_rate_post",
                                   "batch_size", "seed"}, "compensation")
            ft = cfg.get("finetune", {})
            _check_keys(ft, {"fraction", "mask_seed"} | _TRAIN_KEYS, "finetune")
            rows = []
            for sigma in sigmas:
                for seed in seeds:
                    s = PerturbationSpec(
                        sigma=sigma, correlation_length=spec.correlation_length,
                        dead_voxel_rate=spec.dead_voxel_rate, seed=seed,
                    )
                    pd = design.with_medium(perturb(design.medium, s))
                    for variant in variants:
                        if variant == "raw":
                            metrics = evaluate(pd, dataset, settings)
                        elif variant in ("compensated", "compensated_post"):
                            stack = fit_compensation(
                                pd, dataset, settings,
                                steps=int(comp_cfg.get("steps", 120)),
                                learning_rate_pre=float(comp_cfg.get("learning_rate_pre", 0.02)),
                                learning_rate_post=float(comp_cfg.get("learning_rate_post", 0.05)),
                                batch_size=int(comp_cfg.get("batch_size", 32)),
                                seed=int(comp_cfg.get("seed", 0)),
                                mode="post" if variant == "compensated_post" else "pre_post",
                            )
                            metrics = evaluate(pd, dataset, settings, stack)
                        else:
                            fraction = float(ft.get("fraction", 0.05))
                            mask = ReprogrammableMask.random(
                                pd.medium, fraction, seed=int(ft.get("mask_seed", 0))
                            )
                            tkw = {k: v for k, v in ft.items() if k in _TRAIN_KEYS}
                            tuned = finetune_reprogrammable(
                                pd, mask, dataset, TrainConfig(**tkw), settings
                            )
                            metrics = evaluate(tuned, dataset, settings)
                        rows.append({
                            "sigma": sigma, "dead_rate": spec.dead_voxel_rate,
                            "seed": seed, "variant": variant,
                            "accuracy": metrics["accuracy"], "loss": metrics["loss"],
                        })
            bundle.write_text("sweep.csv", sweep_rows_to_csv(rows))
            summary["sweep_rows"] = len(rows)
        bundle.write_json("summary.json", summary)
    except Exception:
        bundle.abandon()
        raise
    bundle.close()
    print(f"perturb: bundle at {bundle.dir}")
    return EXIT_OK


def cmd_ensemble(args) -> int:
    cfg = load_config(args.config, "ensemble")
    settings = settings_from_config(cfg)
    design_path = args.design or cfg.get("design")
    if not design_path:
        raise ConfigError("ensemble needs --design or a 'design' path in the config")
    base, _ = load_design(design_path)
    dataset = dataset_from_config(cfg, None)

    pool_cfg = cfg.get("pool", {})
    _check_keys(pool_cfg, {"k", "sigma", "correlation_length", "dead_voxel_rate", "seed"}, "pool")
    k = int(pool_cfg.get("k", 2))
    spec = PerturbationSpec(
        sigma=float(pool_cfg.get("sigma", 0.003)),
        correlation_length=int(pool_cfg.get("correlation_length", 1)),
        dead_voxel_rate=float(pool_cfg.get("dead_voxel_rate", 0.0)),
        seed=int(args.seed if args.seed is not None else pool_cfg.get("seed", 0)),
    )

    bundle = ReportBundle(args.out, "ensemble", config_hash(cfg, args.seed))
    try:
        bundle.write_config(cfg)
        pool = spawn_ensemble(base, k, spec)
        spc = cfg.get("specialists")
        if spc:
            _check_keys(spc, {"class_groups", "mask_fraction", "mask_seed"} | _TRAIN_KEYS,
                        "specialists")
            groups = spc["class_groups"]
            if len(groups) != k:
                raise ConfigError(f"{len(groups)} class groups for {k} experts")
            tkw = {kk: v for kk, v in spc.items() if kk in _TRAIN_KEYS}
            tcfg = TrainConfig(**tkw)
            experts = []
            for expert, classes in zip(pool.experts, groups):
                mask = ReprogrammableMask.random(
                    expert.medium, float(spc.get("mask_fraction", 0.05)),
                    seed=int(spc.get("mask_seed", 0)),
                )
                experts.append(specialize_expert(expert, dataset, classes, mask, tcfg, settings))
            pool = ExpertPool(tuple(experts), provenance={
                **pool.provenance, "specialist_groups": groups,
            })

        hashes_before = pool.hashes()
        rcfg_section = cfg.get("router", {})
        _check_keys(rcfg_section, {"top_k"} | _TRAIN_KEYS, "router")
        top_k = rcfg_section.get("top_k")
        rkw = {kk: v for kk, v in rcfg_section.items() if kk in _TRAIN_KEYS}
        rcfg = TrainConfig(**{"learning_rate": 0.5, "steps": 60, "batch_size": 16, **rkw})
        router = train_router(pool, dataset, rcfg, settings,
                              top_k=int(top_k) if top_k is not None else None)
        if pool.hashes() != hashes_before:
            raise RuntimeError("experts changed during router training")

        expert_files = []
        for i, expert in enumerate(pool.experts):
            name = f"expert_{i}.pfm"
            save_design(bundle.dir / name, expert,
                        provenance={"config_hash": bundle.cfg_hash, "index": i})
            bundle.add_file(name)
            expert_files.append(name)
        bundle.write_json("pool.json", {
            "schema_version": SCHEMA_VERSION,
            "base_hash": pool.provenance["base_hash"],
            "seeds": pool.provenance["seeds"],
            "perturbation": pool.provenance["perturbation"],
            "expert_files": expert_files,
            "expert_hashes": pool.hashes(),
        })
        save_router(bundle.dir / "router.pfr", router,
                    provenance={"config_hash": bundle.cfg_hash})
        bundle.add_file("router.pfr")

        metrics = evaluate_ensemble(pool, router, dataset, settings)
        solo = single_expert_accuracies(pool, dataset, settings)
        bundle.write_json("metrics.json", {
            "ensemble_accuracy": metrics["accuracy"],
            "ensemble_loss": metrics["loss"],
            "utilization": metrics["utilization"].tolist(),
            "single_expert_accuracy": solo.tolist(),
            "router_diverged": router.diverged,
        })
    except Exception:
        bundle.abandon()
        raise
    bundle.close()
    print(f"ensemble: accuracy {metrics['accuracy']:.3f} vs best expert "
          f"{solo.max():.3f}, bundle at {bundle.dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pfmdesk",
        description="Scaling calculator and desk-scale simulator for optical "
                    "physical foundation models.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help="output bundle directory")

    p = sub.add_parser("scale", help="emit scaling reports and the comparison table")
    common(p)
    p.add_argument("--params", help="comma-separated parameter counts")
    p.add_argument("--sweep", help="geometric sweep A:B:xK")
    p.set_defaults(func=cmd_scale)

    p = sub.add_parser("simulate", help="run inference through a saved design")
    common(p)
    p.add_argument("--design", help="design file")
    p.add_argument("--inputs", help="CSV or JSON file of input vectors")
    p.add_argument("--check", action="store_true",
                   help="run conservation/phase invariant checks")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="inverse-design a device on a toy task")
    common(p)
    p.add_argument("--design", help="starting design file (default: fresh from config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("perturb", help="fabricate noisy copies and measure recovery")
    common(p)
    p.add_argument("--design", help="design file to perturb")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("ensemble", help="spawn a fixed-expert pool and train a router")
    common(p)
    p.add_argument("--design", help="base design file")
    p.set_defaults(func=cmd_ensemble)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DesignError, VariabilityError, scaling.ScalingError,
            StepInstabilityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command-line driver for the inversion pipeline.

One JSON config describes a run: the synthetic world, the sampler
budgets, the seed, and an output root.  Subcommands cover the pipeline
DAG:

    world -> decompose -> link -> respond -> invert -> score
                                          `-> osse (the full grid)

``world`` synthesizes every input an inversion needs (grid, truth
coefficient tables, simulated observations); ``decompose`` fits the
harmonic basis and caches it under a content hash; ``link`` and
``respond`` export the SIF-link report and the per-group Jacobian
containers; ``invert`` runs two-stage inference for one experiment and
fails on low effective sample sizes; ``osse`` runs the whole truth-case
x setup grid and emits the combined score report; ``score`` re-scores
stored posterior samples.

Every command writes a ``manifest.json`` carrying the tool version, a
hash of the resolved config, and the seed.  No manifest field depends
on wall time, so reruns with identical configs produce identical
artifacts byte for byte.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import hashlib
import io
import json
import os
import struct
import sys

import numpy as np

from . import __version__
from .data_model import DataModelError, read_observations, write_observations
from .decomposition import (
    BottomUpFluxes, DecompositionError, FluxBasisSet, HarmonicFit,
)
from .evaluation import QUANTITIES, quantity_aggregates, score_quantity, write_scores
from .grid import GridError, RegionPartition, TimePartition, make_regular_grid, read_grid, write_grid
from .osse import (
    CASE_TAGS, DeskWorld, DeskWorldConfig, OsseError, SamplerBudget, TrueFluxCase,
    build_desk_world, estimate_error_correlations, format_reference_alpha, run_experiment,
    run_osse_grid, score_report_rows, simulate_case_dataset, standard_cases, standard_setups,
    write_experiment, write_manifest,
)
from .prior import FixedTermPolicy, Hyperpriors, PriorError
from .samplers import SamplerError, effective_sample_size, load_samples, save_samples
from .sif_link import SifLinkError, write_report
from .transport import CacheError, TransportError, write_jacobian

VERSION = f"fluxinv-{__version__}"
CONFIG_SCHEMA_VERSION = 1

BASIS_CACHE_MAGIC = b"FLUXBAS1"
BASIS_CACHE_VERSION = 1


class ConfigError(ValueError):
    """The run configuration is missing, malformed, or inconsistent."""


# -- run configuration -------------------------------------------------------


@dataclasses.dataclass
class RunConfig:
    """A fully resolved run configuration.

    ``resolved`` is the canonical dictionary (defaults applied) that the
    config hash and the worker processes are built from.
    """

    seed: int
    output_root: str
    world: DeskWorldConfig
    grid_path: str | None
    labels: np.ndarray | None
    policy: dict | None
    hyper: Hyperpriors
    budget: SamplerBudget
    ess_floor: float
    invert: dict | None
    osse: dict | None
    resolved: dict

    @property
    def config_sha(self) -> str:
        return hashlib.sha256(_canonical(self.resolved).encode()).hexdigest()

    def path(self, *parts: str) -> str:
        return os.path.join(self.output_root, *parts)

    @property
    def basis_cache_path(self) -> str:
        return self.path("cache", "basis.fbc")

    @property
    def response_cache_dir(self) -> str:
        return self.path("cache", "response")


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


_SETUPS = {s.tag: s for s in standard_setups()}

_POLICY_KEYS = {"rlt_inferred", "small_land_regions", "rlt_always_fixed_regions"}
_OSSE_KEYS = {"cases", "setups", "evaluation_periods"}
_TOP_KEYS = {
    "schema_version", "seed", "output_root", "grid_path", "world", "policy",
    "hyperparameters", "sampler", "ess_floor", "invert", "osse",
}


def load_run_config(path: str) -> RunConfig:
    """Read, validate, and resolve a JSON run configuration."""
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("the config must be a JSON object")
    return parse_run_config(raw)


def parse_run_config(raw: dict) -> RunConfig:
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if raw.get("schema_version") != CONFIG_SCHEMA_VERSION:
        raise ConfigError(
            f"config schema_version must be {CONFIG_SCHEMA_VERSION}, "
            f"got {raw.get('schema_version')!r}")

    seed = raw.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("the config must carry an explicit integer `seed`")
    output_root = raw.get("output_root")
    if not isinstance(output_root, str) or not output_root:
        raise ConfigError("the config must carry a non-empty `output_root`")

    world_dict = _opt_dict(raw, "world")
    try:
        world = DeskWorldConfig.from_dict(world_dict)
    except (OsseError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad `world` section: {exc}") from exc

    grid_path = raw.get("grid_path")
    labels = None
    if grid_path is not None:
        if not isinstance(grid_path, str):
            raise ConfigError("`grid_path` must be a path string")
        if not os.path.exists(grid_path):
            raise ConfigError(f"grid file {grid_path} does not exist")
        try:
            _, partition = read_grid(grid_path)
        except GridError as exc:
            raise ConfigError(f"grid file {grid_path}: {exc}") from exc
        labels = partition.region_id

    policy = raw.get("policy")
    if policy is not None:
        if not isinstance(policy, dict) or set(policy) - _POLICY_KEYS:
            raise ConfigError(f"`policy` keys must be a subset of {sorted(_POLICY_KEYS)}")
        policy = {
            "rlt_inferred": bool(policy.get("rlt_inferred", True)),
            "small_land_regions": sorted(int(r) for r in policy.get("small_land_regions", [])),
            "rlt_always_fixed_regions": (
                None if policy.get("rlt_always_fixed_regions") is None
                else sorted(int(r) for r in policy["rlt_always_fixed_regions"])),
        }

    hyper = _build_dataclass(Hyperpriors, _opt_dict(raw, "hyperparameters"), "hyperparameters")
    budget = _build_dataclass(SamplerBudget, _opt_dict(raw, "sampler"), "sampler")
    for field in dataclasses.fields(SamplerBudget):
        v = getattr(budget, field.name)
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            raise ConfigError(f"sampler `{field.name}` must be a non-negative integer")
    if budget.stage1_warmup >= budget.stage1_iterations:
        raise ConfigError("sampler stage1_warmup must be shorter than stage1_iterations")
    if budget.warmup >= budget.iterations:
        raise ConfigError("sampler warmup must be shorter than iterations")
    if budget.thin < 1:
        raise ConfigError("sampler thin must be at least 1")

    ess_floor = raw.get("ess_floor", 0.0)
    if not isinstance(ess_floor, (int, float)) or isinstance(ess_floor, bool) or ess_floor < 0:
        raise ConfigError("`ess_floor` must be a non-negative number")
    ess_floor = float(ess_floor)

    invert = raw.get("invert")
    if invert is not None:
        if not isinstance(invert, dict) or set(invert) - {"case", "setup"}:
            raise ConfigError("`invert` must be an object with keys `case` and `setup`")
        invert = {"case": invert.get("case"), "setup": invert.get("setup")}
        for key, pool in (("case", CASE_TAGS), ("setup", tuple(_SETUPS))):
            tag = invert[key]
            if tag is not None and tag not in pool:
                raise ConfigError(f"unknown {key} tag {tag!r}; choose from {list(pool)}")

    osse = raw.get("osse")
    if osse is not None:
        if not isinstance(osse, dict) or set(osse) - _OSSE_KEYS:
            raise ConfigError(f"`osse` keys must be a subset of {sorted(_OSSE_KEYS)}")
        cases = list(osse.get("cases", CASE_TAGS))
        setups = list(osse.get("setups", tuple(_SETUPS)))
        bad = [t for t in cases if t not in CASE_TAGS]
        if bad or len(set(cases)) != len(cases) or not cases:
            raise ConfigError(f"osse cases must be distinct tags from {list(CASE_TAGS)}")
        bad = [t for t in setups if t not in _SETUPS]
        if bad or len(set(setups)) != len(setups) or not setups:
            raise ConfigError(f"osse setups must be distinct tags from {list(_SETUPS)}")
        periods = osse.get("evaluation_periods")
        if periods is not None:
            periods = [int(q) for q in periods]
            if not periods or min(periods) < 1 or max(periods) > world.study_months:
                raise ConfigError("osse evaluation_periods must name study months "
                                  f"between 1 and {world.study_months}")
        osse = {"cases": cases, "setups": setups, "evaluation_periods": periods}

    resolved = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "seed": seed,
        "output_root": output_root,
        "grid_path": grid_path,
        "world": world.to_dict(),
        "policy": policy,
        "hyperparameters": dataclasses.asdict(hyper),
        "sampler": dataclasses.asdict(budget),
        "ess_floor": ess_floor,
        "invert": invert,
        "osse": osse,
    }
    return RunConfig(seed=seed, output_root=output_root, world=world,
                     grid_path=grid_path, labels=labels, policy=policy,
                     hyper=hyper, budget=budget, ess_floor=ess_floor,
                     invert=invert, osse=osse, resolved=resolved)


def _opt_dict(raw: dict, key: str) -> dict:
    value = raw.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"`{key}` must be an object")
    return value


def _build_dataclass(cls, d: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown `{section}` keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad `{section}` section: {exc}") from exc


def _policy_from_config(policy: dict | None, world: DeskWorld) -> FixedTermPolicy | None:
    if policy is None:
        return None
    always = policy["rlt_always_fixed_regions"]
    return FixedTermPolicy(
        rlt_inferred=policy["rlt_inferred"],
        small_land_regions=tuple(policy["small_land_regions"]),
        rlt_always_fixed_regions=(tuple(always) if always is not None
                                  else (world.nonlinear_region,)),
    )


# -- basis cache --------------------------------------------------------------


def basis_input_hash(world_cfg: DeskWorldConfig, labels: np.ndarray | None) -> str:
    """Hash of everything the harmonic fit consumes."""
    h = hashlib.sha256()
    h.update(_canonical(world_cfg.to_dict()).encode())
    if labels is None:
        h.update(b"builtin-region-map")
    else:
        h.update(np.ascontiguousarray(labels, dtype=np.int64).tobytes())
    return h.hexdigest()


def write_basis_cache(path: str, basis: FluxBasisSet, input_hash: str) -> None:
    """Serialize a fitted basis: magic, JSON header, npz payload."""
    geom = basis.grid.geometry
    if geom is None:
        raise CacheError("the basis grid carries no regular geometry and cannot be cached")
    header = {
        "version": BASIS_CACHE_VERSION,
        "input_hash": input_hash,
        "content_hash": basis.content_hash(),
        "descriptor": basis.layout.descriptor(),
        "epoch": basis.periods.epoch,
        "nlat": geom.nlat,
        "nlon": geom.nlon,
        "fields": sorted(basis.bottomup.fields),
        "harmonics": {c: basis.fits[c].n_harmonics for c in sorted(basis.fits)},
    }
    arrays = {
        "land_fraction": basis.grid.land_fraction,
        "region_id": basis.partition.region_id,
        "region_is_land": basis.partition.region_is_land,
        "boundaries": basis.periods.boundaries,
        "times": basis.bottomup.times,
        "study_times": basis.study_times,
    }
    for name, values in basis.bottomup.fields.items():
        arrays[f"field_{name}"] = values
    for c, fit in basis.fits.items():
        arrays[f"beta_{c}"] = fit.beta
        arrays[f"residual_{c}"] = fit.residual
    payload = io.BytesIO()
    np.savez(payload, **arrays)
    blob = json.dumps(header, sort_keys=True).encode()
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(BASIS_CACHE_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload.getvalue())
    os.replace(tmp, path)


def _read_basis_header(path: str) -> tuple[dict, int]:
    """Header dict and payload offset; CacheError on any corruption."""
    with open(path, "rb") as fh:
        magic = fh.read(len(BASIS_CACHE_MAGIC))
        if magic != BASIS_CACHE_MAGIC:
            raise CacheError(f"{path} is not a basis cache (bad magic)")
        raw = fh.read(8)
        if len(raw) != 8:
            raise CacheError(f"basis cache {path} is truncated")
        (length,) = struct.unpack("<Q", raw)
        blob = fh.read(length)
        if len(blob) != length:
            raise CacheError(f"basis cache {path} is truncated")
        try:
            header = json.loads(blob.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CacheError(f"basis cache {path} has a corrupt header: {exc}") from exc
        if not isinstance(header, dict):
            raise CacheError(f"basis cache {path} has a corrupt header")
        if header.get("version") != BASIS_CACHE_VERSION:
            raise CacheError(f"basis cache {path} has unsupported version "
                             f"{header.get('version')!r}")
        return header, fh.tell()


def basis_cache_status(path: str, input_hash: str) -> str:
    """``missing``, ``stale``, or ``hit`` (header check only)."""
    if not os.path.exists(path):
        return "missing"
    header, _ = _read_basis_header(path)
    return "hit" if header.get("input_hash") == input_hash else "stale"


def load_basis_cache(path: str, input_hash: str) -> FluxBasisSet | None:
    """Reconstruct a cached basis; None on miss, CacheError on damage."""
    if not os.path.exists(path):
        return None
    header, offset = _read_basis_header(path)
    if header.get("input_hash") != input_hash:
        return None
    with open(path, "rb") as fh:
        fh.seek(offset)
        payload = fh.read()
    try:
        with np.load(io.BytesIO(payload)) as data:
            grid = make_regular_grid(int(header["nlat"]), int(header["nlon"]),
                                     land_fraction=data["land_fraction"])
            partition = RegionPartition(region_id=data["region_id"],
                                        region_is_land=data["region_is_land"])
            periods = TimePartition(data["boundaries"], epoch=header["epoch"])
            bottomup = BottomUpFluxes(
                times=data["times"],
                fields={name: data[f"field_{name}"] for name in header["fields"]})
            fits = {
                c: HarmonicFit(times=bottomup.times, beta=data[f"beta_{c}"],
                               residual=data[f"residual_{c}"], n_harmonics=int(k))
                for c, k in header["harmonics"].items()
            }
            basis = FluxBasisSet(grid=grid, partition=partition, periods=periods,
                                 fits=fits, bottomup=bottomup,
                                 study_times=data["study_times"])
    except Exception as exc:
        raise CacheError(f"basis cache {path} has a corrupt payload: {exc}") from exc
    if basis.content_hash() != header.get("content_hash"):
        raise CacheError(f"basis cache {path} does not reproduce its recorded content hash")
    return basis


# -- world assembly -----------------------------------------------------------


def assemble_world(cfg: RunConfig) -> tuple[DeskWorld, str]:
    """Build the configured world, going through the basis cache.

    Returns the world plus the cache outcome (``hit`` or ``written``).
    """
    input_hash = basis_input_hash(cfg.world, cfg.labels)
    basis = load_basis_cache(cfg.basis_cache_path, input_hash)
    status = "hit" if basis is not None else "written"
    world = build_desk_world(cfg.world, cache_dir=cfg.response_cache_dir,
                             labels=cfg.labels, basis=basis)
    if basis is None:
        write_basis_cache(cfg.basis_cache_path, world.basis, input_hash)
    return world, status


def _case_by_tag(world: DeskWorld, tag: str) -> TrueFluxCase:
    for case in standard_cases(world):
        if case.tag == tag:
            return case
    raise ConfigError(f"unknown truth case {tag!r}; choose from {list(CASE_TAGS)}")


def _cmd_manifest(cfg: RunConfig, command: str, out_dir: str, outputs: list[str],
                  extra: dict | None = None) -> None:
    payload = {
        "version": VERSION,
        "command": command,
        "seed": cfg.seed,
        "config_sha256": cfg.config_sha,
        "outputs": sorted(outputs),
    }
    if extra:
        payload.update(extra)
    write_manifest(os.path.join(out_dir, "manifest.json"), payload)


# -- commands -----------------------------------------------------------------


def cmd_world(cfg: RunConfig) -> int:
    """Write the grid, the truth coefficient tables, and simulated observations."""
    world, _ = assemble_world(cfg)
    out = cfg.path("world")
    os.makedirs(os.path.join(out, "truth"), exist_ok=True)
    os.makedirs(os.path.join(out, "observations"), exist_ok=True)
    outputs = ["grid.csv", "world.json"]

    write_grid(os.path.join(out, "grid.csv"), world.grid, world.partition)
    with open(os.path.join(out, "world.json"), "w") as fh:
        json.dump(cfg.world.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    for case in standard_cases(world):
        truth_rel = os.path.join("truth", f"{case.tag}.csv")
        with open(os.path.join(out, truth_rel), "w") as fh:
            fh.write(format_reference_alpha(world.basis, case.alpha_true))
        values = simulate_case_dataset(world, case, cfg.seed)
        groups = [dataclasses.replace(world.groups[name], values=values[name])
                  for name in sorted(world.groups)]
        obs_rel = os.path.join("observations", f"{case.tag}.csv")
        write_observations(os.path.join(out, obs_rel), groups)
        outputs += [truth_rel, obs_rel]
        n_obs = sum(g.n_obs for g in groups)
        print(f"case {case.tag}: wrote {obs_rel} ({n_obs} observations)")

    _cmd_manifest(cfg, "world", out, outputs)
    print(f"world ready under {out} ({world.grid.n_cells} cells, "
          f"{world.partition.n_regions} regions)")
    return 0


def cmd_decompose(cfg: RunConfig) -> int:
    """Fit the harmonic flux basis, or reuse the content-addressed cache."""
    input_hash = basis_input_hash(cfg.world, cfg.labels)
    status = basis_cache_status(cfg.basis_cache_path, input_hash)
    world, _ = assemble_world(cfg)
    lay = world.basis.layout

    out = cfg.path("decompose")
    os.makedirs(out, exist_ok=True)
    summary = {
        "descriptor": lay.descriptor(),
        "n_alpha": lay.n_total,
        "n_regions": lay.n_regions,
        "n_periods": lay.n_periods,
        "harmonics": dict(lay.n_harmonics),
        "content_hash": world.basis.content_hash(),
        "cache": os.path.relpath(cfg.basis_cache_path, cfg.output_root),
        "cache_status": status if status == "hit" else "written",
    }
    with open(os.path.join(out, "layout.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _cmd_manifest(cfg, "decompose", out, ["layout.json"], extra={"basis": summary})

    if status == "hit":
        print(f"basis cache hit: {cfg.basis_cache_path}")
    else:
        print(f"wrote basis cache {cfg.basis_cache_path}")
    print(f"basis: {lay.n_total} coefficients ({lay.descriptor()})")
    return 0


def cmd_link(cfg: RunConfig) -> int:
    """Write the fitted SIF-GPP link report."""
    world, _ = assemble_world(cfg)
    out = cfg.path("link")
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "report.csv")
    write_report(path, world.link)
    records = world.link.records
    n_valid = sum(1 for rec in records.values() if rec.valid)
    _cmd_manifest(cfg, "link", out, ["report.csv"])
    print(f"SIF link: {n_valid}/{len(records)} cell-months usable; wrote {path}")
    return 0


def cmd_respond(cfg: RunConfig) -> int:
    """Export the response matrix of every observation group."""
    world, _ = assemble_world(cfg)
    out = cfg.path("respond")
    os.makedirs(out, exist_ok=True)
    outputs = []
    descriptor = world.basis.layout.descriptor()
    for name in sorted(world.groups):
        psi, z0 = world.groups[name].require_response()
        rel = f"{name}.jac"
        write_jacobian(os.path.join(out, rel), psi, z0, descriptor)
        outputs.append(rel)
        print(f"wrote {os.path.join(out, rel)} ({psi.shape[0]} x {psi.shape[1]})")
    _cmd_manifest(cfg, "respond", out, outputs)
    return 0


def _ess_report(world: DeskWorld, samples) -> dict[str, float]:
    """Effective sample sizes of the headline posterior traces.

    Covers the annual-mean global aggregate of each flux quantity plus
    every observation-group precision scale.
    """
    lay = world.basis.layout
    alpha_full = samples.alpha_full(lay.n_total)
    n = alpha_full.shape[0]
    report = {}
    for q in QUANTITIES:
        agg = quantity_aggregates(world.basis, alpha_full, q)
        global_by_period = agg.reshape(n, lay.n_regions, lay.n_periods).sum(axis=1)
        trace = global_by_period.mean(axis=1)
        report[f"flux:{q}"] = float(np.nan_to_num(effective_sample_size(trace), nan=0.0))
    for name, trace in samples.gamma.items():
        report[f"gamma:{name}"] = float(np.nan_to_num(effective_sample_size(trace), nan=0.0))
    return report


def _load_case_values(cfg: RunConfig, world: DeskWorld, case: TrueFluxCase) -> dict[str, np.ndarray]:
    """Observation values for one case, read from the world stage's files."""
    path = cfg.path("world", "observations", f"{case.tag}.csv")
    if not os.path.exists(path):
        raise ConfigError(f"no simulated observations at {path}; run `fluxinv world` first")
    kinds = {name: g.kind for name, g in world.groups.items()}
    values = {}
    for g in read_observations(path, kinds):
        ref = world.groups.get(g.name)
        if ref is None:
            raise ConfigError(f"{path} carries unknown observation group {g.name!r}")
        same = (np.array_equal(g.series, ref.series) and np.array_equal(g.cells, ref.cells)
                and np.allclose(g.times, ref.times) and np.allclose(g.budgets, ref.budgets))
        if not same:
            raise ConfigError(f"{path} was built for a different world (group {g.name!r})")
        values[g.name] = g.values
    missing = sorted(set(world.groups) - set(values))
    if missing:
        raise ConfigError(f"{path} is missing observation groups {missing}")
    return values


def _stage1_correlations(cfg: RunConfig, world: DeskWorld, case: TrueFluxCase,
                         values: dict[str, np.ndarray]) -> dict[str, tuple[float, float]]:
    """First-stage (rho, ell) estimates, cached per case on disk."""
    path = cfg.path("invert", f"stage1-{case.tag}.json")
    if os.path.exists(path):
        with open(path) as fh:
            stored = json.load(fh)
        if stored.get("config_sha256") == cfg.config_sha:
            print(f"stage 1: reusing correlation estimates from {path}")
            return {name: (float(r), float(e))
                    for name, (r, e) in stored["correlations"].items()}
    correlations = estimate_error_correlations(world, values, cfg.budget, cfg.seed,
                                               case.tag, hyper=cfg.hyper)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as fh:
        json.dump({"config_sha256": cfg.config_sha, "case": case.tag,
                   "correlations": {k: list(v) for k, v in correlations.items()}},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name in sorted(correlations):
        rho, ell = correlations[name]
        print(f"stage 1: {name} rho={rho:.3f} ell={ell * 86400.0:.1f} s")
    return correlations


def cmd_invert(cfg: RunConfig, case_tag: str | None, setup_tag: str | None) -> int:
    """Two-stage inference for one (truth case, setup) experiment."""
    section = cfg.invert or {}
    case_tag = case_tag or section.get("case")
    setup_tag = setup_tag or section.get("setup")
    if not case_tag or not setup_tag:
        raise ConfigError("invert needs a truth case and a setup "
                          "(config `invert` section or --case/--setup)")
    if setup_tag not in _SETUPS:
        raise ConfigError(f"unknown setup tag {setup_tag!r}; choose from {list(_SETUPS)}")

    world, _ = assemble_world(cfg)
    case = _case_by_tag(world, case_tag)
    setup = _SETUPS[setup_tag]
    values = _load_case_values(cfg, world, case)
    correlations = _stage1_correlations(cfg, world, case, values)

    periods = (cfg.osse or {}).get("evaluation_periods")
    result = run_experiment(world, case, values, setup, cfg.budget, cfg.seed,
                            correlations=correlations,
                            evaluation_periods=tuple(periods) if periods else None,
                            policy=_policy_from_config(cfg.policy, world),
                            hyper=cfg.hyper)

    exp_dir = cfg.path("invert", result.experiment_id)
    os.makedirs(exp_dir, exist_ok=True)
    save_samples(os.path.join(exp_dir, "samples.npz"), result.samples)
    ess = _ess_report(world, result.samples)
    min_ess = min(ess.values())
    diagnostics = {
        "ess": ess,
        "min_ess": min_ess,
        "ess_floor": cfg.ess_floor,
        "n_draws": result.samples.n_draws,
        "hmc": dataclasses.asdict(result.samples.hmc),
        "correlations": {k: list(v) for k, v in correlations.items()},
    }
    with open(os.path.join(exp_dir, "diagnostics.json"), "w") as fh:
        json.dump(diagnostics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _cmd_manifest(cfg, "invert", exp_dir, ["samples.npz", "diagnostics.json"])

    print(f"{result.experiment_id}: {result.samples.n_draws} draws, min ESS {min_ess:.1f}")
    if min_ess < cfg.ess_floor:
        worst = min(ess, key=ess.get)
        print(f"ESS floor {cfg.ess_floor:g} violated by {worst} "
              f"(ESS {ess[worst]:.1f})", file=sys.stderr)
        return 3
    return 0


def _osse_case_worker(config_json: str, case_tag: str,
                      out_dir: str) -> list[tuple[str, str, object]]:
    """Run one truth case end to end (stage 1 plus every setup)."""
    cfg = parse_run_config(json.loads(config_json))
    world, _ = assemble_world(cfg)
    case = _case_by_tag(world, case_tag)
    section = cfg.osse or {"setups": list(_SETUPS), "evaluation_periods": None}
    periods = section.get("evaluation_periods")
    values = simulate_case_dataset(world, case, cfg.seed)
    correlations = estimate_error_correlations(world, values, cfg.budget, cfg.seed,
                                               case.tag, hyper=cfg.hyper)
    rows = []
    for tag in section["setups"]:
        setup = _SETUPS[tag]
        result = run_experiment(world, case, values, setup, cfg.budget, cfg.seed,
                                correlations=correlations,
                                evaluation_periods=tuple(periods) if periods else None,
                                hyper=cfg.hyper)
        write_experiment(out_dir, world, result, values, setup)
        rows.extend((result.experiment_id, case.tag, s) for s in result.scores)
        print(f"finished {result.experiment_id}")
    return rows


def cmd_osse(cfg: RunConfig, jobs: int) -> int:
    """Run the full truth-case x setup grid and write the score report."""
    if cfg.osse is None:
        raise ConfigError("config has no `osse` section (the experiment manifest); "
                          "add one with the cases and setups to run")
    out = cfg.path("osse")
    os.makedirs(out, exist_ok=True)
    case_tags = cfg.osse["cases"]
    setups = tuple(_SETUPS[t] for t in cfg.osse["setups"])
    periods = cfg.osse["evaluation_periods"]

    if jobs <= 1:
        world, _ = assemble_world(cfg)
        cases = [_case_by_tag(world, t) for t in case_tags]
        results = run_osse_grid(world, cfg.budget, cfg.seed, out_dir=out,
                                cases=cases, setups=setups,
                                evaluation_periods=tuple(periods) if periods else None,
                                hyper=cfg.hyper)
        rows = score_report_rows(results)
    else:
        assemble_world(cfg)  # prime the basis and response caches once
        config_json = json.dumps(cfg.resolved)
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {tag: pool.submit(_osse_case_worker, config_json, tag, out)
                       for tag in case_tags}
            rows = [row for tag in case_tags for row in futures[tag].result()]
        write_scores(os.path.join(out, "report.csv"), rows)

    by_experiment: dict[str, dict[str, float]] = {}
    for experiment_id, _, score in rows:
        by_experiment.setdefault(experiment_id, {})[score.quantity] = score.rmse
    for experiment_id, rmses in by_experiment.items():
        cells = "  ".join(f"{q} {rmses[q]:7.3f}" for q in QUANTITIES if q in rmses)
        print(f"{experiment_id:26s} RMSE[PgC/yr]  {cells}")

    outputs = []
    for dirpath, _, filenames in os.walk(out):
        for filename in filenames:
            rel = os.path.relpath(os.path.join(dirpath, filename), out)
            if rel != "manifest.json":
                outputs.append(rel)
    _cmd_manifest(cfg, "osse", out, outputs,
                  extra={"experiments": sorted(by_experiment)})
    print(f"wrote {os.path.join(out, 'report.csv')} ({len(by_experiment)} experiments)")
    return 0


def cmd_score(cfg: RunConfig, experiment: str | None) -> int:
    """Re-score stored posterior samples against their truth case."""
    world, _ = assemble_world(cfg)
    inv_root = cfg.path("invert")
    if experiment is not None:
        experiment_ids = [experiment]
    else:
        experiment_ids = sorted(
            d for d in (os.listdir(inv_root) if os.path.isdir(inv_root) else [])
            if os.path.exists(os.path.join(inv_root, d, "samples.npz")))
    if not experiment_ids:
        raise ConfigError(f"no stored samples under {inv_root}; run `fluxinv invert` first")

    periods = (cfg.osse or {}).get("evaluation_periods")
    periods = tuple(periods) if periods else None
    rows = []
    for experiment_id in experiment_ids:
        sample_path = os.path.join(inv_root, experiment_id, "samples.npz")
        if not os.path.exists(sample_path):
            raise ConfigError(f"no stored samples at {sample_path}")
        case_tag, _, _ = experiment_id.rpartition("_")
        if case_tag not in CASE_TAGS:
            raise ConfigError(f"experiment id {experiment_id!r} does not start with a truth case tag")
        case = _case_by_tag(world, case_tag)
        samples = load_samples(sample_path)
        alpha_full = samples.alpha_full(world.basis.layout.n_total)
        scores = [score_quantity(world.basis, alpha_full, case.alpha_true, q, periods=periods)
                  for q in QUANTITIES]
        write_scores(os.path.join(inv_root, experiment_id, "scores.csv"),
                     [(experiment_id, case_tag, s) for s in scores])
        rows.extend((experiment_id, case_tag, s) for s in scores)
        cells = "  ".join(f"{s.quantity} {s.rmse:7.3f}" for s in scores)
        print(f"{experiment_id:26s} RMSE[PgC/yr]  {cells}")

    out = cfg.path("score")
    os.makedirs(out, exist_ok=True)
    write_scores(os.path.join(out, "report.csv"), rows)
    _cmd_manifest(cfg, "score", out, ["report.csv"],
                  extra={"experiments": sorted(experiment_ids)})
    print(f"wrote {os.path.join(out, 'report.csv')}")
    return 0


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fluxinv",
        description="Constrained Bayesian flux inversion on a desk-scale synthetic world.")
    parser.add_argument("--version", action="version", version=VERSION)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", required=True, help="run configuration (JSON)")
        return p

    add("world", "synthesize the world: grid, truth tables, simulated observations")
    add("decompose", "fit the harmonic flux basis and cache it under a content hash")
    add("link", "fit the SIF-GPP link and write its report")
    add("respond", "export every observation group's response matrix")
    p = add("invert", "run two-stage inference for one experiment")
    p.add_argument("--case", help="truth case tag (overrides the config)")
    p.add_argument("--setup", help="inversion setup tag (overrides the config)")
    p = add("osse", "run the full truth-case x setup grid and write the report")
    p.add_argument("-j", "--jobs", type=int, default=1,
                   help="truth cases to run in parallel (default 1)")
    p = add("score", "score stored posterior samples against their truths")
    p.add_argument("--experiment", help="a single experiment id to score")
    return parser


_PIPELINE_ERRORS = (GridError, DecompositionError, SifLinkError, TransportError,
                    CacheError, PriorError, DataModelError, SamplerError, OsseError)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        if args.command == "world":
            return cmd_world(cfg)
        if args.command == "decompose":
            return cmd_decompose(cfg)
        if args.command == "link":
            return cmd_link(cfg)
        if args.command == "respond":
            return cmd_respond(cfg)
        if args.command == "invert":
            return cmd_invert(cfg, args.case, args.setup)
        if args.command == "osse":
            return cmd_osse(cfg, jobs=max(1, args.jobs))
        if args.command == "score":
            return cmd_score(cfg, args.experiment)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except _PIPELINE_ERRORS as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

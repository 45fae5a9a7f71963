"""Experiment orchestration: configs, records, deterministic ensembles.

Configuration is flat INI (configparser): one file describes one experiment,
with an [experiment] section naming the kind and a section of the same name
holding kind-specific knobs.  Parsing is strict; unknown sections or keys are
configuration errors, not warnings, so a typo cannot silently change a run.

Results are NDJSON, one RunRecord per line with sorted keys, so appending is
cheap and two runs of the same (config, master seed) produce byte-identical
statistic values.  Determinism across worker counts comes from two choices:

  * the ensemble is split into fixed-size member chunks regardless of how
    many workers exist, and chunk c draws its noise from stream
    run_block * 4096 + c, so the noise a member sees depends only on the
    chunk layout written in the config;
  * reductions over members happen after chunks are stitched in index order,
    with `tree_sum` providing a fixed pairwise association order.

Long runs checkpoint per chunk at segment boundaries.  A harness checkpoint
carries the integrator state plus the probe and pairing history, so a resumed
run reproduces the uninterrupted statistics bit for bit, and embeds the
experiment INI text so `fsns resume <file>` needs no other input.
"""

from __future__ import annotations

import configparser
import json
import math
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import __version__
from .checkpoint import config_fingerprint, load_checkpoint, save_checkpoint
from .dynamics import DynamicsConfig, Trajectory, simulate
from .forcing import NoiseParams
from .spectral import CutoffProfile, WaveGrid

EXPERIMENT_KINDS = (
    "invariance",
    "energy-identity",
    "triviality-scan",
    "diffusivity-scan",
    "weak-coupling-2d",
    "noise-equivalence",
    "operator-checks",
    "vartheta-limit",
)

WORKERS_ENV = "FSNS_WORKERS"
STREAMS_PER_BLOCK = 4096


class ConfigError(ValueError):
    """Unusable experiment configuration (exit code 2 at the CLI)."""


# ---------------------------------------------------------------------------
# Config parsing


class SectionView:
    """Typed, consume-tracking access to one INI section."""

    def __init__(self, name: str, mapping: dict):
        self.name = name
        self._map = dict(mapping)
        self._seen: set = set()

    def _raw(self, key, default):
        self._seen.add(key)
        if key in self._map:
            return self._map[key]
        return default

    def _convert(self, key, default, conv):
        raw = self._raw(key, None)
        if raw is None:
            return default
        try:
            return conv(raw)
        except ValueError as exc:
            raise ConfigError(f"[{self.name}] {key} = {raw!r}: {exc}") from exc

    def get_str(self, key, default=None):
        return self._convert(key, default, str)

    def get_int(self, key, default=None):
        return self._convert(key, default, lambda s: int(s, 0))

    def get_float(self, key, default=None):
        return self._convert(key, default, float)

    def get_bool(self, key, default=None):
        def conv(s):
            low = s.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {s!r}")
        return self._convert(key, default, conv)

    def get_floats(self, key, default=None):
        return self._convert(key, default, lambda s: [float(t) for t in s.split()])

    def get_ints(self, key, default=None):
        return self._convert(key, default, lambda s: [int(t) for t in s.split()])

    def get_modes(self, key, default=None):
        """Parse '1,0,0; 1,1,0' into a list of integer tuples."""
        def conv(s):
            out = []
            for part in s.split(";"):
                part = part.strip()
                if part:
                    out.append(tuple(int(t) for t in part.split(",")))
            return out
        return self._convert(key, default, conv)

    def finish(self):
        unknown = set(self._map) - self._seen
        if unknown:
            raise ConfigError(
                f"unknown keys in [{self.name}]: {', '.join(sorted(unknown))}")


@dataclass
class ExperimentConfig:
    """Parsed experiment description; `extra` holds the kind-specific section.

    The config hash covers everything that affects the numbers (kind, grid,
    dynamics, constants, ensemble layout, master seed, kind section) but not
    presentation choices (output directory, csv/figure switches).
    """

    kind: str
    master_seed: int
    out_dir: str
    d: int
    M: float
    modes_per_axis: int | None
    points_per_axis: int | None
    dynamics: DynamicsConfig
    nu: float
    kBT: float
    rho_density: float
    ensemble_size: int
    chunk: int
    record_stride: int
    snapshot_stride: int
    checkpoint_every: int
    dtype: str
    emit_csv: bool
    emit_figures: bool
    extra: dict
    raw_text: str = ""
    path: str | None = None

    def hash(self) -> str:
        payload = {
            "kind": self.kind, "master_seed": self.master_seed,
            "d": self.d, "M": self.M,
            "modes_per_axis": self.modes_per_axis,
            "points_per_axis": self.points_per_axis,
            "dynamics": self.dynamics.as_dict(),
            "nu": self.nu, "kBT": self.kBT, "rho_density": self.rho_density,
            "ensemble_size": self.ensemble_size, "chunk": self.chunk,
            "record_stride": self.record_stride,
            "snapshot_stride": self.snapshot_stride,
            "checkpoint_every": self.checkpoint_every, "dtype": self.dtype,
            "extra": {k: dict(sorted(v.items())) for k, v in sorted(self.extra.items())},
        }
        return config_fingerprint(payload)

    def noise_params(self, stream_id: int, seed: int | None = None) -> NoiseParams:
        return NoiseParams(theta=self.dynamics.theta, nu=self.nu, kBT=self.kBT,
                           rho_density=self.rho_density,
                           seed=self.master_seed if seed is None else seed,
                           stream_id=stream_id)

    def numpy_dtype(self):
        return np.complex64 if self.dtype == "complex64" else np.complex128


_GLOBAL_SECTIONS = ("experiment", "grid", "dynamics", "constants", "ensemble",
                    "output")


def parse_config_text(text: str, path: str | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys like N and T are case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc

    sections = {name: dict(parser.items(name)) for name in parser.sections()}
    if "experiment" not in sections:
        raise ConfigError("missing [experiment] section")

    exp = SectionView("experiment", sections.pop("experiment"))
    kind = exp.get_str("kind")
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; "
                          f"expected one of {', '.join(EXPERIMENT_KINDS)}")
    master_seed = exp.get_int("master_seed", 0)
    out_dir = exp.get_str("output", "out")
    exp.finish()

    grid = SectionView("grid", sections.pop("grid", {}))
    d = grid.get_int("d", 3)
    M = grid.get_float("M", 1.0)
    modes = grid.get_int("modes_per_axis")
    points = grid.get_int("points_per_axis")
    grid.finish()

    dyn = SectionView("dynamics", sections.pop("dynamics", {}))
    cutoff_kind = dyn.get_str("cutoff", "sharp")
    n_cut = dyn.get_float("N", 4.0)
    try:
        dynamics = DynamicsConfig(
            theta=dyn.get_float("theta", 1.0),
            N=n_cut,
            T=dyn.get_float("T", 1.0),
            lam=dyn.get_float("lam", 0.0),
            lambda_hat=dyn.get_float("lambda_hat", 0.0),
            dt=dyn.get_float("dt"),
            cutoff=CutoffProfile(kind=cutoff_kind, N=n_cut),
            mode=dyn.get_str("mode", "bare-lambda"),
            mollify_noise=dyn.get_bool("mollify_noise", False),
        )
    except ValueError as exc:
        raise ConfigError(f"[dynamics] {exc}") from exc
    dyn.finish()

    consts = SectionView("constants", sections.pop("constants", {}))
    nu = consts.get_float("nu", 1.0)
    kBT = consts.get_float("kBT", 1.0)
    rho_density = consts.get_float("rho_density", 1.0)
    consts.finish()

    ens = SectionView("ensemble", sections.pop("ensemble", {}))
    ensemble_size = ens.get_int("size", 8)
    chunk = ens.get_int("chunk", 32)
    record_stride = ens.get_int("record_stride", 1)
    snapshot_stride = ens.get_int("snapshot_stride", 0)
    checkpoint_every = ens.get_int("checkpoint_every", 0)
    dtype = ens.get_str("dtype", "complex128")
    ens.finish()
    if ensemble_size < 1 or chunk < 1 or record_stride < 1:
        raise ConfigError("[ensemble] size, chunk and record_stride must be >= 1")
    if dtype not in ("complex128", "complex64"):
        raise ConfigError(f"[ensemble] dtype must be complex128 or complex64, "
                          f"got {dtype!r}")

    out = SectionView("output", sections.pop("output", {}))
    emit_csv = out.get_bool("csv", True)
    emit_figures = out.get_bool("figures", False)
    out.finish()

    extra = {}
    if kind in sections:
        extra[kind] = sections.pop(kind)
    if sections:
        raise ConfigError(f"unknown sections: {', '.join(sorted(sections))}")

    cfg = ExperimentConfig(
        kind=kind, master_seed=master_seed, out_dir=out_dir, d=d, M=M,
        modes_per_axis=modes, points_per_axis=points, dynamics=dynamics,
        nu=nu, kBT=kBT, rho_density=rho_density, ensemble_size=ensemble_size,
        chunk=chunk, record_stride=record_stride,
        snapshot_stride=snapshot_stride, checkpoint_every=checkpoint_every,
        dtype=dtype, emit_csv=emit_csv, emit_figures=emit_figures,
        extra=extra, raw_text=text, path=path)
    try:
        cfg.noise_params(0)
    except ValueError as exc:
        raise ConfigError(f"[constants] {exc}") from exc
    return cfg


def parse_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config_text(text, path=path)


def kind_section(cfg: ExperimentConfig) -> SectionView:
    return SectionView(cfg.kind, cfg.extra.get(cfg.kind, {}))


# ---------------------------------------------------------------------------
# Grids sized from the cutoff


def fft_friendly(n: int) -> int:
    """Smallest integer >= n with no prime factor above 5."""
    while True:
        m = n
        for p in (2, 3, 5):
            while m % p == 0:
                m //= p
        if m == 1:
            return n
        n += 1


def derive_grid(cfg: ExperimentConfig, N: float | None = None) -> WaveGrid:
    """Grid for cutoff radius N: box just covering the ball, alias-free points.

    Explicit [grid] modes/points override the derivation (and are validated
    against the dealiasing rule by `simulate` itself).
    """
    N = cfg.dynamics.N if N is None else N
    h = int(math.floor(cfg.M * N + 1e-9))
    modes = cfg.modes_per_axis or 2 * h + 1
    points = cfg.points_per_axis or fft_friendly(max(3 * h + 1, modes))
    return WaveGrid(d=cfg.d, M=cfg.M, modes_per_axis=modes,
                    physical_points_per_axis=points)


# ---------------------------------------------------------------------------
# Records


def _clean(value):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def stat(mean, variance=None, ci_low=None, ci_high=None) -> dict:
    """One observable entry; absent statistics serialize as explicit nulls."""
    return {"mean": _clean(mean), "variance": _clean(variance),
            "ci_low": _clean(ci_low), "ci_high": _clean(ci_high)}


@dataclass
class RunRecord:
    """One emitted result line: a parameter point of one experiment."""

    experiment: str
    label: str
    params: dict
    observables: dict          # name -> {"mean", "variance", "ci_low", "ci_high"}
    config_hash: str
    build: str
    master_seed: int
    wall_seconds: float
    status: str = "ok"

    def to_json(self) -> str:
        payload = {
            "experiment": self.experiment, "label": self.label,
            "params": _clean(self.params), "observables": _clean(self.observables),
            "config_hash": self.config_hash, "build": self.build,
            "master_seed": int(self.master_seed),
            "wall_seconds": round(float(self.wall_seconds), 3),
            "status": self.status,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        obj = json.loads(line)
        return cls(experiment=obj["experiment"], label=obj["label"],
                   params=obj["params"], observables=obj["observables"],
                   config_hash=obj["config_hash"], build=obj["build"],
                   master_seed=obj["master_seed"],
                   wall_seconds=obj["wall_seconds"], status=obj["status"])


def write_records(path: str, records, append: bool = True) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_records(paths) -> list[RunRecord]:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    out = []
    for path in paths:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(RunRecord.from_json(line))
    return out


def build_identifier() -> str:
    """Package version plus the git commit when running from a checkout."""
    tag = f"fsns-{__version__}"
    try:
        root = os.path.dirname(os.path.dirname(os.path.dirname(__file__)))
        head = subprocess.run(
            ["git", "-C", root, "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5)
        if head.returncode == 0:
            return f"{tag}+g{head.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"{tag}+nogit"


class Emitter:
    """Collects records for one experiment run and appends them to disk."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.config_hash = cfg.hash()
        self.build = build_identifier()
        self.records: list[RunRecord] = []
        self._t0 = time.perf_counter()

    def lap(self) -> float:
        now = time.perf_counter()
        dt, self._t0 = now - self._t0, now
        return dt

    def emit(self, label: str, params: dict, observables: dict,
             status: str = "ok", wall: float | None = None) -> RunRecord:
        rec = RunRecord(
            experiment=self.cfg.kind, label=label, params=params,
            observables=observables, config_hash=self.config_hash,
            build=self.build, master_seed=self.cfg.master_seed,
            wall_seconds=self.lap() if wall is None else wall, status=status)
        self.records.append(rec)
        return rec

    def flush(self, append: bool = False) -> str:
        path = os.path.join(self.cfg.out_dir, "records.ndjson")
        write_records(path, self.records, append=append)
        return path


# ---------------------------------------------------------------------------
# Deterministic reductions


def tree_sum(arr: np.ndarray, axis: int = 0) -> np.ndarray:
    """Pairwise sum with a fixed association order, independent of chunking."""
    arr = np.moveaxis(np.asarray(arr), axis, 0)
    while arr.shape[0] > 1:
        n = arr.shape[0]
        paired = arr[: n - n % 2]
        red = paired[0::2] + paired[1::2]
        if n % 2:
            red = np.concatenate([red, arr[-1:]], axis=0)
        arr = red
    return arr[0]


def tree_mean(arr: np.ndarray, axis: int = 0):
    arr = np.asarray(arr)
    return tree_sum(arr, axis=axis) / arr.shape[axis]


def mean_var_ci(values: np.ndarray, z: float = 1.96):
    """Tree-reduced mean, unbiased variance and a normal-theory CI tuple."""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    mean = float(tree_mean(values))
    if n < 2:
        return mean, None, (None, None)
    var = float(tree_sum((values - mean) ** 2) / (n - 1))
    half = z * math.sqrt(var / n)
    return mean, var, (mean - half, mean + half)


# ---------------------------------------------------------------------------
# Chunked ensemble execution with checkpointed segments


def resolve_workers(workers: int | None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get(WORKERS_ENV, "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def chunk_plan(members: int, chunk: int) -> list[tuple[int, int, int]]:
    """(chunk index, first member, member count) triples covering the ensemble."""
    plan = []
    lo = 0
    idx = 0
    while lo < members:
        size = min(chunk, members - lo)
        plan.append((idx, lo, size))
        lo += size
        idx += 1
    return plan


def chunk_stream(run_block: int, chunk_index: int) -> int:
    if chunk_index >= STREAMS_PER_BLOCK:
        raise ValueError(f"more than {STREAMS_PER_BLOCK} chunks in one run block")
    return run_block * STREAMS_PER_BLOCK + chunk_index


def _pack_chunk_state(path: str, header_base: dict, step: int, states, probe_rows,
                      duhamel_rows, record_steps, energy_max, initial_states):
    parts = {"states": states, "initial": initial_states}
    if probe_rows is not None:
        parts["probes"] = probe_rows
    if duhamel_rows is not None:
        parts["duhamel"] = duhamel_rows.astype(np.complex128)
    header = dict(header_base)
    header.update({
        "step": int(step),
        "record_steps": [int(s) for s in record_steps],
        "energy_max": float(energy_max),
        "parts": {name: list(arr.shape) for name, arr in parts.items()},
        "order": list(parts),
    })
    flat = np.concatenate([np.ascontiguousarray(a, dtype=np.complex128).ravel()
                           for a in parts.values()])
    save_checkpoint(path, flat, header)


def _unpack_chunk_state(header: dict, flat: np.ndarray) -> dict:
    out = {}
    offset = 0
    for name in header["order"]:
        shape = tuple(header["parts"][name])
        size = int(np.prod(shape))
        out[name] = flat[offset:offset + size].reshape(shape)
        offset += size
    return out


def _run_chunk(job: dict) -> dict:
    """Advance one member chunk to the horizon, checkpointing at segment ends.

    Returns the stitched per-chunk arrays; bit-identical to a single
    uninterrupted `simulate` call over the whole horizon because segments
    resume from exact states and noise is keyed by absolute step.
    """
    dyn: DynamicsConfig = job["dynamics"]
    grid = WaveGrid(*job["grid"])
    params: NoiseParams = job["params"]
    members = job["members"]
    stride = job["record_stride"]
    dtype = np.complex64 if job["dtype"] == "complex64" else np.complex128
    test_fields = job["test_fields"]
    dt = dyn.resolved_dt()
    total_steps = int(round(dyn.T / dt))
    ckpt_path = job["ckpt_path"]
    seg_steps = job["ckpt_steps"]
    if seg_steps:
        seg_steps = max(1, math.ceil(seg_steps / stride)) * stride

    step = 0
    states = None
    probe_rows = None
    duhamel_rows = None
    record_steps: list[int] = []
    energy_max = 0.0
    initial_states = None

    if ckpt_path and os.path.exists(ckpt_path):
        header, flat = load_checkpoint(ckpt_path)
        if header.get("config_hash") != job["header"]["config_hash"]:
            raise ConfigError(
                f"checkpoint {ckpt_path} belongs to config "
                f"{header.get('config_hash')}, not {job['header']['config_hash']}")
        if (header.get("label"), header.get("chunk")) != (
                job["header"]["label"], job["header"]["chunk"]):
            raise ConfigError(f"checkpoint {ckpt_path} belongs to a different "
                              "sub-run of this experiment")
        parts = _unpack_chunk_state(header, flat)
        step = int(header["step"])
        states = parts["states"].astype(dtype)
        initial_states = parts["initial"]
        probe_rows = parts.get("probes")
        duhamel_rows = parts.get("duhamel")
        if duhamel_rows is not None:
            duhamel_rows = duhamel_rows.real.copy()
        record_steps = list(header["record_steps"])
        energy_max = float(header["energy_max"])

    while step < total_steps:
        seg = min(seg_steps or total_steps, total_steps - step)
        dyn_seg = replace(dyn, T=seg * dt, dt=dt)
        traj = simulate(dyn_seg, grid, params, n_members=members,
                        record_stride=stride, probes=job["probes"],
                        test_fields=test_fields, start_step=step,
                        start_states=states, dtype=dtype)
        if initial_states is None:
            initial_states = traj.initial_states.copy()
        drop = 1 if step > 0 else 0
        if traj.probe_series is not None:
            new = traj.probe_series[drop:]
            probe_rows = new if probe_rows is None else np.concatenate(
                [probe_rows, new], axis=0)
        if traj.duhamel_series is not None:
            new = traj.duhamel_series[drop:]
            duhamel_rows = new if duhamel_rows is None else np.concatenate(
                [duhamel_rows, new], axis=0)
        record_steps.extend(int(s) for s in traj.record_steps[drop:])
        energy_max = max(energy_max, traj.energy_pairing_max)
        states = traj.final_states
        step += seg
        if ckpt_path and (seg_steps or step >= total_steps):
            _pack_chunk_state(ckpt_path, job["header"], step, states, probe_rows,
                              duhamel_rows, record_steps, energy_max,
                              initial_states)

    return {
        "probe_rows": probe_rows, "duhamel_rows": duhamel_rows,
        "record_steps": np.array(record_steps), "energy_max": energy_max,
        "initial_states": initial_states, "final_states": states,
        "dt": dt, "n_steps": total_steps,
    }


def run_ensemble(cfg: ExperimentConfig, dyn: DynamicsConfig, grid: WaveGrid, *,
                 members: int | None = None, run_block: int = 0,
                 label: str = "main", probes=(), test_fields=None,
                 record_stride: int | None = None,
                 workers: int | None = None) -> Trajectory:
    """Run an ensemble in fixed member chunks and stitch one Trajectory.

    Args:
      cfg: experiment config supplying seeds, chunking and checkpoint policy.
      dyn: dynamics for this parameter point (may differ from cfg.dynamics).
      grid: mode box to integrate on.
      members: ensemble size; defaults to cfg.ensemble_size.
      run_block: stream namespace for this sub-run; distinct parameter points
        of one experiment must use distinct blocks.
      label: checkpoint file tag and record label for this sub-run.
      probes, test_fields, record_stride: forwarded to `simulate`.
      workers: process count; defaults to the FSNS_WORKERS environment value.

    The stitched result is independent of the worker count and, for a fixed
    chunk size, of nothing else but (config, master seed).
    """
    members = cfg.ensemble_size if members is None else members
    stride = cfg.record_stride if record_stride is None else record_stride
    plan = chunk_plan(members, cfg.chunk)
    ckpt_dir = os.path.join(cfg.out_dir, "checkpoints")
    use_ckpt = cfg.checkpoint_every > 0
    if use_ckpt:
        os.makedirs(ckpt_dir, exist_ok=True)
    config_hash = cfg.hash()

    jobs = []
    for idx, lo, size in plan:
        stream = chunk_stream(run_block, idx)
        header = {
            "config_hash": config_hash, "label": label, "chunk": idx,
            "first_member": lo, "members": size, "seed": cfg.master_seed,
            "stream_id": stream, "experiment_ini": cfg.raw_text,
            "kind": cfg.kind,
        }
        safe_label = "".join(c if c.isalnum() or c in "-_." else "_" for c in label)
        jobs.append({
            "dynamics": dyn,
            "grid": (grid.d, grid.M, grid.modes_per_axis,
                     grid.physical_points_per_axis),
            "params": cfg.noise_params(stream),
            "members": size,
            "record_stride": stride,
            "dtype": cfg.dtype,
            "probes": tuple(probes),
            "test_fields": test_fields,
            "ckpt_path": os.path.join(
                ckpt_dir, f"{safe_label}-c{idx:03d}.ckpt") if use_ckpt else None,
            "ckpt_steps": cfg.checkpoint_every if use_ckpt else 0,
            "header": header,
        })

    n_workers = resolve_workers(workers)
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_run_chunk, jobs))
    else:
        results = [_run_chunk(job) for job in jobs]

    first = results[0]
    for res in results[1:]:
        if not np.array_equal(res["record_steps"], first["record_steps"]):
            raise RuntimeError("chunks disagree on record steps; "
                               "stale checkpoints in the output directory?")
    probe_series = None
    if first["probe_rows"] is not None:
        probe_series = np.concatenate([r["probe_rows"] for r in results], axis=1)
    duhamel = None
    if first["duhamel_rows"] is not None:
        duhamel = np.concatenate([r["duhamel_rows"] for r in results], axis=2)
    dt = first["dt"]
    record_steps = first["record_steps"]
    return Trajectory(
        config=dyn, grid=grid, dt=dt, coupling=dyn.coupling(grid.d),
        start_step=0, n_steps=first["n_steps"], record_steps=record_steps,
        times=record_steps * dt, probes=tuple(probes),
        probe_series=probe_series, duhamel_series=duhamel,
        energy_pairing_max=max(r["energy_max"] for r in results),
        initial_states=np.concatenate([r["initial_states"] for r in results]),
        final_states=np.concatenate([r["final_states"] for r in results]))


def checkpoint_experiment_text(path: str) -> str:
    """The experiment INI embedded in a harness checkpoint (for `resume`)."""
    header, _ = load_checkpoint(path)
    text = header.get("experiment_ini", "")
    if not text:
        raise ConfigError(f"{path} carries no embedded experiment config")
    return text

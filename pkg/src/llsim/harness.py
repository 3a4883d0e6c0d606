"""Configuration parsing, run orchestration, experiments, and output.

Config files are line-oriented ``key = value`` text with optional
``[section]`` headers; keys may also be written in dotted form
(``model.sigma_gamma = 0.01``) anywhere.  Unknown keys are hard errors.
A ``preset`` key selects a built-in parameter set whose values any other
key overrides.

Every run directory receives ``series.csv`` (per-step observables),
``summary.txt`` (post-burn-in statistics), and ``metadata.txt``.  The
metadata embeds the fully resolved configuration, including the concrete
seed, so :func:`replay` can reproduce any run byte-for-byte.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .clearance import simulation_step
from .errors import ConfigError, LlsError, ParameterError
from .model import (
    MODE_EXPLICIT,
    MODE_ITERATIVE,
    ModelParams,
    PRESETS,
    init_state,
    preset_basic,
    scale_to_agents,
)
from .rng import (
    RANDU_MODULUS,
    RngAlgorithm,
    auto_seed,
    derive_replica_seed,
    seed_stream,
)

RECORD_CHOICES = (
    "price",
    "dividend",
    "returns",
    "gamma",
    "d_gamma",
    "residual",
    "group_wealth",
)

EXPERIMENT_NAMES = ("finite-size", "rng-quality", "tolerance-sweep")

_SECTIONS = ("model", "clearance", "rng", "run", "experiment")


@dataclass
class SimulationConfig:
    """A fully resolved run description."""

    params: ModelParams = field(default_factory=preset_basic)
    preset: str = "lls-basic"
    algorithm: RngAlgorithm = RngAlgorithm.MERSENNE_HQ
    seed: int | None = None              # None means draw from OS entropy
    output_dir: Path | None = None
    replicas: int | None = None          # None: 1 for runs, 10 for experiments
    burn_in: int | None = None           # None: max memory span
    record: tuple[str, ...] = RECORD_CHOICES
    agent_counts: tuple[int, ...] = (200, 500, 1000)
    xis: tuple[float, ...] = (0.1, 0.5, 0.75, 1.0)
    experiment_steps: int | None = None  # per-case override of model.steps
    crash_log_return: float = -0.1

    def resolved_burn_in(self, params: ModelParams | None = None) -> int:
        p = params if params is not None else self.params
        if self.burn_in is not None:
            return self.burn_in
        return p.max_memory


# --------------------------------------------------------------------------
# config text parsing


def _parse_int(raw: str) -> int:
    try:
        return int(raw, 0)
    except ValueError:
        raise ValueError(f"not an integer: {raw!r}") from None


def _parse_float(raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ValueError(f"not a number: {raw!r}") from None


def _parse_bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")

def _parse_groups(raw: str) -> tuple[tuple[int, int], ...]:
    groups = []
    for part in raw.split(","):
        count, sep, m = part.partition(":")
        if not sep:
            raise ValueError(f"expected count:memory pairs, got {part.strip()!r}")
        groups.append((_parse_int(count.strip()), _parse_int(m.strip())))
    return tuple(groups)


def _parse_int_list(raw: str) -> tuple[int, ...]:
    return tuple(_parse_int(p.strip()) for p in raw.split(","))


def _parse_float_list(raw: str) -> tuple[float, ...]:
    return tuple(_parse_float(p.strip()) for p in raw.split(","))


def _parse_record(raw: str) -> tuple[str, ...]:
    if raw.strip() == "all":
        return RECORD_CHOICES
    names = tuple(p.strip() for p in raw.split(","))
    for name in names:
        if name not in RECORD_CHOICES:
            raise ValueError(
                f"unknown series {name!r} (choose from {', '.join(RECORD_CHOICES)})"
            )
    return names


def _parse_seed(raw: str) -> int | None:
    if raw.lower() == "auto":
        return None
    value = _parse_int(raw)
    if value < 0:
        raise ValueError("seed must be non-negative")
    return value


def _parse_xi_mode(raw: str) -> bool:
    if raw == "relative":
        return True
    if raw == "absolute":
        return False
    raise ValueError(f"expected 'relative' or 'absolute', got {raw!r}")


def _model_setter(name):
    def apply(cfg: SimulationConfig, value):
        setattr(cfg.params, name, value)

    return apply


def _config_setter(name):
    def apply(cfg: SimulationConfig, value):
        setattr(cfg, name, value)

    return apply


def _set_algorithm(cfg: SimulationConfig, value: str):
    cfg.algorithm = RngAlgorithm.from_name(value)


def _set_output_dir(cfg: SimulationConfig, value: str):
    cfg.output_dir = Path(value)


def _positive_int(raw: str) -> int:
    value = _parse_int(raw)
    if value < 1:
        raise ValueError(f"must be >= 1, got {value}")
    return value


def _non_negative_int(raw: str) -> int:
    value = _parse_int(raw)
    if value < 0:
        raise ValueError(f"must be >= 0, got {value}")
    return value


_KEYS: dict[str, tuple] = {
    "model.N": (_positive_int, _model_setter("N")),
    "model.r": (_parse_float, _model_setter("r")),
    "model.z1": (_parse_float, _model_setter("z1")),
    "model.z2": (_parse_float, _model_setter("z2")),
    "model.sigma_gamma": (_parse_float, _model_setter("sigma_gamma")),
    "model.memory_groups": (_parse_groups, _model_setter("memory_groups")),
    "model.n_total": (_parse_float, _model_setter("n_total")),
    "model.steps": (_non_negative_int, _model_setter("steps")),
    "model.mu_h": (_parse_float, _model_setter("mu_h")),
    "model.sigma_h": (_parse_float, _model_setter("sigma_h")),
    "model.w0": (_parse_float, _model_setter("w0")),
    "model.n0_per_agent": (_parse_float, _model_setter("n0_per_agent")),
    "model.S0": (_parse_float, _model_setter("S0")),
    "model.D0": (_parse_float, _model_setter("D0")),
    "model.gamma0": (_parse_float, _model_setter("gamma0")),
    "clearance.mode": (str, _model_setter("clearance_mode")),
    "clearance.xi": (_parse_float, _model_setter("xi")),
    "clearance.xi_mode": (_parse_xi_mode, _model_setter("xi_relative")),
    "clearance.dividend_lag": (_parse_bool, _model_setter("dividend_lag")),
    "rng.algorithm": (str, _set_algorithm),
    "rng.seed": (_parse_seed, _config_setter("seed")),
    "run.replicas": (_positive_int, _config_setter("replicas")),
    "run.burn_in": (_non_negative_int, _config_setter("burn_in")),
    "run.output_dir": (str, _set_output_dir),
    "run.record": (_parse_record, _config_setter("record")),
    "experiment.agent_counts": (_parse_int_list, _config_setter("agent_counts")),
    "experiment.xis": (_parse_float_list, _config_setter("xis")),
    "experiment.steps": (_non_negative_int, _config_setter("experiment_steps")),
    "experiment.crash_log_return": (_parse_float, _config_setter("crash_log_return")),
}


def _tokenize(text: str) -> dict[str, tuple[str, int]]:
    entries: dict[str, tuple[str, int]] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}: malformed section header {line!r}")
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(
                    f"line {lineno}: unknown section [{section}] "
                    f"(expected one of: {', '.join(_SECTIONS)})"
                )
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key = key.strip()
        value = value.strip()
        full = key if ("." in key or section is None) else f"{section}.{key}"
        if full in entries:
            raise ConfigError(
                f"line {lineno}: duplicate key {full!r} "
                f"(first set on line {entries[full][1]})"
            )
        entries[full] = (value, lineno)
    return entries


def parse_config(text: str) -> SimulationConfig:
    """Parse config text into a validated SimulationConfig."""
    entries = _tokenize(text)
    lines_by_key = {key: lineno for key, (_, lineno) in entries.items()}

    preset_name = "lls-basic"
    if "preset" in entries:
        raw, lineno = entries.pop("preset")
        if raw != "none" and raw not in PRESETS:
            known = ", ".join(list(PRESETS) + ["none"])
            raise ConfigError(
                f"line {lineno}: unknown preset {raw!r} (expected one of: {known})"
            )
        preset_name = raw
    params = PRESETS.get(preset_name, preset_basic)()
    cfg = SimulationConfig(params=params, preset=preset_name)

    for key, (raw, lineno) in entries.items():
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        parser, apply = _KEYS[key]
        try:
            value = parser(raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        try:
            apply(cfg, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}", field=exc.field) from None

    # Stock supply tracks the agent count unless pinned explicitly.
    if "model.n_total" not in entries:
        params.n_total = float(params.N) * float(params.n0_per_agent)

    try:
        params.validate()
    except ConfigError as exc:
        lineno = lines_by_key.get(exc.field or "")
        if lineno is not None:
            raise ConfigError(f"line {lineno}: {exc}", field=exc.field) from None
        raise
    if params.steps > 0 and cfg.resolved_burn_in() >= params.steps:
        raise ConfigError(
            f"burn_in = {cfg.resolved_burn_in()} must be smaller than "
            f"steps = {params.steps}",
            field="run.burn_in",
        )
    return cfg


def _format_config_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_lines(cfg: SimulationConfig, resolved_seed: int) -> list[str]:
    """Canonical resolved key=value lines sufficient to replay a run."""
    p = cfg.params
    groups = ",".join(f"{c}:{m}" for c, m in p.memory_groups)
    pairs = [
        ("preset", cfg.preset),
        ("model.N", p.N),
        ("model.r", p.r),
        ("model.z1", p.z1),
        ("model.z2", p.z2),
        ("model.sigma_gamma", p.sigma_gamma),
        ("model.memory_groups", groups),
        ("model.n_total", p.n_total),
        ("model.steps", p.steps),
        ("model.mu_h", p.mu_h),
        ("model.sigma_h", p.sigma_h),
        ("model.w0", p.w0),
        ("model.n0_per_agent", p.n0_per_agent),
        ("model.S0", p.S0),
        ("model.D0", p.D0),
        ("model.gamma0", p.gamma0),
        ("clearance.mode", p.clearance_mode),
        ("clearance.xi", p.xi),
        ("clearance.xi_mode", "relative" if p.xi_relative else "absolute"),
        ("clearance.dividend_lag", p.dividend_lag),
        ("rng.algorithm", cfg.algorithm.value),
        ("rng.seed", resolved_seed),
        ("run.burn_in", cfg.resolved_burn_in()),
        ("run.record", ",".join(cfg.record)),
        ("experiment.agent_counts", ",".join(str(n) for n in cfg.agent_counts)),
        ("experiment.xis", ",".join(repr(x) for x in cfg.xis)),
        ("experiment.crash_log_return", cfg.crash_log_return),
    ]
    if cfg.replicas is not None:
        pairs.append(("run.replicas", cfg.replicas))
    if cfg.experiment_steps is not None:
        pairs.append(("experiment.steps", cfg.experiment_steps))
    return [f"{key} = {_format_config_value(value)}" for key, value in pairs]


# --------------------------------------------------------------------------
# CSV output


def _format_cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.17g}"


def write_csv(columns: dict[str, object], path: Path | str) -> None:
    """Write named columns as deterministic CSV (LF endings, floats in
    17-significant-digit shortest form)."""
    names = list(columns)
    arrays = [np.asarray(columns[name]) for name in names]
    if arrays:
        lengths = {a.shape[0] for a in arrays}
        if len(lengths) > 1:
            raise ParameterError(f"column lengths differ: {sorted(lengths)}")
        n_rows = lengths.pop()
    else:
        n_rows = 0
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(names) + "\n")
        for i in range(n_rows):
            fh.write(",".join(_format_cell(a[i]) for a in arrays) + "\n")


# --------------------------------------------------------------------------
# single simulation run


@dataclass
class RunMetadata:
    """Everything needed to audit and replay one run."""

    command: str
    algorithm: str
    seed: int
    preset: str
    steps_completed: int
    draws: int
    wall_time_s: float
    abort: str | None
    max_abs_residual: float
    mean_iterations: float
    config: list[str]

    def to_text(self) -> str:
        lines = [
            f"command = {self.command}",
            f"algorithm = {self.algorithm}",
            f"seed = {self.seed}",
            f"preset = {self.preset}",
            f"steps_completed = {self.steps_completed}",
            f"draws = {self.draws}",
            f"wall_time_s = {self.wall_time_s:.6f}",
            f"abort = {self.abort if self.abort else 'none'}",
            f"max_abs_residual = {self.max_abs_residual:.17g}",
            f"mean_iterations = {self.mean_iterations:.17g}",
        ]
        lines.extend(f"config.{entry}" for entry in self.config)
        return "\n".join(lines) + "\n"


@dataclass
class SimulationOutput:
    """Per-step series plus run metadata for one replica."""

    params: ModelParams
    burn_in: int
    t: np.ndarray
    S: np.ndarray
    D: np.ndarray
    x: np.ndarray
    mean_gamma_star: np.ndarray
    mean_gamma: np.ndarray
    d_gamma: np.ndarray
    residual: np.ndarray
    iterations: np.ndarray
    group_wealth: np.ndarray
    metadata: RunMetadata
    summary: dict[str, float]

    def price_series(self) -> np.ndarray:
        """Prices including the initial price S0."""
        return np.concatenate([[self.params.S0], self.S])


def _compute_summary(
    params: ModelParams,
    burn_in: int,
    prices: np.ndarray,
    mean_gamma: np.ndarray,
    mean_gamma_star: np.ndarray,
    d_gamma_series: np.ndarray,
    residual: np.ndarray,
    iterations: np.ndarray,
    crash_threshold: float,
) -> dict[str, float]:
    summary: dict[str, float] = {
        "steps": float(mean_gamma.size),
        "burn_in": float(burn_in),
        "n_agents": float(params.N),
    }
    if prices.size >= 2:
        log_ret = analysis.log_returns(prices)
        post = log_ret[burn_in:]
    else:
        post = np.empty(0)
    summary["crash_count"] = float(np.sum(post < crash_threshold)) if post.size else 0.0
    if post.size >= 4 and float(post.std()) > 0:
        summary["excess_kurtosis_log_returns"] = analysis.excess_kurtosis(post)
    else:
        summary["excess_kurtosis_log_returns"] = float("nan")
    for name, series in (
        ("mean_gamma", mean_gamma),
        ("mean_gamma_star", mean_gamma_star),
    ):
        tail = series[burn_in:]
        summary[name] = float(tail.mean()) if tail.size else float("nan")
    dg = d_gamma_series[burn_in:]
    summary["var_d_gamma"] = float(dg.var(ddof=1)) if dg.size >= 2 else float("nan")
    summary["final_price"] = float(prices[-1]) if prices.size else float("nan")
    summary["max_abs_residual"] = (
        float(np.max(np.abs(residual))) if residual.size else 0.0
    )
    summary["mean_iterations"] = (
        float(iterations.mean()) if iterations.size else 0.0
    )
    return summary


def _series_columns(output: SimulationOutput, record: tuple[str, ...]) -> dict:
    columns: dict[str, object] = {"t": output.t}
    if "price" in record:
        columns["S"] = output.S
    if "dividend" in record:
        columns["D"] = output.D
    if "returns" in record:
        columns["x"] = output.x
    if "gamma" in record:
        columns["mean_gamma_star"] = output.mean_gamma_star
        columns["mean_gamma"] = output.mean_gamma
    if "d_gamma" in record:
        columns["d_gamma"] = output.d_gamma
    if "residual" in record:
        columns["residual"] = output.residual
        columns["iterations"] = output.iterations
    if "group_wealth" in record:
        for g in range(output.group_wealth.shape[1]):
            columns[f"group_wealth_{g}"] = output.group_wealth[:, g]
    return columns


def write_run_outputs(output: SimulationOutput, directory: Path, record=None) -> None:
    """Write series.csv, summary.txt, and metadata.txt for one run."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_csv(_series_columns(output, record or RECORD_CHOICES), directory / "series.csv")
    with open(directory / "summary.txt", "w", newline="\n") as fh:
        for key in sorted(output.summary):
            fh.write(f"{key}: {output.summary[key]:.17g}\n")
    with open(directory / "metadata.txt", "w", newline="\n") as fh:
        fh.write(output.metadata.to_text())


def run_simulation(config: SimulationConfig, command: str = "simulate") -> SimulationOutput:
    """Run one simulation replica as described by the config.

    Deterministic given (algorithm, seed).  On a step failure the partial
    series is flushed with an abort reason before the error propagates.
    """
    params = config.params
    params.validate()
    burn_in = config.resolved_burn_in()
    if params.steps > 0 and burn_in >= params.steps:
        raise ConfigError(
            f"burn_in = {burn_in} must be smaller than steps = {params.steps}",
            field="run.burn_in",
        )
    seed = config.seed if config.seed is not None else auto_seed()
    stream = seed_stream(config.algorithm, seed)

    started = time.perf_counter()
    pool, market = init_state(params, stream)
    n_groups = len(params.memory_groups)
    records = []
    wealth_rows = []
    abort: str | None = None
    error: LlsError | None = None
    for _ in range(params.steps):
        try:
            records.append(simulation_step(pool, market, params, stream))
        except LlsError as exc:
            abort = f"step {market.t + 1}: {exc}"
            error = exc
            break
        wealth_rows.append(analysis.group_wealth(pool, n_groups))
    wall = time.perf_counter() - started

    t = np.array([rec.t for rec in records], dtype=np.int64)
    S = np.array([rec.S for rec in records])
    D = np.array([rec.D for rec in records])
    x = np.array([rec.x for rec in records])
    mean_gamma_star = np.array([rec.mean_gamma_star for rec in records])
    mean_gamma = np.array([rec.mean_gamma for rec in records])
    d_gamma_series = np.array([rec.d_gamma for rec in records])
    residual = np.array([rec.residual for rec in records])
    iterations = np.array([rec.iterations for rec in records], dtype=np.int64)
    group_wealth = (
        np.array(wealth_rows) if wealth_rows else np.empty((0, n_groups))
    )

    prices = np.concatenate([[params.S0], S])
    summary = _compute_summary(
        params,
        burn_in,
        prices,
        mean_gamma,
        mean_gamma_star,
        d_gamma_series,
        residual,
        iterations,
        config.crash_log_return,
    )
    metadata = RunMetadata(
        command=command,
        algorithm=config.algorithm.value,
        seed=seed,
        preset=config.preset,
        steps_completed=len(records),
        draws=stream.draw_count,
        wall_time_s=wall,
        abort=abort,
        max_abs_residual=summary["max_abs_residual"],
        mean_iterations=summary["mean_iterations"],
        config=config_lines(dataclasses.replace(config, replicas=1), seed),
    )
    output = SimulationOutput(
        params=params,
        burn_in=burn_in,
        t=t,
        S=S,
        D=D,
        x=x,
        mean_gamma_star=mean_gamma_star,
        mean_gamma=mean_gamma,
        d_gamma=d_gamma_series,
        residual=residual,
        iterations=iterations,
        group_wealth=group_wealth,
        metadata=metadata,
        summary=summary,
    )
    if config.output_dir is not None:
        write_run_outputs(output, config.output_dir, config.record)
    if error is not None:
        raise error
    return output


def _replica_config(
    config: SimulationConfig,
    base_seed: int,
    index: int,
    subdir: Path | None,
    **param_overrides,
) -> SimulationConfig:
    params = (
        dataclasses.replace(config.params, **param_overrides)
        if param_overrides
        else config.params
    )
    return dataclasses.replace(
        config,
        params=params,
        seed=derive_replica_seed(base_seed, index),
        output_dir=subdir,
        replicas=1,
    )


def run_with_replicas(config: SimulationConfig) -> list[SimulationOutput]:
    """Run config.replicas independent replicas (default one).

    With several replicas each runs in its own ``replica-XX`` directory
    under the configured output directory, seeded from the base seed via
    the splitmix scrambler; a top-level metadata file records the base.
    """
    replicas = config.replicas if config.replicas is not None else 1
    base_seed = config.seed if config.seed is not None else auto_seed()
    if replicas == 1:
        return [run_simulation(dataclasses.replace(config, seed=base_seed))]
    outputs = []
    for k in range(replicas):
        subdir = (
            Path(config.output_dir) / f"replica-{k:02d}"
            if config.output_dir is not None
            else None
        )
        outputs.append(run_simulation(_replica_config(config, base_seed, k, subdir)))
    if config.output_dir is not None:
        _write_toplevel_metadata(config, base_seed, "simulate", outputs)
    return outputs


def _write_toplevel_metadata(
    config: SimulationConfig,
    base_seed: int,
    command: str,
    outputs: list[SimulationOutput],
) -> None:
    directory = Path(config.output_dir)
    directory.mkdir(parents=True, exist_ok=True)
    meta = RunMetadata(
        command=command,
        algorithm=config.algorithm.value,
        seed=base_seed,
        preset=config.preset,
        steps_completed=sum(o.metadata.steps_completed for o in outputs),
        draws=sum(o.metadata.draws for o in outputs),
        wall_time_s=sum(o.metadata.wall_time_s for o in outputs),
        abort=None,
        max_abs_residual=max(
            (o.summary["max_abs_residual"] for o in outputs), default=0.0
        ),
        mean_iterations=(
            float(np.mean([o.summary["mean_iterations"] for o in outputs]))
            if outputs
            else 0.0
        ),
        config=config_lines(config, base_seed),
    )
    with open(directory / "metadata.txt", "w", newline="\n") as fh:
        fh.write(meta.to_text())


# --------------------------------------------------------------------------
# experiments


@dataclass
class ReplicaResult:
    seed: int
    summary: dict[str, float]
    group_wealth_final: np.ndarray | None = None


@dataclass
class FiniteSizeReport:
    """Noise-impact variance across agent counts."""

    agent_counts: tuple[int, ...]
    mean_var_d_gamma: dict[int, float]
    cases: dict[int, list[ReplicaResult]]

    def to_rows(self) -> dict[str, list]:
        return {
            "n_agents": list(self.agent_counts),
            "mean_var_d_gamma": [self.mean_var_d_gamma[n] for n in self.agent_counts],
        }

    def to_text(self) -> str:
        lines = [
            "finite-size sweep: variance of the noise impact d_gamma per agent count",
            "(group structure scaled proportionally; stock supply scales with N)",
        ]
        for n in self.agent_counts:
            lines.append(f"N = {n:6d}: mean Var(d_gamma) = {self.mean_var_d_gamma[n]:.6e}")
        return "\n".join(lines) + "\n"


def _experiment_params(config: SimulationConfig, **overrides) -> ModelParams:
    params = dataclasses.replace(config.params, **overrides)
    if config.experiment_steps is not None:
        params.steps = config.experiment_steps
    return params


def experiment_finite_size(config: SimulationConfig) -> FiniteSizeReport:
    """Run the agent-count sweep and tabulate mean Var(d_gamma) per N."""
    if not config.agent_counts:
        raise ConfigError("agent_counts must be non-empty", field="experiment.agent_counts")
    replicas = config.replicas if config.replicas is not None else 10
    base_seed = config.seed if config.seed is not None else auto_seed()
    out_root = Path(config.output_dir) if config.output_dir is not None else None

    cases: dict[int, list[ReplicaResult]] = {}
    mean_vars: dict[int, float] = {}
    all_outputs: list[SimulationOutput] = []
    for n_agents in config.agent_counts:
        scaled = scale_to_agents(_experiment_params(config), n_agents)
        results = []
        for k in range(replicas):
            subdir = out_root / f"N{n_agents:05d}" / f"replica-{k:02d}" if out_root else None
            run_cfg = dataclasses.replace(
                config,
                params=scaled,
                seed=derive_replica_seed(base_seed, k),
                output_dir=subdir,
                replicas=1,
            )
            output = run_simulation(run_cfg)
            all_outputs.append(output)
            results.append(
                ReplicaResult(
                    seed=output.metadata.seed,
                    summary=output.summary,
                    group_wealth_final=output.group_wealth[-1]
                    if output.group_wealth.size
                    else None,
                )
            )
        cases[n_agents] = results
        mean_vars[n_agents] = float(
            np.mean([res.summary["var_d_gamma"] for res in results])
        )
    report = FiniteSizeReport(
        agent_counts=tuple(config.agent_counts),
        mean_var_d_gamma=mean_vars,
        cases=cases,
    )
    if out_root is not None:
        write_csv(report.to_rows(), out_root / "report.csv")
        (out_root / "report.txt").write_text(report.to_text())
        _write_toplevel_metadata(config, base_seed, "experiment:finite-size", all_outputs)
    return report


@dataclass
class RngQualityReport:
    """Matched-seed comparison of the two generator cores."""

    randu_lattice_holds: bool
    mersenne_lattice_violated: bool
    cases: dict[str, list[ReplicaResult]]

    def stat(self, algorithm: str, name: str) -> np.ndarray:
        return np.array([res.summary[name] for res in self.cases[algorithm]])

    def to_rows(self) -> dict[str, list]:
        rows: dict[str, list] = {"algorithm": [], "replica": []}
        for stat in ("crash_count", "excess_kurtosis_log_returns", "final_price"):
            rows[stat] = []
        for alg, results in self.cases.items():
            for k, res in enumerate(results):
                rows["algorithm"].append(alg)
                rows["replica"].append(k)
                for stat in ("crash_count", "excess_kurtosis_log_returns", "final_price"):
                    rows[stat].append(res.summary[stat])
        return rows

    def to_text(self) -> str:
        lines = [
            "generator-quality comparison (matched replica seeds)",
            f"randu lattice identity x(k+2) = (6 x(k+1) - 9 x(k)) mod 2^31 "
            f"holds on 100000 draws: {self.randu_lattice_holds}",
            f"mersenne violates that identity within 100 triples: "
            f"{self.mersenne_lattice_violated}",
        ]
        for alg, results in self.cases.items():
            crash = np.array([res.summary["crash_count"] for res in results])
            kurt = np.array(
                [res.summary["excess_kurtosis_log_returns"] for res in results]
            )
            lines.append(
                f"{alg}: crash count mean {crash.mean():.3f} (std {crash.std(ddof=1) if crash.size > 1 else 0.0:.3f}), "
                f"excess kurtosis mean {np.nanmean(kurt):.3f}"
            )
        return "\n".join(lines) + "\n"


def verify_randu_lattice(seed: int, count: int = 100_000) -> bool:
    """True when all triples of a RANDU stream satisfy the plane identity."""
    stream = seed_stream(RngAlgorithm.RANDU, seed)
    xs = stream.raw_array(count).astype(np.int64)
    lhs = xs[2:]
    rhs = (6 * xs[1:-1] - 9 * xs[:-2]) % RANDU_MODULUS
    return bool(np.array_equal(lhs, rhs))


def verify_mersenne_violates_lattice(seed: int, triples: int = 100) -> bool:
    """True when the 64-bit generator breaks the RANDU identity quickly."""
    stream = seed_stream(RngAlgorithm.MERSENNE_HQ, seed)
    xs = (stream.raw_array(triples + 2) % np.uint64(RANDU_MODULUS)).astype(np.int64)
    lhs = xs[2:]
    rhs = (6 * xs[1:-1] - 9 * xs[:-2]) % RANDU_MODULUS
    return bool(np.any(lhs != rhs))


def experiment_rng_quality(config: SimulationConfig) -> RngQualityReport:
    """Run matched-seed pairs under both generators and compare output.

    The model noise level is pinned to sigma_gamma = 0.01 on the basic
    preset, the setting in which generator defects visibly change the
    qualitative price path.
    """
    replicas = config.replicas if config.replicas is not None else 10
    base_seed = config.seed if config.seed is not None else auto_seed()
    out_root = Path(config.output_dir) if config.output_dir is not None else None
    params = _experiment_params(config, sigma_gamma=0.01)

    cases: dict[str, list[ReplicaResult]] = {}
    all_outputs: list[SimulationOutput] = []
    for algorithm in (RngAlgorithm.MERSENNE_HQ, RngAlgorithm.RANDU):
        results = []
        for k in range(replicas):
            subdir = (
                out_root / algorithm.value / f"replica-{k:02d}" if out_root else None
            )
            run_cfg = dataclasses.replace(
                config,
                params=params,
                algorithm=algorithm,
                seed=derive_replica_seed(base_seed, k),
                output_dir=subdir,
                replicas=1,
            )
            output = run_simulation(run_cfg)
            all_outputs.append(output)
            results.append(ReplicaResult(seed=output.metadata.seed, summary=output.summary))
        cases[algorithm.value] = results

    report = RngQualityReport(
        randu_lattice_holds=verify_randu_lattice(derive_replica_seed(base_seed, 0)),
        mersenne_lattice_violated=verify_mersenne_violates_lattice(
            derive_replica_seed(base_seed, 0)
        ),
        cases=cases,
    )
    if out_root is not None:
        write_csv(report.to_rows(), out_root / "report.csv")
        (out_root / "report.txt").write_text(report.to_text())
        _write_toplevel_metadata(config, base_seed, "experiment:rng-quality", all_outputs)
    return report


@dataclass
class ToleranceCase:
    xi: float
    replicas: list[ReplicaResult]
    mean_gamma: float
    mean_excess_kurtosis: float
    acf_log: np.ndarray
    acf_abs_log: np.ndarray


@dataclass
class ToleranceReport:
    """Stopping-tolerance sweep of the iterative clearing loop."""

    cases: list[ToleranceCase]

    def case(self, xi: float) -> ToleranceCase:
        for c in self.cases:
            if c.xi == xi:
                return c
        raise KeyError(f"no case for xi = {xi}")

    def to_rows(self) -> dict[str, list]:
        return {
            "xi": [c.xi for c in self.cases],
            "mean_gamma": [c.mean_gamma for c in self.cases],
            "mean_excess_kurtosis": [c.mean_excess_kurtosis for c in self.cases],
            "acf_abs_log_lag1": [c.acf_abs_log[1] for c in self.cases],
        }

    def to_text(self) -> str:
        lines = ["stopping-tolerance sweep (iterative clearing, 200 agents)"]
        for c in self.cases:
            lines.append(
                f"xi = {c.xi:g}: time-mean investment fraction {c.mean_gamma:.4f}, "
                f"mean excess kurtosis {c.mean_excess_kurtosis:.3f}"
            )
        return "\n".join(lines) + "\n"


ACF_MAX_LAG = 50


def experiment_tolerance_sweep(config: SimulationConfig) -> ToleranceReport:
    """Sweep the clearing tolerance on a 200-agent iterative market."""
    if not config.xis:
        raise ConfigError("xis must be non-empty", field="experiment.xis")
    replicas = config.replicas if config.replicas is not None else 10
    base_seed = config.seed if config.seed is not None else auto_seed()
    out_root = Path(config.output_dir) if config.output_dir is not None else None
    base_params = scale_to_agents(
        _experiment_params(config, clearance_mode=MODE_ITERATIVE), 200
    )

    cases = []
    all_outputs: list[SimulationOutput] = []
    for xi in config.xis:
        params = dataclasses.replace(base_params, xi=xi)
        results = []
        acf_log_rows = []
        acf_abs_rows = []
        for k in range(replicas):
            subdir = out_root / f"xi-{xi:g}" / f"replica-{k:02d}" if out_root else None
            run_cfg = dataclasses.replace(
                config,
                params=params,
                seed=derive_replica_seed(base_seed, k),
                output_dir=subdir,
                replicas=1,
            )
            output = run_simulation(run_cfg)
            all_outputs.append(output)
            log_ret = analysis.log_returns(output.price_series())[output.burn_in :]
            acf_log_rows.append(analysis.autocorrelation(log_ret, ACF_MAX_LAG))
            acf_abs_rows.append(analysis.autocorrelation(np.abs(log_ret), ACF_MAX_LAG))
            if subdir is not None:
                qq = analysis.qq_data(log_ret)
                write_csv(
                    {"theoretical": qq[:, 0], "empirical": qq[:, 1]},
                    subdir / "qq.csv",
                )
            results.append(ReplicaResult(seed=output.metadata.seed, summary=output.summary))
        cases.append(
            ToleranceCase(
                xi=xi,
                replicas=results,
                mean_gamma=float(np.mean([r.summary["mean_gamma"] for r in results])),
                mean_excess_kurtosis=float(
                    np.mean([r.summary["excess_kurtosis_log_returns"] for r in results])
                ),
                acf_log=np.mean(acf_log_rows, axis=0),
                acf_abs_log=np.mean(acf_abs_rows, axis=0),
            )
        )
    report = ToleranceReport(cases=cases)
    if out_root is not None:
        write_csv(report.to_rows(), out_root / "report.csv")
        (out_root / "report.txt").write_text(report.to_text())
        acf_columns: dict[str, object] = {"lag": np.arange(ACF_MAX_LAG + 1)}
        for c in report.cases:
            acf_columns[f"acf_log_xi{c.xi:g}"] = c.acf_log
            acf_columns[f"acf_abs_log_xi{c.xi:g}"] = c.acf_abs_log
        write_csv(acf_columns, out_root / "autocorrelation.csv")
        _write_toplevel_metadata(config, base_seed, "experiment:tolerance-sweep", all_outputs)
    return report


EXPERIMENTS = {
    "finite-size": experiment_finite_size,
    "rng-quality": experiment_rng_quality,
    "tolerance-sweep": experiment_tolerance_sweep,
}


# --------------------------------------------------------------------------
# replay


def read_metadata(path: Path | str) -> tuple[str, SimulationConfig]:
    """Recover (command, resolved config) from a metadata file."""
    command = "simulate"
    config_entries = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            continue
        key = key.strip()
        value = value.strip()
        if key == "command":
            command = value
        elif key.startswith("config."):
            config_entries.append(f"{key[len('config.'):]} = {value}")
    if not config_entries:
        raise ConfigError(f"no embedded config found in {path}")
    return command, parse_config("\n".join(config_entries))


def replay(metadata_path: Path | str, output_dir: Path | str):
    """Re-execute the run recorded in a metadata file into output_dir."""
    command, config = read_metadata(metadata_path)
    config = dataclasses.replace(config, output_dir=Path(output_dir))
    if command == "simulate":
        return run_with_replicas(config)
    if command.startswith("experiment:"):
        name = command.split(":", 1)[1]
        if name not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {name!r} in metadata")
        return EXPERIMENTS[name](config)
    raise ConfigError(f"unknown command {command!r} in metadata")

"""Sequential design rollouts, batches and their on-disk records.

A rollout alternates three things for ``k = 1..K``: pick a design (PCE
optimisation over the product-form split of the current cloud, or a
uniform draw for the random baseline), simulate the measurement under
``theta*``, and temper the cloud to the new posterior.  Each step is
streamed to a JSON-lines file as it completes, so an aborted rollout still
leaves the steps it finished.

Randomness: a rollout's seed is ``(seed, rollout_index)``.  It is split into
independent streams per purpose (truth, design search, measurement noise,
SMC, evaluation), so methods run with the same seed share ``theta*``, the
measurement noise draws and the evaluation contrastive set.
"""

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .contrastive import (NonFiniteGradientError, SGConfig, TupleSampler, estimate_pce, optimize_design,
                          screen_designs)
from .evaluation import (EvalConfig, SequentialEvaluator, wasserstein2_blocks, wasserstein2_label_invariant,
                         wasserstein2_to_point)
from .models import MODELS, History, InvalidObservationError, make_model
from .smc import (DegenerateWeightsError, TemperConfig, TemperingError, initial_cloud, partition_cloud,
                  temper_to_posterior)

__all__ = [
    "ConfigError",
    "RolloutError",
    "ExperimentConfig",
    "StepRecord",
    "RolloutRecord",
    "run_rollout",
    "run_batch",
    "summarize",
    "write_summary_csv",
    "read_rollout",
    "rollout_seed",
]

log = logging.getLogger(__name__)

METHODS = ("pasoa", "smc", "random")
WORKERS_ENV = "PASOA_WORKERS"
STREAMS = ("truth", "design", "noise", "smc", "eval")
RUNTIME_ERRORS = (DegenerateWeightsError, TemperingError, NonFiniteGradientError, InvalidObservationError,
                  FloatingPointError)


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class RolloutError(RuntimeError):
    """A rollout aborted; ``record`` holds the steps completed before the failure."""

    def __init__(self, message, record):
        super().__init__(message)
        self.record = record


def _sub_fields(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


@dataclass
class ExperimentConfig:
    model: str = "sources"
    model_constants: dict = field(default_factory=dict)
    method: str = "pasoa"
    K: int = 30
    N: int = 100
    L: int = 200
    seed: int = 0
    theta_star: object = "prior"
    pce_n_mc: int = 1000
    init_candidates: int = 16
    init_n_mc: int = 64
    record_timing: bool = False
    temper: TemperConfig = field(default_factory=TemperConfig)
    sg: SGConfig = field(default_factory=SGConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    _SECTIONS = {"temper": TemperConfig, "sg": SGConfig, "eval": EvalConfig}

    def __post_init__(self):
        self.validate()

    @property
    def M(self):
        return self.N * (self.L + 1)

    def validate(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; choose from {sorted(MODELS)}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {list(METHODS)}")
        if int(self.K) < 1:
            raise ConfigError("K must be ≥ 1")
        if int(self.N) < 1:
            raise ConfigError("N must be ≥ 1")
        if int(self.L) < 1:
            raise ConfigError("L must be ≥ 1")
        if int(self.pce_n_mc) < 2:
            raise ConfigError("pce_n_mc must be ≥ 2")
        if int(self.init_candidates) < 1:
            raise ConfigError("init_candidates must be ≥ 1")
        if int(self.init_n_mc) < 2:
            raise ConfigError("init_n_mc must be ≥ 2")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.temper.ess_min_fraction * self.M < 1:
            raise ConfigError("ess_min_fraction * M must be ≥ 1")
        if self.method == "smc" and self.temper.temper_enabled:
            self.temper = dataclasses.replace(self.temper, temper_enabled=False)
        if not (isinstance(self.theta_star, str) and self.theta_star == "prior"):
            try:
                ts = np.asarray(self.theta_star, dtype=float)
            except (TypeError, ValueError) as exc:
                raise ConfigError("theta_star must be 'prior' or a list of numbers") from exc
            if ts.ndim != 1 or not np.all(np.isfinite(ts)):
                raise ConfigError("theta_star must be a finite vector")
        try:
            self.build_model()
        except TypeError as exc:
            raise ConfigError(f"bad model constants for {self.model!r}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def build_model(self):
        return make_model(self.model, **self.model_constants)

    # -- flat key/value form --------------------------------------------
    @classmethod
    def from_flat(cls, flat):
        """Build from a flat mapping such as ``{"K": 30, "sg.steps": 1000, "model.sigma": 0.5}``."""
        top, consts = {}, {}
        sections = {name: {} for name in cls._SECTIONS}
        top_names = {f.name for f in dataclasses.fields(cls)} - set(cls._SECTIONS) - {"model_constants"}
        for key, value in flat.items():
            head, _, rest = key.partition(".")
            if rest and head == "model":
                consts[rest] = value
            elif rest and head in sections:
                if rest not in _sub_fields(cls._SECTIONS[head]):
                    raise ConfigError(f"unknown config key {key!r}")
                sections[head][rest] = value
            elif not rest and key in top_names:
                top[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            subs = {name: kind(**sections[name]) for name, kind in cls._SECTIONS.items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(model_constants=consts, **top, **subs)

    def to_flat(self):
        out = {}
        for f in dataclasses.fields(self):
            if f.name in self._SECTIONS:
                for k, v in dataclasses.asdict(getattr(self, f.name)).items():
                    out[f"{f.name}.{k}"] = v
            elif f.name == "model_constants":
                for k, v in self.model_constants.items():
                    out[f"model.{k}"] = _jsonable(v)
            else:
                out[f.name] = _jsonable(getattr(self, f.name))
        return out

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_flat(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                flat = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(flat, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_flat(flat)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


@dataclass
class StepRecord:
    k: int
    xi: list
    y: float
    xi_init: list
    n_temper_steps: int
    lambdas: list
    acceptance_rates: list
    ess_values: list
    mean_acceptance: float
    pce: float
    pce_se: float
    spce: float
    spce_se: float
    snmc: float
    snmc_se: float
    w2: float
    w2_blocks: dict
    w2_label_invariant: float
    wall_time: float = None

    def to_dict(self):
        d = dataclasses.asdict(self)
        if d["wall_time"] is None:
            del d["wall_time"]
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class RolloutRecord:
    config_digest: str
    rollout_index: int
    theta_star: list
    steps: list = field(default_factory=list)
    error: str = None

    @property
    def total_temper_steps(self):
        return sum(s.n_temper_steps for s in self.steps)

    def history(self):
        h = History()
        for s in self.steps:
            h.append(s.y, s.xi)
        return h


def rollout_seed(seed, rollout_index):
    return np.random.SeedSequence([int(seed), int(rollout_index)])


def _streams(seed, rollout_index):
    children = rollout_seed(seed, rollout_index).spawn(len(STREAMS))
    return {name: np.random.default_rng(c) for name, c in zip(STREAMS, children)}


def _dump(obj):
    return json.dumps(obj, sort_keys=True, allow_nan=True)


def run_rollout(config, rollout_index=0, out_path=None):
    """Run one rollout; optionally stream it to ``out_path`` as JSON lines.

    Raises :class:`RolloutError` (carrying the partial record) when a step
    fails with a degenerate cloud, a failed temper, or a non-finite gradient.
    """
    model = config.build_model()
    rngs = _streams(config.seed, rollout_index)
    if isinstance(config.theta_star, str):
        theta_star = model.sample_prior(rngs["truth"], 1)[0]
    else:
        theta_star = np.asarray(config.theta_star, dtype=float)
        if theta_star.shape != (model.d_theta,):
            raise ConfigError(f"theta_star must have length {model.d_theta}")
    record = RolloutRecord(config.digest(), rollout_index, theta_star.tolist())

    fh = open(out_path, "w") if out_path is not None else None
    try:
        if fh:
            header = {"type": "header", "config": config.to_flat(), "config_digest": record.config_digest,
                      "rollout_index": rollout_index, "theta_star": record.theta_star}
            fh.write(_dump(header) + "\n")
        try:
            _rollout_loop(config, model, theta_star, rngs, record, fh)
        except RUNTIME_ERRORS as exc:
            record.error = f"step {len(record.steps) + 1}: {type(exc).__name__}: {exc}"
        if fh:
            summary = {"type": "summary", "n_steps": len(record.steps),
                       "total_temper_steps": record.total_temper_steps, "error": record.error}
            fh.write(_dump(summary) + "\n")
    finally:
        if fh:
            fh.close()
    if record.error is not None:
        raise RolloutError(record.error, record)
    return record


def _rollout_loop(config, model, theta_star, rngs, record, fh):
    cloud = initial_cloud(model, rngs["smc"], config.M)
    history = History()
    evaluator = SequentialEvaluator(model, theta_star, config.eval, rngs["eval"])
    blocks = model.param_blocks()
    exchangeable = model.exchangeable_blocks()
    xi_prev = None
    for k in range(1, config.K + 1):
        t0 = time.perf_counter()
        sampler = TupleSampler(partition_cloud(cloud, config.L))
        if config.method == "random":
            xi = xi_init = model.sample_design(rngs["design"])
            est = estimate_pce(model, sampler, xi, config.pce_n_mc, rngs["design"])
        else:
            candidates = [model.sample_design(rngs["design"]) for _ in range(config.init_candidates)]
            if xi_prev is not None:
                candidates[-1] = xi_prev
            xi_init = candidates[0] if len(candidates) == 1 else screen_designs(
                model, sampler, candidates, config.init_n_mc, rngs["design"])
            xi, est = optimize_design(model, sampler, xi_init, config.sg, rngs["design"])
        y = float(model.simulate(theta_star, xi, rngs["noise"].standard_normal()))
        cloud, trace = temper_to_posterior(model, cloud, y, xi, history, config.temper, rngs["smc"])
        history.append(y, xi)
        xi_prev = np.asarray(xi, dtype=float)
        bounds = evaluator.update(y, xi)
        step = StepRecord(
            k=k, xi=np.asarray(xi, dtype=float).tolist(), y=y,
            xi_init=np.asarray(xi_init, dtype=float).tolist(),
            n_temper_steps=trace.n_steps, lambdas=[float(v) for v in trace.lambdas],
            acceptance_rates=[float(v) for v in trace.acceptance_rates],
            ess_values=[float(v) for v in trace.ess_values],
            mean_acceptance=float(np.mean(trace.acceptance_rates)),
            pce=est.value, pce_se=est.std_error,
            spce=bounds.spce, spce_se=bounds.spce_se, snmc=bounds.snmc, snmc_se=bounds.snmc_se,
            w2=wasserstein2_to_point(cloud, theta_star),
            w2_blocks=wasserstein2_blocks(cloud, theta_star, blocks),
            w2_label_invariant=wasserstein2_label_invariant(cloud, theta_star, exchangeable),
            wall_time=time.perf_counter() - t0 if config.record_timing else None,
        )
        record.steps.append(step)
        if fh:
            fh.write(_dump({"type": "step", **step.to_dict()}) + "\n")
            fh.flush()
        log.debug("rollout %d step %d: xi=%s temper=%d w2=%.4g", record.rollout_index, k, step.xi,
                  step.n_temper_steps, step.w2)
    return record


def read_rollout(path):
    """``(config, RolloutRecord)`` from a JSON-lines rollout file."""
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("type") != "header":
        raise ConfigError(f"{path} is not a rollout file (missing header)")
    header = lines[0]
    config = ExperimentConfig.from_flat(header["config"])
    record = RolloutRecord(header["config_digest"], header["rollout_index"], header["theta_star"])
    for line in lines[1:]:
        if line.get("type") == "step":
            record.steps.append(StepRecord.from_dict(line))
        elif line.get("type") == "summary":
            record.error = line.get("error")
    return config, record


def _batch_worker(args):
    config, index, out_path = args
    try:
        return run_rollout(config, index, out_path)
    except RolloutError as exc:
        return exc.record


def default_workers():
    value = os.environ.get(WORKERS_ENV)
    if value is None:
        return 1
    try:
        n = int(value)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer") from exc
    return max(1, n)


def run_batch(config, n_rollouts, parallelism=None, out_dir=None, name=None):
    """Run ``n_rollouts`` independent rollouts; returns ``(records, summary_rows)``.

    Rollout ``i`` always uses seed ``(config.seed, i)`` whatever the number of
    worker processes, so the files written do not depend on ``parallelism``.
    Failed rollouts keep their partial steps and their ``error``.
    """
    if n_rollouts < 1:
        raise ConfigError("rollouts must be ≥ 1")
    workers = default_workers() if parallelism is None else max(1, int(parallelism))
    name = name or f"{config.model}_{config.method}"
    paths = [None] * n_rollouts
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = [out_dir / f"{name}_rollout{i:03d}.jsonl" for i in range(n_rollouts)]
    jobs = [(config, i, paths[i]) for i in range(n_rollouts)]
    if workers == 1 or n_rollouts == 1:
        records = [_batch_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, n_rollouts)) as pool:
            records = list(pool.map(_batch_worker, jobs))
    for r in records:
        if r.error:
            log.warning("rollout %d failed: %s", r.rollout_index, r.error)
    rows = summarize(records, config.K)
    if out_dir is not None:
        write_summary_csv(rows, out_dir / f"{name}_summary.csv")
    return records, rows


SUMMARY_COLUMNS = ("k", "spce_med", "spce_se", "snmc_med", "snmc_se", "w2_med", "w2_se", "temper_med")


def _se(values):
    v = np.asarray(values, dtype=float)
    return float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def summarize(records, K):
    """Per-step medians and standard errors (``std / sqrt(n)``) across rollouts."""
    rows = []
    for k in range(1, K + 1):
        steps = [r.steps[k - 1] for r in records if len(r.steps) >= k]
        if not steps:
            break
        row = {"k": k}
        for key in ("spce", "snmc", "w2"):
            vals = [getattr(s, key) for s in steps]
            row[f"{key}_med"] = float(np.median(vals))
            row[f"{key}_se"] = _se(vals)
        row["temper_med"] = float(np.median([s.n_temper_steps for s in steps]))
        rows.append(row)
    return rows


def write_summary_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row[c] for c in SUMMARY_COLUMNS})

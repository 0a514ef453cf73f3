"""Distinguishing experiments, dl sweeps and countermeasure comparisons.

Every trial gets its own co-processor seed from :func:`derive_seed`, so
results depend only on the configuration and never on execution order or on
how many worker processes ran the trials.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

from diversim import __version__
from diversim.bench import BenchmarkSpec, get_benchmark
from diversim.coproc import MAX_DL, CoProcessor, DiversityConfig, PrngState
from diversim.errors import ExecutionError
from diversim.ir import CI_OPS, MASK64
from diversim.leakage import TimingSamples, ba_capacity, build_channel, capacity_reduction
from diversim.machine import CostModel, Machine

SCHEMA_VERSION = 1
# xored into the master seed for the OS-noise streams ("noise" in ASCII)
NOISE_SALT = 0x6E6F697365
SEED_FALLBACK = 0x9E3779B97F4A7C15


def splitmix64_mix(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, key_index: int, trial: int) -> int:
    """Per-trial seed: ``mix(mix(master) ^ (key_index * 2**32 + trial))``.

    ``mix`` is the splitmix64 finalizer.  Mixing the master first keeps
    nearby masters (1, 2, 3, ...) from yielding permutations of one another's
    trial seeds.
    """
    z = splitmix64_mix(splitmix64_mix(master) ^ (((key_index << 32) + trial) & MASK64))
    return z or SEED_FALLBACK


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "bare_metal"
    mean_jitter: float = 0.0

    def __post_init__(self):
        if self.kind not in ("bare_metal", "os"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.mean_jitter < 0:
            raise ValueError("mean jitter must be non-negative")

    @classmethod
    def parse(cls, text: str) -> "NoiseModel":
        """``bare`` / ``bare_metal`` or ``os`` / ``os:<mean>``."""
        if text in ("bare", "bare_metal"):
            return cls()
        if text == "os":
            return cls("os", 5.0)
        if text.startswith("os:"):
            return cls("os", float(text[3:]))
        raise ValueError(f"bad noise spec {text!r}; expected 'bare' or 'os:<mean>'")

    def __str__(self) -> str:
        return "bare" if self.kind == "bare_metal" else f"os:{self.mean_jitter:g}"


def apply_noise(cycles: int, m: NoiseModel, rng: PrngState) -> tuple[int, PrngState]:
    """Add OS jitter: geometric on {0, 1, ...} with the configured mean."""
    if m.kind == "bare_metal" or m.mean_jitter == 0:
        return cycles, rng
    # inverse CDF with u uniform on (0, 1]
    u = ((rng.next() >> 11) + 1) / float(1 << 53)
    success = 1.0 / (1.0 + m.mean_jitter)
    jitter = int(math.floor(math.log(u) / math.log1p(-success)))
    return cycles + jitter, rng


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: str
    variant: str
    key_pair: tuple[int, int] | None = None
    public_args: tuple[int, ...] | None = None
    samples_per_key: int = 1000
    dl: int = 0
    master_seed: int = 1
    noise: NoiseModel = NoiseModel()
    mul_operand_dependent: bool = True
    div_operand_dependent: bool = True
    ops_filter: tuple[str, ...] | None = None

    def validate(self) -> None:
        if self.samples_per_key < 1:
            raise ValueError("samples_per_key must be at least 1")
        if self.key_pair is not None and self.key_pair[0] == self.key_pair[1]:
            raise ValueError("the two secret keys must differ")
        if not 0 <= self.dl <= MAX_DL:
            raise ValueError(f"dl must be in 0..{MAX_DL}")

    def cost_model(self) -> CostModel:
        return CostModel(
            mul_operand_dependent=self.mul_operand_dependent,
            div_operand_dependent=self.div_operand_dependent,
        )

    def resolve(self) -> tuple["ExperimentConfig", BenchmarkSpec]:
        """Fill benchmark defaults (keys, public inputs, ops) into the config."""
        self.validate()
        spec = get_benchmark(self.benchmark, self.variant, self.ops_filter)
        resolved = replace(
            self,
            key_pair=tuple(self.key_pair) if self.key_pair is not None else spec.default_keys,
            public_args=tuple(self.public_args) if self.public_args is not None else tuple(spec.public_args),
            ops_filter=spec.ops_filter,
        )
        resolved.validate()
        return resolved, spec

    def to_dict(self) -> dict:
        d = asdict(self)
        d["key_pair"] = list(self.key_pair) if self.key_pair is not None else None
        d["public_args"] = list(self.public_args) if self.public_args is not None else None
        d["ops_filter"] = list(self.ops_filter) if self.ops_filter is not None else None
        d["noise"] = {"kind": self.noise.kind, "mean_jitter": self.noise.mean_jitter}
        return d


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    samples: dict[str, list[int]]
    key_values: dict[str, int]
    capacity: dict
    ci_instructions: int
    baseline: dict | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def labels(self) -> list[str]:
        return list(self.samples)

    def histogram(self, label: str) -> list[tuple[int, int]]:
        counts: dict[int, int] = {}
        for c in self.samples[label]:
            counts[c] = counts.get(c, 0) + 1
        return sorted(counts.items())

    def mean_cycles(self, label: str | None = None) -> float:
        if label is not None:
            obs = self.samples[label]
            return sum(obs) / len(obs)
        total = sum(sum(v) for v in self.samples.values())
        return total / sum(len(v) for v in self.samples.values())

    @property
    def capacity_bits(self) -> float:
        return self.capacity["capacity_bits"]

    def to_dict(self) -> dict:
        keys = []
        for label in self.labels:
            obs = self.samples[label]
            keys.append(
                {
                    "label": label,
                    "value": self.key_values[label],
                    "samples": len(obs),
                    "mean_cycles": self.mean_cycles(label),
                    "min_cycles": min(obs),
                    "max_cycles": max(obs),
                    "histogram": [list(pair) for pair in self.histogram(label)],
                }
            )
        return {
            "schema": SCHEMA_VERSION,
            "tool": {"name": "diversim", "version": __version__},
            "config": self.config.to_dict(),
            "seeds": {
                "master_seed": self.config.master_seed,
                "trial_seed": "mix(mix(master_seed) ^ (key_index * 2**32 + trial)), mix = splitmix64 finalizer, 0 -> 0x9E3779B97F4A7C15",
                "noise_seed": "same rule applied to master_seed ^ 0x6E6F697365",
            },
            "program": {"ci_instructions": self.ci_instructions},
            "results": {
                "keys": keys,
                "mean_cycles": self.mean_cycles(),
                "capacity": self.capacity,
                "baseline": self.baseline,
            },
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def samples_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "cycles"])
        for label in self.labels:
            for c in self.samples[label]:
                w.writerow([label, c])
        return buf.getvalue()

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "cycles", "count"])
        for label in self.labels:
            for c, n in self.histogram(label):
                w.writerow([label, c, n])
        return buf.getvalue()


# -- trial execution ----------------------------------------------------------


def _run_trials(job: tuple) -> list[int]:
    """Worker body: cycles for trials [start, stop) of one key."""
    machine, args, dl, master, key_index, start, stop, noise, expected = job
    out = []
    for t in range(start, stop):
        coproc = CoProcessor(DiversityConfig(dl, derive_seed(master, key_index, t))) if machine.has_ci else None
        try:
            res = machine.run(args, coproc)
        except ExecutionError as exc:
            raise ExecutionError(f"key {key_index}, trial {t}: {exc}") from exc
        if res.return_value != expected:
            raise ExecutionError(
                f"key {key_index}, trial {t}: returned {res.return_value}, oracle says {expected}"
            )
        cycles = res.total_cycles
        if noise.kind != "bare_metal":
            cycles, _ = apply_noise(cycles, noise, PrngState(derive_seed(master ^ NOISE_SALT, key_index, t)))
        out.append(cycles)
    return out


def collect_samples(config: ExperimentConfig, spec: BenchmarkSpec, workers: int = 1) -> dict[str, list[int]]:
    machine = Machine(spec.program, config.cost_model())
    jobs = []
    for key_index, key in enumerate(config.key_pair):
        args = spec.args_for(key, list(config.public_args))
        expected = spec.oracle(key, list(config.public_args))
        n = config.samples_per_key
        chunk = n if workers <= 1 else max(1, -(-n // workers))
        for start in range(0, n, chunk):
            jobs.append(
                (machine, args, config.dl, config.master_seed, key_index, start, min(n, start + chunk), config.noise, expected)
            )
    if workers <= 1:
        results = [_run_trials(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_trials, jobs))
    samples: dict[str, list[int]] = {f"key{i}": [] for i in range(len(config.key_pair))}
    for job, cycles in zip(jobs, results):
        samples[f"key{job[4]}"].extend(cycles)
    return samples


def run_experiment(
    config: ExperimentConfig, baseline: ExperimentReport | None = None, workers: int = 1
) -> ExperimentReport:
    """Run the two-key distinguishing experiment and estimate channel capacity."""
    config, spec = config.resolve()
    samples = collect_samples(config, spec, workers)
    result = ba_capacity(build_channel(TimingSamples(list(samples), samples)))
    n_ci = sum(1 for f in spec.program.functions for ins in f.body if ins.opcode in CI_OPS)
    report = ExperimentReport(
        config=config,
        samples=samples,
        key_values={f"key{i}": k for i, k in enumerate(config.key_pair)},
        capacity=result.to_dict(),
        ci_instructions=n_ci,
    )
    if not result.converged:
        report.notes.append("capacity estimate did not converge")
    if baseline is not None:
        report.baseline = compare_to_baseline(report, baseline)
    return report


def overhead_percent(baseline_cycles: float, cycles: float) -> float:
    return 100.0 * (cycles / baseline_cycles - 1.0)


def compare_to_baseline(report: ExperimentReport, baseline: ExperimentReport) -> dict:
    base_cap = baseline.capacity_bits
    return {
        "variant": baseline.config.variant,
        "capacity_bits": base_cap,
        "mean_cycles": baseline.mean_cycles(),
        "capacity_reduction_percent": capacity_reduction(base_cap, report.capacity_bits) if base_cap > 0 else None,
        "overhead_percent": overhead_percent(baseline.mean_cycles(), report.mean_cycles()),
    }


# -- sweeps and comparisons ----------------------------------------------------


def sweep_dl(config: ExperimentConfig, dls: Sequence[int], workers: int = 1) -> dict:
    """Capacity and mean cycles per diversification level."""
    if not dls:
        raise ValueError("need at least one diversification level")
    resolved, _ = config.resolve()
    rows = []
    for dl in dls:
        row: dict = {"dl": dl}
        try:
            rep = run_experiment(replace(config, dl=dl), workers=workers)
        except (ExecutionError, ValueError) as exc:
            row.update(capacity_bits=None, converged=False, mean_cycles=None, mean_cycles_per_key=None, error=str(exc))
        else:
            row.update(
                capacity_bits=rep.capacity_bits,
                converged=rep.capacity["converged"],
                mean_cycles=rep.mean_cycles(),
                mean_cycles_per_key={label: rep.mean_cycles(label) for label in rep.labels},
                error=None,
            )
        rows.append(row)
    return {
        "schema": SCHEMA_VERSION,
        "tool": {"name": "diversim", "version": __version__},
        "config": replace(resolved, dl=0).to_dict() | {"dl": None},
        "dls": list(dls),
        "rows": rows,
    }


def compare_solutions(benchmark: str, configs: dict[str, ExperimentConfig], workers: int = 1) -> dict:
    """Per-variant capacity, capacity reduction and overhead relative to BL."""
    if "BL" not in configs:
        raise ValueError("comparison needs a BL configuration as the baseline")
    base = run_experiment(configs["BL"], workers=workers)
    rows = []
    for label, cfg in configs.items():
        if cfg.benchmark != benchmark:
            raise ValueError(f"config for {label} targets {cfg.benchmark}, not {benchmark}")
        rep = base if label == "BL" else run_experiment(cfg, workers=workers)
        cmp = compare_to_baseline(rep, base)
        rows.append(
            {
                "label": label,
                "variant": rep.config.variant,
                "dl": rep.config.dl,
                "capacity_bits": rep.capacity_bits,
                "mean_cycles": rep.mean_cycles(),
                "capacity_reduction_percent": cmp["capacity_reduction_percent"],
                "overhead_percent": cmp["overhead_percent"],
            }
        )
    return {
        "schema": SCHEMA_VERSION,
        "tool": {"name": "diversim", "version": __version__},
        "benchmark": benchmark,
        "baseline": {"capacity_bits": base.capacity_bits, "mean_cycles": base.mean_cycles()},
        "configs": {label: cfg.resolve()[0].to_dict() for label, cfg in configs.items()},
        "rows": rows,
    }


def table_csv(rows: list[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow(["" if row.get(c) is None else row.get(c) for c in columns])
    return buf.getvalue()

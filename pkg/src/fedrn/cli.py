"""Command-line front end: ``fedrn run | compare | sweep``.

Experiment specs are flat ``key = value`` text files; ``#`` starts a comment.
Section prefixes group fields (``train.learning_rate``, ``data.spread``,
``noise.type``).  See :data:`FIELDS` for every accepted key.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractViolation
from .federation import DataConfig, SimulationConfig, run_simulation, save_params
from .gmm import EmConfig
from .metrics import format_value, write_csv, write_json
from .model import TrainConfig

log = logging.getLogger("fedrn")

EXIT_OK, EXIT_PARSE, EXIT_INVARIANT, EXIT_RUNTIME = 0, 2, 3, 4
SWEEP_PARAMS = ("alpha", "k", "participation_rate", "keep_fraction")


class SpecParseError(Exception):
    pass


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _opt_int(text: str):
    return None if text.lower() in ("", "none", "auto") else int(text)


# spec key -> (section, attribute, parser)
FIELDS = {
    "num_clients": ("sim", "num_clients", int),
    "participation_rate": ("sim", "participation_rate", float),
    "rounds": ("sim", "rounds", int),
    "warmup_rounds": ("sim", "warmup_rounds", _opt_int),
    "k": ("sim", "k", int),
    "alpha": ("sim", "alpha", float),
    "method": ("sim", "method", str),
    "neighbor_mode": ("sim", "neighbor_mode", str),
    "fine_tune": ("sim", "fine_tune", _bool),
    "keep_fraction": ("sim", "keep_fraction", float),
    "hidden": ("sim", "hidden", _int_tuple),
    "seed": ("sim", "master_seed", int),
    "repeat": ("exp", "repeat", int),
    "output": ("exp", "output", str),
    "checkpoint": ("exp", "checkpoint", _bool),
    "save_reliability": ("exp", "save_reliability", _bool),
    "train.learning_rate": ("train", "learning_rate", float),
    "train.momentum": ("train", "momentum", float),
    "train.local_epochs": ("train", "local_epochs", int),
    "train.batch_size": ("train", "batch_size", int),
    "em.max_iters": ("em", "max_iters", int),
    "em.rel_tol": ("em", "rel_tol", float),
    "em.var_floor_scale": ("em", "var_floor_scale", float),
    "data.num_classes": ("data", "num_classes", int),
    "data.per_class": ("data", "per_class", int),
    "data.spread": ("data", "spread", float),
    "data.dim": ("data", "dim", int),
    "data.radius": ("data", "radius", float),
    "data.partition": ("data", "partition", str),
    "data.shards_per_client": ("data", "shards_per_client", int),
    "data.beta": ("data", "beta", float),
    "noise.type": ("data", "noise", str),
    "noise.lo": ("data", "noise_lo", float),
    "noise.hi": ("data", "noise_hi", float),
}


@dataclass(frozen=True)
class ExperimentSpec:
    sim: SimulationConfig
    repeat: int = 1
    output: str = "runs"
    checkpoint: bool = False
    save_reliability: bool = False

    @property
    def seeds(self) -> list[int]:
        return [self.sim.master_seed + i for i in range(self.repeat)]

    def with_sim(self, **kw) -> "ExperimentSpec":
        return replace(self, sim=replace(self.sim, **kw))

    def resolved_text(self) -> str:
        """Every field, including defaulted ones, in spec-file syntax."""
        values = {"sim": self.sim, "train": self.sim.train, "em": self.sim.em,
                  "data": self.sim.data, "exp": self}
        lines = []
        for key, (section, attr, _) in FIELDS.items():
            v = getattr(values[section], attr)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            elif v is None:
                v = "auto"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"


def parse_spec_text(text: str, source: str = "<spec>") -> dict[str, dict]:
    """Parse spec text into per-section keyword dicts; raises :class:`SpecParseError`."""
    out: dict[str, dict] = {s: {} for s in ("sim", "train", "em", "data", "exp")}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecParseError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in FIELDS:
            raise SpecParseError(f"{source}:{lineno}: {key}: unknown field")
        if key in seen:
            raise SpecParseError(f"{source}:{lineno}: {key}: already set on line {seen[key]}")
        seen[key] = lineno
        section, attr, conv = FIELDS[key]
        try:
            out[section][attr] = conv(value)
        except ValueError as exc:
            raise SpecParseError(f"{source}:{lineno}: {key}: {exc}") from None
    return out


def build_spec(sections: dict[str, dict], seed: int | None = None,
               method: str | None = None, output: str | None = None) -> ExperimentSpec:
    """Assemble configs; invariant violations surface as :class:`ConfigError`."""
    sim_kw = dict(sections["sim"])
    if seed is not None:
        sim_kw["master_seed"] = seed
    if method is not None:
        sim_kw["method"] = method
    try:
        train = TrainConfig(**sections["train"])
        em = EmConfig(**sections["em"])
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from None
    for name, v in (("train.learning_rate", train.learning_rate), ("train.momentum", train.momentum)):
        if not (math.isfinite(v) and v >= 0):
            raise ConfigError(f"{name}: must be a finite nonnegative number")
    if train.batch_size < 1 or train.local_epochs < 0:
        raise ConfigError("train.batch_size must be >= 1 and train.local_epochs >= 0")
    sim = SimulationConfig(train=train, em=em, data=DataConfig(**sections["data"]), **sim_kw)
    exp = dict(sections["exp"])
    if output is not None:
        exp["output"] = output
    spec = ExperimentSpec(sim=sim, **exp)
    if spec.repeat < 1:
        raise ConfigError("repeat: must be >= 1")
    return spec


def load_spec(path, **overrides) -> ExperimentSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SpecParseError(f"{path}: {exc.strerror}") from None
    return build_spec(parse_spec_text(text, str(path)), **overrides)


# ---------------------------------------------------------------- execution

def _write_aggregate(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_value(v) if not isinstance(v, str) else v for v in row])


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def run_set(spec: ExperimentSpec, out: Path) -> list[float | None]:
    """Run every seed of ``spec`` into ``out``; returns the per-seed final test accuracies."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.resolved.txt").write_text(spec.resolved_text())
    finals = []
    for s in spec.seeds:
        cfg = replace(spec.sim, master_seed=s)
        log.info("%s: method=%s seed=%d", out, cfg.method, s)
        result = run_simulation(cfg)
        write_csv(out / f"seed_{s}.csv", result.metrics)
        write_json(out / f"seed_{s}.json", result.metrics)
        if spec.checkpoint:
            save_params(out / f"seed_{s}.params.txt", result.state.global_params, result.state.round)
        if spec.save_reliability and result.server.last_table is not None:
            result.server.last_table.to_csv(out / f"seed_{s}.similarity.csv", "similarity")
            result.server.last_table.to_csv(out / f"seed_{s}.reliability.csv", "reliability")
        finals.append(result.final_test_accuracy)
    mean, std = _mean_std(finals)
    rows = [[s, f] for s, f in zip(spec.seeds, finals)] + [["mean", mean], ["std", std]]
    _write_aggregate(out / "aggregate.csv", ["seed", "final_test_accuracy"], rows)
    return finals


def _table(out: Path, name: str, key: str, labels: list[str], columns: list[list], seeds) -> None:
    """Per-seed columns plus mean/std rows."""
    rows = [[s] + [col[i] for col in columns] for i, s in enumerate(seeds)]
    stats = [_mean_std(col) for col in columns]
    rows.append(["mean"] + [m for m, _ in stats])
    rows.append(["std"] + [sd for _, sd in stats])
    _write_aggregate(out / name, [key] + labels, rows)


def cmd_run(spec: ExperimentSpec, args) -> None:
    run_set(spec, Path(spec.output))


def cmd_compare(spec: ExperimentSpec, args) -> None:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if len(methods) < 2:
        raise ConfigError("methods: compare needs at least two methods")
    specs = [spec.with_sim(method=m) for m in methods]  # validates every method up front
    out = Path(spec.output)
    labels, columns, used = [], [], {}
    for m, sp in zip(methods, specs):
        used[m] = used.get(m, 0) + 1
        label = m if used[m] == 1 else f"{m}-{used[m]}"
        labels.append(label)
        columns.append(run_set(sp, out / label))
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.resolved.txt").write_text(spec.resolved_text())
    _table(out, "compare.csv", "seed", labels, columns, spec.seeds)


def _sweep_value(param: str, text: str):
    conv = int if param == "k" else float
    try:
        return conv(text)
    except ValueError:
        raise SpecParseError(f"--values: {param}: cannot parse {text!r}") from None


def cmd_sweep(spec: ExperimentSpec, args) -> None:
    if args.param not in SWEEP_PARAMS:
        raise ConfigError(f"param: unknown sweep parameter {args.param!r}")
    values = [_sweep_value(args.param, v.strip()) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("values: at least one value is required")
    specs = [spec.with_sim(**{args.param: v}) for v in values]
    out = Path(spec.output)
    rows = []
    for v, sp in zip(values, specs):
        finals = run_set(sp, out / f"{args.param}={v}")
        rows.append([v] + finals + list(_mean_std(finals)))
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.resolved.txt").write_text(spec.resolved_text())
    header = [args.param] + [f"seed_{s}" for s in spec.seeds] + ["mean", "std"]
    _write_aggregate(out / "sweep.csv", header, rows)


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedrn", description="Federated learning with reliable neighbours on noisy labels.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--spec", required=True, help="experiment spec file (key = value lines)")
        sp.add_argument("--out", help="output directory (overrides the spec's output)")
        sp.add_argument("--seed", type=int, help="master seed (overrides the spec)")
        sp.add_argument("--method", help="method tag (overrides the spec)")

    common(sub.add_parser("run", help="run one configuration for every seed"))
    cp = sub.add_parser("compare", help="run several methods on identical seeds and data")
    common(cp)
    cp.add_argument("--methods", required=True, help="comma-separated method tags")
    sw = sub.add_parser("sweep", help="run one configuration per parameter value")
    common(sw)
    sw.add_argument("--param", required=True, help="one of " + ", ".join(SWEEP_PARAMS))
    sw.add_argument("--values", required=True, help="comma-separated values")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_OK if exc.code == 0 else EXIT_PARSE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        spec = load_spec(args.spec, seed=args.seed, method=args.method, output=args.out)
        COMMANDS[args.command](spec, args)
    except SpecParseError as exc:
        print(f"fedrn: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ConfigError as exc:
        print(f"fedrn: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"fedrn: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Experiment runner.

Verbs: ``run``, ``compare``, ``gen-data``, ``calibrate``, ``partition-inspect``.
Experiments are described by an INI file; see ``configs/`` for the shipped
recipes and README.md for every key.

Exit codes: 0 success, 2 invalid configuration or usage, 3 runtime failure,
4 malformed input file.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import json
import logging
import re
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from . import dualcopy, fedproto, nncore
from .calibrate import Schedule, TrainConfig, obtain_schedule, pretrain
from .errors import ConfigurationError, FedSQError, FormatError
from .fedproto import FederationConfig
from .nncore import Conv2d, Dense, Flatten, ModelArch
from .partition import heterogeneity_index, make_plan

log = logging.getLogger("fedsq")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_FORMAT = 0, 2, 3, 4
STRATEGY_NAMES = {"fedavg": "FedAvg", "fedprox": "FedProx", "fedsq": "FedSQ"}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    strategies: tuple
    out: Path
    seed: int
    arch: ModelArch
    federation: FederationConfig
    source: D.SyntheticSpec
    probe: D.SyntheticSpec
    target: D.SyntheticSpec
    validation: D.SyntheticSpec
    train: TrainConfig
    pretrain_epochs: int = 20
    schedule: Schedule | None = None  # None -> progressive-unfreezing search
    record_wall_time: bool = True


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

_LAYER_RE = re.compile(r"^(dense|conv|flatten)\b(.*)$")


def parse_layers(text: str, input_shape: tuple) -> ModelArch:
    """One layer per line: ``dense OUT [relu]``, ``conv OUT kernel=K [stride=S]
    [padding=P] [relu]`` or ``flatten``. Input sizes are inferred."""
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise ConfigurationError("[model] layers: no layers given")
    layers, shape = [], tuple(input_shape)
    for ln in lines:
        m = _LAYER_RE.match(ln)
        if not m:
            raise ConfigurationError(f"[model] layers: cannot parse {ln!r}")
        kind, rest = m.group(1), m.group(2).split()
        gated = "relu" in rest
        rest = [r for r in rest if r != "relu"]
        opts = dict(r.split("=", 1) for r in rest if "=" in r)
        positional = [r for r in rest if "=" not in r]
        try:
            if kind == "flatten":
                layer = Flatten()
            elif kind == "dense":
                layer = Dense(shape[0], int(positional[0]), gated)
            else:
                layer = Conv2d(shape[0], int(positional[0]), int(opts["kernel"]), int(opts.get("stride", 1)),
                               int(opts.get("padding", 0)), gated)
            shape = ModelArch._next_shape(len(layers), layer, shape)
        except (IndexError, KeyError, ValueError, ConfigurationError) as exc:
            raise ConfigurationError(f"[model] layers: bad layer {ln!r} ({exc})") from exc
        layers.append(layer)
    num_classes = layers[-1].out_dim if isinstance(layers[-1], Dense) else 0
    try:
        return ModelArch(tuple(input_shape), tuple(layers), num_classes)
    except ConfigurationError as exc:
        raise ConfigurationError(f"[model] layers: {exc}") from exc


class _Section:
    """Typed access to one config section with field-named errors."""

    def __init__(self, cp: configparser.ConfigParser, name: str):
        self.name = name
        self.sec = cp[name] if cp.has_section(name) else {}
        self.used = set()

    def get(self, key, conv=str, default=None, required=False):
        self.used.add(key)
        if key not in self.sec:
            if required:
                raise ConfigurationError(f"missing required field [{self.name}] {key}")
            return default
        raw = self.sec[key]
        try:
            return conv(raw)
        except (ValueError, ConfigurationError) as exc:
            raise ConfigurationError(f"[{self.name}] {key} = {raw!r}: {exc}") from exc

    def check_unknown(self):
        extra = set(self.sec) - self.used
        if extra:
            raise ConfigurationError(f"[{self.name}] unknown field(s): {', '.join(sorted(extra))}")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _shape(text: str) -> tuple:
    return tuple(int(t) for t in text.replace("x", ",").split(",") if t.strip())


def _strategies(text: str) -> tuple:
    names = tuple(t.strip().lower() for t in text.split(",") if t.strip())
    if not names:
        raise ValueError("strategy list is empty")
    for n in names:
        if n not in fedproto.STRATEGIES:
            raise ValueError(f"unknown strategy {n!r}")
    return names


def _schedule(text: str):
    return None if text.strip().lower() == "auto" else Schedule.from_bitstring(text.strip())


def load_config(path, seed: int | None = None, out: str | None = None, workers: int | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    known = {"experiment", "model", "federation", "source", "target", "validation", "probe", "calibration"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigurationError(f"unknown section(s): {', '.join(sorted(unknown))}")
    raw = {"cp": cp, "path": str(path), "out": out, "workers": workers}
    return _assemble(raw, seed=seed)


def _assemble(raw: dict, seed: int | None = None) -> ExperimentConfig:
    cp = raw["cp"]
    exp = _Section(cp, "experiment")
    name = exp.get("name", default=Path(raw["path"]).stem)
    strategies = exp.get("strategies", _strategies, required=True)
    seed = exp.get("seed", int, 0) if seed is None else seed
    exp.used.add("seed")
    out = Path(raw["out"] or exp.get("out", default=f"runs/{name}"))
    exp.used.add("out")
    workers = raw["workers"] or exp.get("workers", int, 1)
    exp.used.add("workers")
    record_wall_time = exp.get("record_wall_time", _bool, True)
    exp.check_unknown()

    model = _Section(cp, "model")
    input_shape = model.get("input_shape", _shape, required=True)
    arch = parse_layers(model.get("layers", required=True), input_shape)
    model.check_unknown()

    fed = _Section(cp, "federation")
    fed_kwargs = dict(
        m=fed.get("m", int, 10), k=fed.get("k", int, None), e=fed.get("e", int, 1), t=fed.get("t", int, 5),
        lr=fed.get("lr", float, 1e-2), wd=fed.get("wd", float, 1e-4), batch_size=fed.get("batch_size", int, 64),
        mu=fed.get("mu", float, 0.01), partition=fed.get("partition", str, "iid"),
        alpha=fed.get("alpha", float, 0.5), min_per_client=fed.get("min_per_client", int, None),
        eval_every=fed.get("eval_every", int, 1),
    )
    fed.check_unknown()
    federation = FederationConfig(**fed_kwargs, seed=seed, workers=workers)

    center_seed = 1000 + seed

    def spec(section, default_gen, default_n, sample_seed, base=None):
        s = _Section(cp, section)
        base = base or {}
        gen = s.get("generator", str, base.get("generator", default_gen))
        kwargs = dict(
            generator=gen,
            n_samples=s.get("n_samples", int, default_n),
            n_classes=arch.num_classes,
            input_shape=arch.input_shape,
            noise_sigma=s.get("noise_sigma", float, base.get("noise_sigma", 1.0)),
            center_scale=s.get("center_scale", float, base.get("center_scale", 1.0)),
            domain_shift=s.get("domain_shift", float, base.get("domain_shift", 0.0)),
            seed=sample_seed,
            center_seed=center_seed,
        )
        s.check_unknown()
        return D.SyntheticSpec(**kwargs)

    source = spec("source", "blobs", 3000, 10 * seed + 1)
    src_base = dataclasses.asdict(source)
    probe = spec("probe", source.generator, 600, 10 * seed + 2, src_base)
    target = spec("target", "shifted_blobs", 3000, 10 * seed + 3)
    validation = spec("validation", target.generator, 1000, 10 * seed + 4, dataclasses.asdict(target))

    cal = _Section(cp, "calibration")
    train = TrainConfig(
        lr=cal.get("lr", float, federation.lr), wd=cal.get("wd", float, federation.wd),
        batch_size=cal.get("batch_size", int, federation.batch_size), seed=seed,
        finetune_epochs=cal.get("finetune_epochs", int, 5), val_fraction=cal.get("val_fraction", float, 0.3),
    )
    pretrain_epochs = cal.get("pretrain_epochs", int, 20)
    schedule = cal.get("schedule", _schedule, None)
    cal.check_unknown()
    if schedule is not None and len(schedule) != len(arch.param_layers):
        raise ConfigurationError(
            f"[calibration] schedule has {len(schedule)} entries, model has {len(arch.param_layers)} layers"
        )

    return ExperimentConfig(name, strategies, out, seed, arch, federation, source, probe, target, validation,
                            train, pretrain_epochs, schedule, record_wall_time)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def make_datasets(cfg: ExperimentConfig) -> dict:
    return {name: D.generate(getattr(cfg, name)) for name in ("source", "probe", "target", "validation")}


def calibrate_phase(cfg: ExperimentConfig, datasets: dict) -> tuple:
    """Pretrained checkpoint plus the schedule every strategy will follow."""
    w_pt = pretrain(cfg.arch, datasets["source"], cfg.pretrain_epochs, cfg.train)
    if cfg.schedule is not None:
        return w_pt, cfg.schedule, None
    report = obtain_schedule(w_pt, datasets["probe"], cfg.train)
    return w_pt, report.selected, report


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Full pipeline; writes logs, checkpoints and summaries under ``cfg.out``."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    datasets = make_datasets(cfg)
    w_pt, schedule, report = calibrate_phase(cfg, datasets)
    nncore.save_params(w_pt, cfg.out / "pretrained.ckpt")
    if report is not None:
        report.save(cfg.out / "calibration.json")
    plan = make_plan(datasets["target"], cfg.federation.m, cfg.federation.partition, cfg.seed,
                     cfg.federation.alpha, cfg.federation.min_per_client)
    plan.save(cfg.out / "partition.json")

    results = {}
    for strategy in cfg.strategies:
        fcfg = fedproto.with_strategy(cfg.federation, strategy)
        res = fedproto.run_federation(fcfg, datasets["target"], datasets["validation"], w_pt, schedule,
                                      plan=plan, log_path=cfg.out / f"{strategy}.csv")
        if not cfg.record_wall_time:
            _blank_wall_time(cfg.out / f"{strategy}.csv")
        if isinstance(res.final, dualcopy.DualCopyModel):
            dualcopy.save_dual_copy(res.final, cfg.out / f"{strategy}.ckpt")
        else:
            nncore.save_params(res.final, cfg.out / f"{strategy}.ckpt")
        results[strategy] = res

    rows = []
    for strategy, res in results.items():
        best_r, bva = res.best
        rows.append({"partition": _partition_label(cfg.federation), "aggregation": STRATEGY_NAMES[strategy],
                     "best_round": best_r, "bva": bva})
    with open(cfg.out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["partition", "aggregation", "best_round", "bva"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    summary = {
        "experiment": cfg.name,
        "seed": cfg.seed,
        "schedule": schedule.bitstring(),
        "partition": _partition_label(cfg.federation),
        "heterogeneity_index": heterogeneity_index(plan, datasets["target"]),
        "strategies": {r["aggregation"]: {"best_round": r["best_round"], "best_val_accuracy": r["bva"]} for r in rows},
    }
    (cfg.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return results


def _partition_label(fcfg: FederationConfig) -> str:
    return "iid" if fcfg.partition == "iid" else f"dirichlet({fcfg.alpha:g})"


def _blank_wall_time(path: Path):
    rows = list(csv.reader(open(path, newline="")))
    col = rows[0].index("wall_time_s")
    for row in rows[1:]:
        row[col] = "0"
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def summarize_logs(paths) -> list:
    """``(name, strategy, best_round, bva, rounds)`` per log file."""
    rows = []
    for p in paths:
        logs = fedproto.read_round_logs(p)
        best_r, bva = fedproto.best_round(logs)
        rows.append((Path(p).stem, logs[0].strategy, best_r, bva, len(logs)))
    return rows


def format_table(header, rows) -> str:
    cells = [list(map(str, header))] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(c):
    return f"{c:.4f}" if isinstance(c, float) else str(c)


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.seed, args.out, args.workers)
    results = run_experiment(cfg)
    rows = [(_partition_label(cfg.federation), STRATEGY_NAMES[s], *r.best) for s, r in results.items()]
    print(format_table(("partition", "aggregation", "best_round", "bva"), rows))
    print(f"outputs in {cfg.out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    rows = summarize_logs(args.logs)
    header = ("log", "strategy", "best_round", "bva", "rounds")
    if args.format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows([(n, s, r, repr(b), t) for n, s, r, b, t in rows])
        sys.stdout.write(buf.getvalue())
    else:
        print(format_table(header, rows))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.seed, args.out, args.workers)
    cfg.out.mkdir(parents=True, exist_ok=True)
    for name, ds in make_datasets(cfg).items():
        D.store(ds, cfg.out / f"{name}.bin")
        print(f"{name}: {len(ds)} samples, shape {ds.input_shape} -> {cfg.out / (name + '.bin')}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config, args.seed, args.out, args.workers)
    cfg.out.mkdir(parents=True, exist_ok=True)
    datasets = make_datasets(cfg)
    w_pt = pretrain(cfg.arch, datasets["source"], cfg.pretrain_epochs, cfg.train)
    nncore.save_params(w_pt, cfg.out / "pretrained.ckpt")
    report = obtain_schedule(w_pt, datasets["probe"], cfg.train)
    report.save(cfg.out / "calibration.json")
    rows = [(s.bitstring(), acc, "*" if s == report.selected else "") for s, acc in report.candidates]
    print(format_table(("schedule", "probe_accuracy", "selected"), rows))
    print(f"stop: {report.stop_reason}")
    return EXIT_OK


def cmd_partition_inspect(args) -> int:
    cfg = load_config(args.config, args.seed, args.out, args.workers)
    target = D.generate(cfg.target)
    fc = cfg.federation
    plan = make_plan(target, fc.m, fc.partition, cfg.seed, fc.alpha, fc.min_per_client)
    rows = []
    for i, a in enumerate(plan.assignments):
        hist = np.bincount(target.labels[a], minlength=target.class_count)
        rows.append((i, len(a), " ".join(str(h) for h in hist)))
    if args.format == "csv":
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(("client", "n_i", "class_histogram"))
        writer.writerows(rows)
    else:
        print(format_table(("client", "n_i", "class_histogram"), rows))
        print(f"scheme {_partition_label(fc)}, heterogeneity index {heterogeneity_index(plan, target):.4f}, "
              f"draws {plan.attempts}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        plan.save(Path(args.out) / "partition.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--workers", type=int)
        p.add_argument("--format", choices=("table", "csv"), default="table")

    p = sub.add_parser("run", help="calibrate, then federate every listed strategy")
    common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("compare", help="best validation accuracy per round log")
    p.add_argument("logs", nargs="+")
    common(p, needs_config=False)
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("gen-data", help="write the synthetic datasets of a config")
    common(p)
    p.set_defaults(func=cmd_gen_data)
    p = sub.add_parser("calibrate", help="pretrain and select the freezing schedule")
    common(p)
    p.set_defaults(func=cmd_calibrate)
    p = sub.add_parser("partition-inspect", help="show the client partition of a config")
    common(p)
    p.set_defaults(func=cmd_partition_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except FedSQError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Run a configured experiment: one run per (hardware, seed), each writing
its artifacts to its own subdirectory, plus one results CSV for all runs."""

import csv
import json
import math
import time
from dataclasses import astuple, dataclass, fields, replace
from pathlib import Path

import numpy as np

from ..amc import PruneBudget, amc_search
from ..archsearch import SearchConfig, SearchSpace, arch_accuracies, frontier_from_accuracies, search
from ..errors import AutodesignError
from ..haq import BitwidthPolicy, Budget, haq_search
from ..hwmodel import LatencyTable, resolve_hardware, roofline_attainable, simulate_cost, synthesize_latency_table
from ..nncore import SGDConfig, net_macs, train_sgd
from .config import sgd_from
from .data import generate_dataset
from .nets import build_net

RESULTS_SCHEMA_VERSION = 1
RESULTS_HEADER = ["run_id", "pipeline", "hardware", "budget_kind", "budget", "achieved", "accuracy", "wall_s", "seed"]


@dataclass(frozen=True)
class ResultRow:
    run_id: str
    pipeline: str
    hardware: str
    budget_kind: str
    budget: object
    achieved: object
    accuracy: float
    wall_s: object
    seed: int


assert [f.name for f in fields(ResultRow)] == RESULTS_HEADER


class RunError(AutodesignError):
    """A pipeline failed; carries the run id and the original error."""

    def __init__(self, run_id, cause):
        super().__init__(f"run {run_id}: {type(cause).__name__}: {cause}")
        self.run_id = run_id
        self.cause = cause


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_results(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for r in rows:
            w.writerow([_fmt(v) for v in astuple(r)])


def read_results(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != RESULTS_HEADER:
            raise AutodesignError(f"{path}: unexpected results header {reader.fieldnames}")
        return list(reader)


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o).__name__)


# -- pipelines ----------------------------------------------------------------


def _space(section, ds):
    return SearchSpace(section.num_blocks, section.choices, section.channels, ds.image_size, ds.channels, ds.classes)


def _table(section, space, hw, base_dir):
    if section.latency_table:
        p = Path(section.latency_table)
        return LatencyTable.from_csv(p if p.is_absolute() else Path(base_dir) / p)
    return synthesize_latency_table(space, hw)


def cheapest_nonzero_latency(space, table):
    """Latency of the cheapest architecture with at least one non-zero op."""
    lat = table.matrix(space.choices)
    nonzero = [j for j, op in enumerate(space.choices) if op != "zero"]
    if not nonzero:
        return float(lat.min(axis=1).sum())
    base = lat.min(axis=1)
    return float(min(base.sum() - base[b] + lat[b, nonzero].min() for b in range(space.num_blocks)))


def run_search(config, dataset, hw, seed, rdir):
    s = config.search
    space = _space(s, config.dataset)
    table = _table(s, space, hw, config.base_dir)
    lat_ref = s.lat_ref if math.isfinite(s.lat_ref) else s.lat_ref_factor * cheapest_nonzero_latency(space, table)
    cfg = SearchConfig(a=s.a, b=s.b, lat_ref=lat_ref, epochs=s.epochs, seed=seed, batch=s.batch, lr=s.lr,
                       momentum=s.momentum, arch_lr=s.arch_lr, warmup_epochs=s.warmup_epochs,
                       hardware=hw.name, clip_norm=s.clip_norm)
    res = search(space, dataset, table, cfg)
    (rdir / "arch.yaml").write_text(res.arch.dumps())
    table.to_csv(rdir / "latency_table.csv")
    _dump_json(rdir / "log.json", res.log)
    sgd = SGDConfig(lr=s.lr, epochs=s.final_epochs, batch=s.batch, seed=seed, momentum=s.momentum,
                    clip_norm=s.clip_norm)
    acc = train_sgd(space.child_net(res.arch.ops), dataset, sgd).accuracy
    return "latency", lat_ref, table.arch_latency(res.arch.ops), acc


def write_frontier(path, entries):
    rows = sorted(entries, key=lambda e: (e.latency_s, -e.accuracy, e.ops))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["arch", "latency_s", "accuracy", "pareto"])
        for e in rows:
            w.writerow(["|".join(e.ops), repr(float(e.latency_s)), repr(float(e.accuracy)), int(e.pareto)])


def read_frontier(path):
    with open(path, newline="") as f:
        return [{"arch": r["arch"], "latency_s": float(r["latency_s"]), "accuracy": float(r["accuracy"]),
                 "pareto": r["pareto"] == "1"} for r in csv.DictReader(f)]


def run_oracle(config, dataset, hw, seed, rdir, cache):
    o = config.oracle
    space = _space(o, config.dataset)
    table = _table(o, space, hw, config.base_dir)
    if seed not in cache:
        cache[seed] = arch_accuracies(space, dataset, sgd_from(o, seed), cap=o.cap)
    entries = frontier_from_accuracies(cache[seed], table)
    write_frontier(rdir / "frontier.csv", entries)
    table.to_csv(rdir / "latency_table.csv")
    best = max((e for e in entries if e.pareto), key=lambda e: (e.accuracy, -e.latency_s))
    return "", "", best.latency_s, best.accuracy


def run_prune(config, dataset, hw, seed, rdir):
    net = build_net(config.net or {"name": "redundant_chain"}, config.dataset.channels,
                    config.dataset.image_size, config.dataset.classes)
    kind = config.budget.kind
    if kind == "macs":
        full = float(net_macs(net))
    else:
        full = simulate_cost(net, BitwidthPolicy.uniform(net, 8), hw).latency_s
    budget = PruneBudget(kind, config.budget.resolve(full), hw)
    res = amc_search(net, dataset, budget, replace(config.prune, seed=seed))
    (rdir / "policy.yaml").write_text(res.policy.dumps())
    _dump_json(rdir / "log.json", res.log)
    return kind, budget.limit, res.cost, res.accuracy


def roofline_points(net, policy, hw):
    """Per layer: intensity and attained rate under all-8-bit and under `policy`."""
    pre = simulate_cost(net, BitwidthPolicy.uniform(net, 8), hw).per_layer
    post = simulate_cost(net, policy, hw).per_layer
    return [{"layer": a.index, "kind": a.kind,
             "intensity_pre": a.intensity, "attained_pre": roofline_attainable(a.intensity, hw),
             "intensity_post": b.intensity, "attained_post": roofline_attainable(b.intensity, hw)}
            for a, b in zip(pre, post)]


def write_roofline(path, points, run_id=None):
    cols = ["layer", "kind", "intensity_pre", "attained_pre", "intensity_post", "attained_post"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow((["run_id"] if run_id else []) + cols)
        for p in points:
            w.writerow(([run_id] if run_id else []) + [_fmt(p[c]) for c in cols])


def run_quantize(config, dataset, hw, seed, rdir):
    net = build_net(config.net or {"name": "mobile_net"}, config.dataset.channels,
                    config.dataset.image_size, config.dataset.classes)
    kind = config.budget.kind
    full = simulate_cost(net, BitwidthPolicy.uniform(net, 8), hw).value(kind)
    budget = Budget(kind, config.budget.resolve(full))
    res = haq_search(net, dataset, hw, budget, replace(config.quantize, seed=seed))
    (rdir / "policy.yaml").write_text(res.policy.dumps(simulate_cost(net, res.policy, hw)))
    _dump_json(rdir / "log.json", res.log)
    write_roofline(rdir / "roofline.csv", roofline_points(net, res.policy, hw))
    res.agent.save(rdir / "agent.npz")
    return kind, budget.limit, res.cost, res.accuracy


# -- orchestration ------------------------------------------------------------


def run(config, config_text, out_dir):
    """Execute every (hardware, seed) run of `config` and write
    results.csv. Returns the ResultRows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(config_text)
    (out / "manifest.json").write_text(json.dumps({"results_schema": RESULTS_SCHEMA_VERSION}) + "\n")
    dataset = generate_dataset(config.dataset)
    rows = []
    oracle_cache = {}
    for hw_name in config.hardware:
        hw = resolve_hardware(config.hardware_path(hw_name))
        for seed in config.seeds:
            run_id = f"{config.pipeline}-{hw.name}-s{seed}"
            rdir = out / run_id
            rdir.mkdir(exist_ok=True)
            start = time.perf_counter()
            try:
                if config.pipeline == "search":
                    result = run_search(config, dataset, hw, seed, rdir)
                elif config.pipeline == "oracle":
                    result = run_oracle(config, dataset, hw, seed, rdir, oracle_cache)
                elif config.pipeline == "prune":
                    result = run_prune(config, dataset, hw, seed, rdir)
                else:
                    result = run_quantize(config, dataset, hw, seed, rdir)
            except AutodesignError as e:
                raise RunError(run_id, e) from e
            wall = time.perf_counter() - start
            kind, budget, achieved, acc = result
            rows.append(ResultRow(run_id, config.pipeline, hw.name, kind, budget, float(achieved), float(acc),
                                  round(wall, 3) if config.record_wall_time else "", seed))
    write_results(out / "results.csv", rows)
    return rows

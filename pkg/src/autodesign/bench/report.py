"""Summaries of a finished experiment directory. Reads run artifacts and
writes new files only under the report directory."""

import csv
from pathlib import Path

from ..errors import UsageError
from .runner import read_frontier, read_results


def _pareto_flags(points):
    flags = []
    for p in points:
        dominated = any(q["accuracy"] >= p["accuracy"] and q["latency_s"] <= p["latency_s"]
                        and (q["accuracy"] > p["accuracy"] or q["latency_s"] < p["latency_s"]) for q in points)
        flags.append(not dominated)
    return flags


def frontier_points(run_dir, rows):
    """hardware -> accuracy/latency points from oracle frontiers and from
    every latency-budgeted run."""
    by_hw = {}
    for r in rows:
        pts = by_hw.setdefault(r["hardware"], [])
        if r["pipeline"] == "oracle":
            for e in read_frontier(Path(run_dir) / r["run_id"] / "frontier.csv"):
                pts.append({"source": r["run_id"], "arch": e["arch"], "latency_s": e["latency_s"],
                            "accuracy": e["accuracy"]})
        elif r["budget_kind"] == "latency":
            pts.append({"source": r["run_id"], "arch": "", "latency_s": float(r["achieved"]),
                        "accuracy": float(r["accuracy"])})
    return by_hw


def markdown_table(rows):
    cols = ["run_id", "pipeline", "hardware", "budget_kind", "budget", "achieved", "accuracy", "seed"]
    out = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        cells = []
        for c in cols:
            v = r[c]
            if c in ("budget", "achieved", "accuracy") and v not in ("", None):
                v = f"{float(v):.6g}"
            cells.append(str(v))
        out.append("| " + " | ".join(cells) + " |")
    return "\n".join(out) + "\n"


def report(run_dir, out_dir=None):
    """Write frontier_<hw>.csv (ascending latency), summary.md and
    roofline.csv for the experiment in `run_dir`. Returns the output dir."""
    run_dir = Path(run_dir)
    results = run_dir / "results.csv"
    if not results.is_file():
        raise UsageError(f"{run_dir} holds no completed runs (results.csv missing)")
    rows = read_results(results)
    if not rows:
        raise UsageError(f"{results} lists no runs")
    out = Path(out_dir) if out_dir else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)

    for hw, pts in sorted(frontier_points(run_dir, rows).items()):
        if not pts:
            continue
        flags = _pareto_flags(pts)
        order = sorted(range(len(pts)), key=lambda i: (pts[i]["latency_s"], -pts[i]["accuracy"],
                                                       pts[i]["source"], pts[i]["arch"]))
        with open(out / f"frontier_{hw}.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["source", "arch", "latency_s", "accuracy", "pareto"])
            for i in order:
                p = pts[i]
                w.writerow([p["source"], p["arch"], repr(p["latency_s"]), repr(p["accuracy"]), int(flags[i])])

    (out / "summary.md").write_text("# Results\n\n" + markdown_table(rows))

    roof = [(r["run_id"], run_dir / r["run_id"] / "roofline.csv") for r in rows if r["pipeline"] == "quantize"]
    roof = [(rid, p) for rid, p in roof if p.is_file()]
    if roof:
        with open(out / "roofline.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            header_written = False
            for rid, p in roof:
                with open(p, newline="") as src:
                    reader = csv.reader(src)
                    header = next(reader)
                    if not header_written:
                        w.writerow(["run_id"] + header)
                        header_written = True
                    for line in reader:
                        w.writerow([rid] + line)
    return out

"""Summary tables and SVG plots rendered from run directories.

A training run holds ``metrics.jsonl`` (and usually ``config.txt`` and
``summary.json``); a GMM run holds ``metrics.tsv``.  Rendering reads only
those files, so re-running a report over the same directories reproduces
the same bytes.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Sequence

from trapolab.config import ExperimentConfig
from trapolab.errors import MissingMetrics
from trapolab.plotting import line_plot
from trapolab.trainer import MetricsRecord


def _nonempty(path: Path) -> bool:
    return path.is_file() and path.read_text().strip() != ""


def load_train_run(run: Path) -> dict:
    recs = [MetricsRecord.from_json(line) for line in (run / "metrics.jsonl").read_text().splitlines() if line]
    summary = json.loads((run / "summary.json").read_text()) if (run / "summary.json").is_file() else {}
    vocab = summary.get("vocab_size")
    if vocab is None and (run / "config.txt").is_file():
        vocab = ExperimentConfig.load(run / "config.txt").family().vocab().size
    return {"kind": "train", "name": run.name, "records": recs, "summary": summary, "vocab_size": vocab}


def load_gmm_run(run: Path) -> dict:
    lines = (run / "metrics.tsv").read_text().splitlines()
    rows = [line.split("\t") for line in lines[1:] if line]
    if not rows:
        raise MissingMetrics(f"no metric rows in {run / 'metrics.tsv'}")
    steps = [int(r[0]) for r in rows]
    kl = [float(r[1]) for r in rows]
    vm = [float(r[2]) for r in rows]
    return {"kind": "gmm", "name": run.name, "steps": steps, "kl": kl, "void_mass": vm}


def load_run(run: Path) -> dict:
    if _nonempty(run / "metrics.jsonl"):
        return load_train_run(run)
    if _nonempty(run / "metrics.tsv"):
        return load_gmm_run(run)
    raise MissingMetrics(f"no metrics found in {run}")


def _g(x) -> str:
    return "-" if x is None else f"{x:.6g}"


def _last(values):
    vals = [v for v in values if v is not None]
    return vals[-1] if vals else None


def render_report(runs: Sequence[Path], out: Path, size=(6.4, 4.0)) -> list:
    data = [load_run(Path(r)) for r in runs]
    out.mkdir(parents=True, exist_ok=True)
    written = []
    train = [d for d in data if d["kind"] == "train"]
    gmm = [d for d in data if d["kind"] == "gmm"]

    if train:
        rows = ["run\tregime\tseed\trecords\tlast_reward\tlast_entropy\tfinal_unguided_reward"]
        for d in train:
            s, recs = d["summary"], d["records"]
            rows.append("\t".join([d["name"], str(s.get("regime", "-")), str(s.get("seed", "-")), str(len(recs)),
                                   _g(_last(r.reward for r in recs)), _g(_last(r.entropy for r in recs)),
                                   _g(s.get("final_unguided_reward"))]))
        written.append(_write(out / "train_summary.tsv", "\n".join(rows) + "\n"))
        for field, ylabel in (("reward", "mean unguided reward"), ("length", "mean unguided length"),
                              ("entropy", "mean entropy (nats)"), ("guided_fraction", "guided fraction")):
            series = [(d["name"], [r.step for r in d["records"]], [getattr(r, field) for r in d["records"]])
                      for d in train]
            hlines = []
            if field == "entropy":
                hlines = [(math.log(d["vocab_size"]), f"log|V| = log {d['vocab_size']} ({d['name']})")
                          for d in train if d["vocab_size"]]
            path = out / f"{field}.svg"
            line_plot(path, series, ylabel=ylabel, title=ylabel, hlines=hlines, size=size)
            written.append(path)

    if gmm:
        rows = ["run\tsteps\tkl_first\tkl_last\tvoid_initial\tvoid_peak\tvoid_peak_step\tvoid_final"]
        for d in gmm:
            vm = d["void_mass"]
            peak = max(range(len(vm)), key=vm.__getitem__)
            rows.append("\t".join([d["name"], str(d["steps"][-1]), _g(d["kl"][0]), _g(d["kl"][-1]),
                                   _g(vm[0]), _g(vm[peak]), str(d["steps"][peak]), _g(vm[-1])]))
        written.append(_write(out / "gmm_summary.tsv", "\n".join(rows) + "\n"))
        for field, ylabel in (("kl", "forward KL estimate"), ("void_mass", "void-region mass")):
            path = out / f"{field}.svg"
            line_plot(path, [(d["name"], d["steps"], d[field]) for d in gmm], ylabel=ylabel, title=ylabel, size=size)
            written.append(path)
    return written


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path

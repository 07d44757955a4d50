"""Plot-ready reports derived from a finished run directory.

Files are written as ``<run-id>.<report>.{csv,json}`` under ``<run>/reports``.
CSV files start with one ``# schema: <name>/<version>`` comment line (read
them with ``pandas.read_csv(path, comment="#")``).  Schemas:

``events/1``   step, tied, untied                       one row per record
``hist/1``     layer, trainable_steps                   one row per layer
``map/1``      {"state", "edges": [[i, s_i], ...], "self_loops"}
``corr/1``     {"layers", "matrix", "flatten_order"}
``summary/1``  the run summary plus the final replication map

Plotting recipe: events as two line series against ``step``; hist as a bar
chart over ``layer``; corr as a heatmap with ``layers`` on both axes.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .model import ParameterStore, load_checkpoint
from .tying import validate_state

REPORT_KINDS = ("map", "events", "hist", "corr", "summary")
FFN_FLATTEN_ORDER = ("ffn.up.weight", "ffn.down.weight")


class ReportError(ValueError):
    pass


def _field(rec: Any, name: str):
    return rec[name] if isinstance(rec, Mapping) else getattr(rec, name)


def replication_map(state: Sequence[int]) -> list[tuple[int, int]]:
    s = validate_state(state)
    return [(i, rep) for i, rep in enumerate(s)]


def event_curves(trajectory: Sequence[Any]) -> dict[str, list[int]]:
    if not trajectory:
        raise ReportError("trajectory is empty")
    return {
        "step": [int(_field(r, "step")) for r in trajectory],
        "tied": [int(_field(r, "tied_count")) for r in trajectory],
        "untied": [int(_field(r, "untied_count")) for r in trajectory],
    }


def trainability_histogram(trajectory: Sequence[Any], period: int) -> list[int]:
    """Per layer, the number of steps spent as a group representative."""
    if not trajectory:
        raise ReportError("trajectory is empty")
    L = len(_field(trajectory[0], "s"))
    hist = [0] * L
    for r in trajectory:
        for i, rep in enumerate(_field(r, "s")):
            if rep == i:
                hist[i] += period
    return hist


def ffn_correlation(source: ParameterStore | str | Path) -> tuple[list[int], np.ndarray]:
    """Pearson correlation between the FFN weights of the independent layers.

    Each layer's vector is its up-projection weight followed by its
    down-projection weight, both flattened row-major; biases are excluded.
    """
    store = source if isinstance(source, ParameterStore) else load_checkpoint(source)[0]
    groups = store.group_params
    layers = sorted(groups)
    if len(layers) < 2:
        raise ReportError(f"need at least 2 independent layers, found {len(layers)}")
    vecs = np.stack([
        np.concatenate([groups[i].tensors[n].detach().double().numpy().ravel()
                        for n in FFN_FLATTEN_ORDER])
        for i in layers
    ])
    m = np.corrcoef(vecs)
    m = np.clip((m + m.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(m, 1.0)
    return layers, m


def _csv_text(schema: str, header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {schema}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _json_text(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _read_run(run_dir: Path) -> tuple[list[dict], dict, dict]:
    traj_path = run_dir / "trajectory.jsonl"
    cfg_path = run_dir / "config.json"
    summary_path = run_dir / "summary.json"
    for p in (traj_path, cfg_path, summary_path):
        if not p.is_file():
            raise ReportError(f"missing run file: {p}")
    trajectory = [json.loads(x) for x in traj_path.read_text().splitlines() if x.strip()]
    return trajectory, json.loads(cfg_path.read_text()), json.loads(summary_path.read_text())


def build_reports(run_dir: str | Path, which: str = "all") -> dict[str, str]:
    """Return ``{filename: contents}`` for the requested reports."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReportError(f"run directory not found: {run_dir}")
    kinds = REPORT_KINDS if which == "all" else (which,)
    if any(k not in REPORT_KINDS for k in kinds):
        raise ReportError(f"unknown report {which!r}; choose from {REPORT_KINDS + ('all',)}")
    trajectory, cfg, summary = _read_run(run_dir)
    run_id = run_dir.name
    final_state = summary["final_state"]
    out: dict[str, str] = {}

    for kind in kinds:
        if kind == "map":
            edges = replication_map(final_state)
            out[f"{run_id}.map.json"] = _json_text({
                "schema": "map/1", "state": final_state, "edges": edges,
                "self_loops": sum(1 for i, j in edges if i == j),
            })
        elif kind == "events":
            if not trajectory:
                raise ReportError("events report needs a non-empty trajectory")
            c = event_curves(trajectory)
            out[f"{run_id}.events.csv"] = _csv_text(
                "events/1", ("step", "tied", "untied"), zip(c["step"], c["tied"], c["untied"]))
        elif kind == "hist":
            if not trajectory:
                raise ReportError("hist report needs a non-empty trajectory")
            h = trainability_histogram(trajectory, cfg["trainer"]["controller_period"])
            out[f"{run_id}.hist.csv"] = _csv_text(
                "hist/1", ("layer", "trainable_steps"), enumerate(h))
        elif kind == "corr":
            ckpt = run_dir / "checkpoints" / "final.json"
            if not ckpt.is_file():
                raise ReportError(f"missing checkpoint: {ckpt}")
            try:
                layers, m = ffn_correlation(ckpt)
                body = {"schema": "corr/1", "layers": layers, "matrix": m.tolist(),
                        "flatten_order": list(FFN_FLATTEN_ORDER)}
            except ReportError as exc:
                if which != "all":
                    raise
                body = {"schema": "corr/1", "layers": [], "matrix": None,
                        "flatten_order": list(FFN_FLATTEN_ORDER), "note": str(exc)}
            out[f"{run_id}.corr.json"] = _json_text(body)
        elif kind == "summary":
            body = dict(summary)
            body.pop("wall_time", None)
            body["schema"] = "summary/1"
            body["replication_map"] = replication_map(final_state)
            out[f"{run_id}.summary.json"] = _json_text(body)
    return out


def write_reports(run_dir: str | Path, which: str = "all") -> list[Path]:
    run_dir = Path(run_dir)
    files = build_reports(run_dir, which)
    dest = run_dir / "reports"
    dest.mkdir(exist_ok=True)
    paths = []
    for name, text in files.items():
        p = dest / name
        p.write_text(text)
        paths.append(p)
    return paths

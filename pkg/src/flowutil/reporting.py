"""Report files, run manifests and static plots."""

from __future__ import annotations

import csv
import datetime as _dt
import json
import platform
from pathlib import Path

import numpy as np

from .verifier import CSV_FIELDS, TestReport

REPORT_CSV = "reports.csv"
MANIFEST = "manifest.json"
FAILED_MARKER = "FAILED"


def versions() -> dict:
    from . import __version__

    return {"flowutil": __version__, "numpy": np.__version__, "python": platform.python_version()}


def emit_report(reports: list[TestReport], out_dir, formats=("json", "csv"), config_hash: str | None = None) -> list[Path]:
    """One JSON per suite and a combined CSV with a ``suite`` column.

    Files carry the config hash and package version; nothing time-dependent
    is written here so identical runs give byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if not reports:
        return written
    ver = versions()["flowutil"]
    if "json" in formats:
        for r in reports:
            doc = r.to_dict()
            doc["config_hash"] = config_hash
            doc["version"] = ver
            path = out / f"{r.suite}.json"
            path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_default) + "\n")
            written.append(path)
    if "csv" in formats:
        path = out / REPORT_CSV
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_FIELDS + ["config_hash", "version"], lineterminator="\n")
            w.writeheader()
            for r in reports:
                for row in r.csv_rows():
                    w.writerow(dict(row, config_hash=config_hash, version=ver))
        written.append(path)
    return written


def write_manifest(out_dir, config, reports: list[TestReport], status: int, error: str | None = None) -> Path:
    manifest = {
        "config_hash": config.config_hash,
        "config_name": config.name,
        "seed": config.seed,
        "n_paths": config.paths,
        "versions": versions(),
        "suites": {r.suite: r.verdict for r in reports},
        "failing_cases": {r.suite: [c.name for c in r.failures()] for r in reports if not r.passed},
        "exit_status": status,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    if error:
        manifest["error"] = error
    path = Path(out_dir) / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def write_failed_marker(out_dir, message: str) -> Path:
    path = Path(out_dir) / FAILED_MARKER
    path.write_text(message.rstrip() + "\n")
    return path


class ArtifactMismatchError(ValueError):
    module = "cli_reporting"


def load_reports(dirs) -> list[dict]:
    """Load suite JSON files from artifact directories; reject mixed configs or versions."""
    docs = []
    for d in dirs:
        for path in sorted(Path(d).glob("*.json")):
            if path.name == MANIFEST:
                continue
            doc = json.loads(path.read_text())
            if "suite" in doc and "cases" in doc:
                doc["_path"] = str(path)
                docs.append(doc)
    hashes = {doc.get("config_hash") for doc in docs}
    vers = {doc.get("version") for doc in docs}
    if len(hashes) > 1:
        raise ArtifactMismatchError(f"artifacts come from different configs: {sorted(map(str, hashes))}")
    if len(vers) > 1:
        raise ArtifactMismatchError(f"artifacts come from different package versions: {sorted(map(str, vers))}")
    return docs


def _default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


# plots


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_field_fan(field_, path, n_paths: int = 20) -> Path:
    """U(T, .) across paths against the initial utility U(0, .)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    g = field_.x_grid
    for p in range(min(n_paths, field_.n_paths)):
        ax.plot(g, field_.U_values[p, -1], color="tab:blue", alpha=0.3, lw=0.8)
    ax.plot(g, field_.U_values[0, 0], color="black", lw=1.5, label="U(0, x)")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("capital x")
    ax.set_ylabel(f"U(t={field_.times[-1]:g}, x)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_conjugate_overlay(field_, flow, dual, path, path_index: int = 0) -> Path:
    from .pipeline import conjugate_lattice
    from .utility import conjugate_via_flow, fenchel_conjugate

    plt = _pyplot()
    tpos = field_.n_times - 1
    t = float(field_.times[tpos])
    ys = conjugate_lattice(field_, dual, flow, path_index, tpos, 40)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ys, fenchel_conjugate(field_, t, ys, path_index), lw=2, label="max_x U - xy")
    ax.plot(ys, conjugate_via_flow(flow, dual, t, ys, path_index), "--", lw=1.5, label="flow integral")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("y")
    ax.set_ylabel(f"conjugate at t={t:g}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_darboux(flow, dual, path, x: float = 1.0, ns=(4, 16, 64, 256, 1024), n_paths: int = 200) -> Path:
    from .duality import darboux_bracket

    plt = _pyplot()
    paths = np.arange(min(n_paths, flow.n_paths))
    t = float(flow.times[-1])
    gaps = []
    for n in ns:
        s_left, s_right = darboux_bracket(flow, dual, x, n, paths, t)
        gaps.append(float(np.mean(s_left - s_right)))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog(ns, gaps, "o-")
    ax.set_xlabel("cells N")
    ax.set_ylabel("mean bracket gap")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def emit_plots(exp, out_dir) -> list[Path]:
    out = Path(out_dir) / "plots"
    out.mkdir(parents=True, exist_ok=True)
    return [
        plot_field_fan(exp.field, out / "utility_fan.png"),
        plot_conjugate_overlay(exp.field, exp.flow, exp.dual, out / "conjugate_overlay.png"),
        plot_darboux(exp.flow, exp.dual, out / "darboux_gap.png"),
    ]

"""Report bundles and their on-disk form.

Every CSV starts with a ``# manifest_sha256=<hex>`` comment line followed by
the header row. Floats are written with ``repr`` so identical runs give
identical bytes.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np


class ReportError(OSError):
    pass


@dataclass
class Table:
    header: list
    rows: list = field(default_factory=list)

    def add(self, *row) -> None:
        if len(row) != len(self.header):
            raise ValueError(f"row has {len(row)} cells, header has {len(self.header)}")
        self.rows.append(list(row))


@dataclass
class ReportBundle:
    tables: dict = field(default_factory=dict)  # file stem -> Table
    documents: dict = field(default_factory=dict)  # file stem -> JSON-able object
    manifest: dict = field(default_factory=dict)

    def table(self, name: str, header) -> Table:
        t = self.tables[name] = Table(list(header))
        return t


def _cell(x: Any) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if x != x:
            return "nan"
        return repr(x)
    if x is None:
        return ""
    return str(x)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return None if x != x else x
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def versions() -> dict:
    from .. import __version__

    return {"dcdkit": __version__, "numpy": np.__version__, "python": platform.python_version()}


def make_manifest(config_hash: str, seeds: dict, config: dict, extra: Optional[dict] = None) -> dict:
    m = {"config_hash": config_hash, "seeds": dict(seeds), "config": config, "versions": versions()}
    if extra:
        m.update(extra)
    return _jsonable(m)


def manifest_hash(manifest: dict) -> str:
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def render_csv(table: Table, mhash: str) -> str:
    buf = io.StringIO()
    buf.write(f"# manifest_sha256={mhash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.header)
    for row in table.rows:
        w.writerow([_cell(c) for c in row])
    return buf.getvalue()


def report_emit(bundle: ReportBundle, outdir) -> list:
    """Write every table and document plus ``manifest.json``; return the paths."""
    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create output directory {outdir}: {exc}") from exc
    mhash = manifest_hash(bundle.manifest)
    written = []

    def put(name: str, text: str):
        path = outdir / name
        try:
            path.write_text(text)
        except OSError as exc:
            raise ReportError(f"failed writing {path}: {exc}") from exc
        written.append(path)

    put("manifest.json", json.dumps({**bundle.manifest, "manifest_sha256": mhash}, indent=1, sort_keys=True) + "\n")
    for name in sorted(bundle.tables):
        put(f"{name}.csv", render_csv(bundle.tables[name], mhash))
    for name in sorted(bundle.documents):
        doc = {"manifest_sha256": mhash, **_jsonable(bundle.documents[name])}
        put(f"{name}.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return written


def read_csv(path) -> tuple[str, list, list]:
    """Return (manifest hash, header, rows) of a report CSV."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# manifest_sha256="):
        raise ReportError(f"{path}: missing manifest line")
    mhash = lines[0].split("=", 1)[1]
    rows = list(csv.reader(lines[1:]))
    return mhash, rows[0], rows[1:]

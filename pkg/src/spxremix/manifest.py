"""JSON-lines utterance manifests shared by corpus generation, training and evaluation.

One object per line. Required keys: ``id``, ``mixture_path``, ``target_path``,
``enrolment_path``. Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import FormatError

REQUIRED_FIELDS = ("id", "mixture_path", "target_path", "enrolment_path")


@dataclass
class ManifestEntry:
    id: str
    mixture_path: Path
    target_path: Path | None
    enrolment_path: Path
    extra: dict = field(default_factory=dict)


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    base = path.parent
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            missing = [k for k in REQUIRED_FIELDS if k not in rec]
            if missing:
                raise FormatError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            extra = {k: v for k, v in rec.items() if k not in REQUIRED_FIELDS}
            entries.append(ManifestEntry(
                id=str(rec["id"]),
                mixture_path=base / rec["mixture_path"],
                target_path=None if rec["target_path"] is None else base / rec["target_path"],
                enrolment_path=base / rec["enrolment_path"],
                extra=extra,
            ))
    return entries


def write_manifest(records: list[dict], path) -> None:
    """Write records as sorted-key JSON lines (byte-stable for identical input)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    tmp.replace(path)

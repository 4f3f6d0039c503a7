"""Content-hash manifests that chain pipeline artifacts to their inputs.

Every command writes a ``manifest.json`` next to its outputs recording
the sha256 of everything it read and wrote.  A downstream command
re-hashes the files it consumes and refuses to run when anything
drifted, so no stage can silently build on stale or corrupted
artifacts.  Manifests carry no timestamps, and paths are stored
relative to the manifest itself: identical inputs, config and seed
produce byte-identical manifests, and a whole run tree can be copied
or moved without invalidating anything.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path, PurePath

from . import __version__

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "noiselur-manifest"
MANIFEST_VERSION = 1

_CHUNK = 1 << 20


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            block = fh.read(_CHUNK)
            if not block:
                break
            h.update(block)
    return h.hexdigest()


def digest_of(obj):
    """sha256 of an object's canonical JSON form."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      allow_nan=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def hash_files(paths):
    """{name: {path, sha256}} for a {name: path} mapping."""
    out = {}
    for name in sorted(paths):
        p = Path(paths[name])
        if not p.is_file():
            raise ValueError(f"input {name!r} not found at {p}")
        out[name] = {"path": str(p), "sha256": file_sha256(p)}
    return out


def _relative_to(path, base):
    rel = os.path.relpath(os.path.abspath(os.fspath(path)), base)
    return PurePath(rel).as_posix()


def write_manifest(out_dir, *, command, seed, config_digest, inputs,
                   output_paths, extra=None):
    """Hash the outputs and write the manifest; returns its path.

    ``inputs`` comes from hash_files (computed before the command ran);
    ``output_paths`` maps artifact names to the files just written.
    """
    out_dir = Path(out_dir)
    base = os.path.abspath(out_dir)
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "command": command,
        "toolkit_version": __version__,
        "seed": None if seed is None else int(seed),
        "config_sha256": config_digest,
        "inputs": {name: {"path": _relative_to(entry["path"], base),
                          "sha256": entry["sha256"]}
                   for name, entry in sorted(inputs.items())},
        "outputs": {name: {"path": _relative_to(p, base),
                           "sha256": file_sha256(p)}
                    for name, p in sorted(output_paths.items())},
    }
    if extra:
        doc["extra"] = extra
    path = out_dir / MANIFEST_NAME
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")
    return path


def load_manifest(dir_or_path):
    p = Path(dir_or_path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    if not p.is_file():
        raise ValueError(f"no manifest at {p}; run the upstream command "
                         "first")
    with open(p, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{p} is not a manifest")
    # resolve the stored relative paths against the manifest location
    base = os.path.abspath(p.parent)
    for table in (doc.get("inputs", {}), doc.get("outputs", {})):
        for entry in table.values():
            entry["path"] = os.path.normpath(
                os.path.join(base, entry["path"]))
    return doc


def check_upstream(manifest, *, what="artifact"):
    """Re-hash every file an upstream manifest recorded.

    Raises when an upstream output was corrupted or when the inputs the
    upstream command consumed changed after it ran (stale artifact).
    """
    cmd = manifest.get("command", "?")
    for role, table in (("input", manifest.get("inputs", {})),
                        ("output", manifest.get("outputs", {}))):
        for name, entry in table.items():
            p = Path(entry["path"])
            if not p.is_file():
                raise ValueError(
                    f"stale {what}: {role} {name!r} of '{cmd}' is missing "
                    f"at {p}; re-run '{cmd}'")
            got = file_sha256(p)
            if got != entry["sha256"]:
                raise ValueError(
                    f"stale {what}: {role} {name!r} of '{cmd}' has hash "
                    f"{got[:12]}… but the manifest recorded "
                    f"{entry['sha256'][:12]}…; re-run '{cmd}'")


def output_path(manifest, name):
    try:
        return Path(manifest["outputs"][name]["path"])
    except KeyError:
        cmd = manifest.get("command", "?")
        raise ValueError(f"manifest of '{cmd}' lists no output {name!r}")

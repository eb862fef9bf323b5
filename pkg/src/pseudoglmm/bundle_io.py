"""Versioned JSON wire format for summary bundles and bundle directories.

Serialization is canonical: sorted keys, compact separators, shortest
round-trip float repr, moments in enumeration order.  Parsing validates
every bundle invariant and names the offending field on failure.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from pseudoglmm.errors import BundleValidationError, IncompatibleProvidersError, InvalidInputError
from pseudoglmm.moments import KINDS, SUPPORTED_ORDERS, SummaryBundle, VariableMeta, enumerate_moment_spec

SCHEMA_VERSION = 1
BUNDLE_SUFFIX = ".bundle.json"
MANIFEST = "manifest.json"
PSD_FLOOR = -1e-8
BINARY_VARIANCE_TOL = 1e-12


def bundle_to_dict(bundle: SummaryBundle) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "cluster_id": bundle.cluster_id,
        "n": bundle.n,
        "max_order": bundle.max_order,
        "response_mean": bundle.response_mean,
        "variables": [_variable_to_dict(v) for v in bundle.variables],
        "moments": [{"index": list(r), "value": bundle.moments[r]} for r in bundle.spec.indices],
    }


def _variable_to_dict(v: VariableMeta) -> dict:
    out = {"name": v.name, "kind": v.kind, "standardized": v.standardized, "center": v.center, "scale": v.scale}
    if v.level is not None:
        out["level"] = v.level
        out["parent"] = v.parent
    return out


def dumps_bundle(bundle: SummaryBundle) -> str:
    return json.dumps(bundle_to_dict(bundle), sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def validate_bundle(raw: bytes | str) -> SummaryBundle:
    """Parse and check a serialized bundle; raise :class:`BundleValidationError` on any defect."""
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise BundleValidationError("<document>", f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise BundleValidationError("<document>", "expected a JSON object")
    return bundle_from_dict(doc)


def _require(doc: dict, key: str, types, where: str = ""):
    field = f"{where}{key}"
    if key not in doc:
        raise BundleValidationError(field, "missing")
    value = doc[key]
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise BundleValidationError(field, f"expected {types}, got bool")
    if not isinstance(value, types):
        raise BundleValidationError(field, f"expected {types}, got {type(value).__name__}")
    return value


def _finite(value, field: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise BundleValidationError(field, f"expected a finite number, got {value!r}")
    return float(value)


def bundle_from_dict(doc: dict) -> SummaryBundle:
    version = _require(doc, "schema_version", int)
    if version != SCHEMA_VERSION:
        raise BundleValidationError("schema_version", f"unsupported version {version}; expected {SCHEMA_VERSION}")
    cluster_id = _require(doc, "cluster_id", str)
    n = _require(doc, "n", int)
    if n < 1:
        raise BundleValidationError("n", f"must be positive, got {n}")
    max_order = _require(doc, "max_order", int)
    if max_order not in SUPPORTED_ORDERS:
        raise BundleValidationError("max_order", f"must be one of {SUPPORTED_ORDERS}, got {max_order}")
    response_mean = _finite(_require(doc, "response_mean", (int, float)), "response_mean")
    if not 0.0 <= response_mean <= 1.0:
        raise BundleValidationError("response_mean", f"{response_mean} is outside [0, 1]")

    raw_vars = _require(doc, "variables", list)
    variables = []
    for i, rv in enumerate(raw_vars):
        where = f"variables[{i}]."
        if not isinstance(rv, dict):
            raise BundleValidationError(f"variables[{i}]", "expected an object")
        kind = _require(rv, "kind", str, where)
        if kind not in KINDS:
            raise BundleValidationError(f"{where}kind", f"unknown kind {kind!r}")
        try:
            variables.append(VariableMeta(
                name=_require(rv, "name", str, where), kind=kind,
                standardized=_require(rv, "standardized", bool, where),
                center=_finite(_require(rv, "center", (int, float), where), f"{where}center"),
                scale=_finite(_require(rv, "scale", (int, float), where), f"{where}scale"),
                level=rv.get("level"), parent=rv.get("parent"),
            ))
        except InvalidInputError as exc:
            if isinstance(exc, BundleValidationError):
                raise
            raise BundleValidationError(f"variables[{i}]", str(exc)) from exc
    try:
        spec = enumerate_moment_spec(variables, max_order)
    except InvalidInputError as exc:
        raise BundleValidationError("variables", str(exc)) from exc

    raw_moments = _require(doc, "moments", list)
    width = len(variables)
    moments = {}
    for i, entry in enumerate(raw_moments):
        where = f"moments[{i}]"
        if not isinstance(entry, dict):
            raise BundleValidationError(where, "expected an object")
        index = _require(entry, "index", list, where + ".")
        if len(index) != width or not all(isinstance(e, int) and not isinstance(e, bool) and e >= 0 for e in index):
            raise BundleValidationError(f"{where}.index", f"expected {width} non-negative integers, got {index}")
        key = tuple(index)
        if key in moments:
            raise BundleValidationError(f"{where}.index", f"duplicate multi-index {list(key)}")
        if key not in spec:
            raise BundleValidationError(f"{where}.index", f"multi-index {list(key)} is not a target for max_order {max_order}")
        moments[key] = _finite(entry.get("value"), f"{where}.value")
    missing = [r for r in spec.indices if r not in moments]
    if missing:
        raise BundleValidationError("moments", f"missing multi-index {list(missing[0])}"
                                    + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))

    bundle = SummaryBundle(cluster_id, n, tuple(variables), max_order, moments, response_mean)
    _check_moment_consistency(bundle)
    return bundle


def _check_moment_consistency(bundle: SummaryBundle) -> None:
    if abs(bundle.mean(0) - bundle.response_mean) > 1e-12:
        raise BundleValidationError("response_mean", "disagrees with the response's order-1 moment")
    for pos, v in enumerate(bundle.variables):
        var = bundle.variance(pos)
        label = [0] * len(bundle.variables)
        label[pos] = 2
        if var < 0:
            raise BundleValidationError(f"moments{label}", f"negative variance {var} for {v.name}")
        if v.is_binary:
            q = bundle.mean(pos)
            if not -1e-12 <= q <= 1 + 1e-12:
                raise BundleValidationError(f"moments{label}", f"{v.name} is {v.kind} but has mean {q}")
            if abs(var - q * (1 - q)) > BINARY_VARIANCE_TOL:
                raise BundleValidationError(f"moments{label}", f"{v.name} is {v.kind} but variance {var} != q(1-q)")
    S = bundle.second_order_matrix()
    smallest = float(np.linalg.eigvalsh(S).min())
    if smallest < PSD_FLOOR:
        raise BundleValidationError("moments", f"order-2 moment matrix is not positive semidefinite "
                                    f"(smallest eigenvalue {smallest:.3g})")


@dataclass(frozen=True)
class BundleSet:
    schema_version: int
    bundles: tuple[SummaryBundle, ...]
    variable_signature: tuple[tuple[str, str], ...]
    max_order: int

    def __len__(self) -> int:
        return len(self.bundles)

    def __iter__(self):
        return iter(self.bundles)


def merge_bundles(bundles: Iterable[SummaryBundle]) -> BundleSet:
    bundles = tuple(bundles)
    if not bundles:
        raise InvalidInputError("no bundles to merge")
    first = bundles[0]
    seen = set()
    for b in bundles:
        if b.cluster_id in seen:
            raise IncompatibleProvidersError(f"duplicate cluster_id {b.cluster_id!r}")
        seen.add(b.cluster_id)
        if b.max_order != first.max_order:
            raise IncompatibleProvidersError(
                f"cluster {b.cluster_id!r} has max_order {b.max_order}, expected {first.max_order}")
        if b.signature != first.signature:
            for k, (mine, ref) in enumerate(zip(b.signature, first.signature)):
                if mine != ref:
                    raise IncompatibleProvidersError(
                        f"cluster {b.cluster_id!r}: variable {k} is {mine[0]!r} ({mine[1]}), "
                        f"expected {ref[0]!r} ({ref[1]})")
            raise IncompatibleProvidersError(
                f"cluster {b.cluster_id!r} has {len(b.signature)} variables, expected {len(first.signature)}")
    return BundleSet(SCHEMA_VERSION, bundles, first.signature, first.max_order)


def _safe_name(cluster_id: str) -> str:
    keep = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in cluster_id)
    digest = hashlib.sha256(cluster_id.encode("utf-8")).hexdigest()[:8]
    return f"{keep}-{digest}{BUNDLE_SUFFIX}"


def write_bundle_set(directory, bundle_set: BundleSet | Sequence[SummaryBundle]) -> Path:
    """Write one file per cluster plus ``manifest.json``; returns the manifest path."""
    if not isinstance(bundle_set, BundleSet):
        bundle_set = merge_bundles(bundle_set)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for b in bundle_set.bundles:
        text = dumps_bundle(b)
        name = _safe_name(b.cluster_id)
        (directory / name).write_text(text, encoding="utf-8")
        files.append({"cluster_id": b.cluster_id, "file": name, "n": b.n,
                      "sha256": hashlib.sha256(text.encode("utf-8")).hexdigest()})
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "max_order": bundle_set.max_order,
        "signature": [{"name": nm, "kind": kind} for nm, kind in bundle_set.variable_signature],
        "bundles": files,
    }
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def read_bundle_set(directory) -> BundleSet:
    """Load a bundle directory, checking manifest hashes when a manifest exists."""
    directory = Path(directory)
    if not directory.is_dir():
        raise InvalidInputError(f"{directory} is not a directory")
    manifest_path = directory / MANIFEST
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        entries = manifest.get("bundles", [])
        bundles = []
        for entry in entries:
            raw = (directory / entry["file"]).read_bytes()
            if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
                raise BundleValidationError(entry["file"], "content does not match the manifest hash")
            bundles.append(_validate_file(entry["file"], raw))
    else:
        bundles = [_validate_file(p.name, p.read_bytes()) for p in sorted(directory.glob("*" + BUNDLE_SUFFIX))]
    if not bundles:
        raise InvalidInputError(f"no bundles found in {directory}")
    return merge_bundles(bundles)


def _validate_file(name: str, raw: bytes) -> SummaryBundle:
    try:
        return validate_bundle(raw)
    except BundleValidationError as exc:
        raise BundleValidationError(f"{name}:{exc.field}", str(exc).split(": ", 1)[-1]) from exc

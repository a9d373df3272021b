"""Model bundle serialization.

A bundle is a directory: manifest.json plus one flat binary file per model.
Every model file is a single canonical-JSON header line describing named
arrays, followed by their float64 little-endian payloads in order. Nothing
time- or path-dependent is written, so a fixed training run serializes to
byte-identical directories, and the manifest carries content hashes and a
roster hash that loaders must verify.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from ..jsonl import dumps_canonical
from .forest import RandomForestModel, Tree
from .mlp import MLPModel
from .pairs import PairClassifier
from .ridge import RidgeRegressor

FORMAT_VERSION = 1
MODE_GLOBAL = "global"
MODE_PER_CATEGORY = "per_category"

_SLUG_RE = re.compile(r"[^a-z0-9]+")


class BundleError(Exception):
    """A bundle could not be written or loaded intact."""


def roster_hash(roster: tuple[str, ...] | list[str]) -> str:
    return hashlib.sha256(dumps_canonical(list(roster)).encode("utf-8")).hexdigest()


def _slug(name: str) -> str:
    return _SLUG_RE.sub("_", name.lower()).strip("_") or "x"


def _encode_arrays(meta: dict[str, Any], arrays: list[tuple[str, np.ndarray]]) -> bytes:
    header = {
        "arrays": [
            {"name": name, "shape": list(arr.shape)} for name, arr in arrays
        ],
        "meta": meta,
    }
    blob = bytearray(dumps_canonical(header).encode("utf-8"))
    blob.extend(b"\n")
    for _, arr in arrays:
        blob.extend(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return bytes(blob)


def _decode_arrays(blob: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    newline = blob.find(b"\n")
    if newline < 0:
        raise BundleError("model file has no header line")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleError("model file header is not valid JSON") from exc
    offset = newline + 1
    arrays: dict[str, np.ndarray] = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"], dtype=np.int64)) if spec["shape"] else 1
        nbytes = count * 8
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise BundleError(f"model file truncated in array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(spec["shape"]).copy()
        offset += nbytes
    if offset != len(blob):
        raise BundleError("model file has trailing bytes")
    return header["meta"], arrays


def _encode_model(model: Any) -> bytes:
    if isinstance(model, RidgeRegressor):
        meta = {
            "kind": "ridge",
            "roster": list(model.roster),
            "input_dim": model.input_dim,
            "config": model.config,
        }
        return _encode_arrays(meta, [("weights", model.weights), ("intercept", model.intercept)])
    if isinstance(model, RandomForestModel):
        meta = {
            "kind": "random_forest",
            "task": model.task,
            "roster": list(model.roster),
            "classes": list(model.classes) if model.classes is not None else None,
            "input_dim": model.input_dim,
            "config": model.config,
            "n_trees": len(model.trees),
        }
        arrays: list[tuple[str, np.ndarray]] = []
        for t, tree in enumerate(model.trees):
            arrays.append((f"tree{t}/feature", np.asarray(tree.feature, dtype=np.float64)))
            arrays.append((f"tree{t}/threshold", np.asarray(tree.threshold, dtype=np.float64)))
            arrays.append((f"tree{t}/left", np.asarray(tree.left, dtype=np.float64)))
            arrays.append((f"tree{t}/right", np.asarray(tree.right, dtype=np.float64)))
            arrays.append((f"tree{t}/leaf", np.asarray(tree.leaf, dtype=np.float64)))
        return _encode_arrays(meta, arrays)
    if isinstance(model, MLPModel):
        meta = {
            "kind": "mlp",
            "task": model.task,
            "roster": list(model.roster),
            "classes": list(model.classes) if model.classes is not None else None,
            "input_dim": model.input_dim,
            "config": model.config,
            "n_layers": len(model.layers),
        }
        arrays = []
        for k, (W, b) in enumerate(model.layers):
            arrays.append((f"layer{k}/W", W))
            arrays.append((f"layer{k}/b", b))
        return _encode_arrays(meta, arrays)
    if isinstance(model, PairClassifier):
        base_blob = _encode_model(model.base)
        meta = {
            "kind": "pair_classifier",
            "roster": list(model.roster),
            "embedding_dim": model.embedding_dim,
            "config": model.config,
        }
        wrapped = _encode_arrays(meta, [])
        return wrapped + base_blob
    raise BundleError(f"cannot serialize model of type {type(model).__name__}")


def _decode_model(blob: bytes) -> Any:
    meta, arrays = _decode_head(blob)
    return _build_model(meta, arrays)


def _decode_head(blob: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    newline = blob.find(b"\n")
    if newline < 0:
        raise BundleError("model file has no header line")
    header = json.loads(blob[:newline].decode("utf-8"))
    meta = header["meta"]
    if meta.get("kind") == "pair_classifier":
        base = _decode_model(blob[newline + 1 :])
        return meta, {"__base__": base}  # type: ignore[dict-item]
    return _decode_arrays(blob)


def _build_model(meta: Mapping[str, Any], arrays: Mapping[str, Any]) -> Any:
    kind = meta["kind"]
    if kind == "ridge":
        return RidgeRegressor(
            roster=tuple(meta["roster"]),
            input_dim=int(meta["input_dim"]),
            weights=arrays["weights"],
            intercept=arrays["intercept"],
            config=dict(meta["config"]),
        )
    if kind == "random_forest":
        trees = []
        for t in range(int(meta["n_trees"])):
            tree = Tree()
            tree.feature = arrays[f"tree{t}/feature"].astype(np.int64)  # type: ignore[assignment]
            tree.threshold = arrays[f"tree{t}/threshold"]  # type: ignore[assignment]
            tree.left = arrays[f"tree{t}/left"].astype(np.int64)  # type: ignore[assignment]
            tree.right = arrays[f"tree{t}/right"].astype(np.int64)  # type: ignore[assignment]
            tree.leaf = arrays[f"tree{t}/leaf"]  # type: ignore[assignment]
            trees.append(tree)
        classes = meta["classes"]
        return RandomForestModel(
            task=meta["task"],
            roster=tuple(meta["roster"]),
            classes=tuple(classes) if classes is not None else None,
            input_dim=int(meta["input_dim"]),
            trees=trees,
            config=dict(meta["config"]),
        )
    if kind == "mlp":
        layers = []
        for k in range(int(meta["n_layers"])):
            layers.append((arrays[f"layer{k}/W"], arrays[f"layer{k}/b"]))
        classes = meta["classes"]
        return MLPModel(
            task=meta["task"],
            roster=tuple(meta["roster"]),
            classes=tuple(classes) if classes is not None else None,
            input_dim=int(meta["input_dim"]),
            layers=layers,
            config=dict(meta["config"]),
        )
    if kind == "pair_classifier":
        return PairClassifier(
            base=arrays["__base__"],
            roster=tuple(meta["roster"]),
            embedding_dim=int(meta["embedding_dim"]),
            config=dict(meta["config"]),
        )
    raise BundleError(f"unknown model kind {kind!r}")


@dataclass(eq=False)
class ModelBundle:
    roster: tuple[str, ...]
    embedding_dim: int
    mode: str
    regressors: dict[str, Any]
    pair_classifier: PairClassifier
    category_classifier: Any | None = None
    config: dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        if self.mode not in (MODE_GLOBAL, MODE_PER_CATEGORY):
            raise BundleError(f"unknown bundle mode {self.mode!r}")
        if self.mode == MODE_GLOBAL and MODE_GLOBAL not in self.regressors:
            raise BundleError("global bundle needs a 'global' regressor")
        if self.mode == MODE_PER_CATEGORY:
            if self.category_classifier is None:
                raise BundleError("per-category bundle needs a category classifier")
            labels = set(self.category_classifier.classes or ())
            missing = labels - set(self.regressors)
            if missing:
                raise BundleError(f"no regressor for categories {sorted(missing)}")

    def regressor_for(self, category: str | None) -> Any:
        if self.mode == MODE_GLOBAL:
            return self.regressors[MODE_GLOBAL]
        if category is None or category not in self.regressors:
            raise BundleError(f"no regressor for category {category!r}")
        return self.regressors[category]

    @property
    def roster_hash(self) -> str:
        return roster_hash(self.roster)


def save_bundle(bundle: ModelBundle, path: str | Path) -> Path:
    """Write the bundle directory; returns the manifest path."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)

    files: dict[str, dict[str, str]] = {}

    def emit(logical: str, filename: str, model: Any) -> None:
        blob = _encode_model(model)
        (root / filename).write_bytes(blob)
        files[logical] = {
            "path": filename,
            "sha256": hashlib.sha256(blob).hexdigest(),
        }

    for key in sorted(bundle.regressors):
        emit(f"regressor:{key}", f"regressor_{_slug(key)}.bin", bundle.regressors[key])
    emit("pair_classifier", "pair_classifier.bin", bundle.pair_classifier)
    if bundle.category_classifier is not None:
        emit("category_classifier", "category_classifier.bin", bundle.category_classifier)

    manifest = {
        "format_version": bundle.format_version,
        "mode": bundle.mode,
        "roster": list(bundle.roster),
        "roster_hash": bundle.roster_hash,
        "embedding_dim": bundle.embedding_dim,
        "config": bundle.config,
        "files": files,
    }
    manifest_path = root / "manifest.json"
    manifest_path.write_text(dumps_canonical(manifest) + "\n", encoding="utf-8")
    return manifest_path


def load_bundle(path: str | Path, expected_roster_hash: str | None = None) -> ModelBundle:
    """Load and verify a bundle directory.

    Refuses format-version mismatches, content-hash mismatches (corrupt or
    truncated files), and a roster hash differing from the caller's pin.
    """
    root = Path(path)
    manifest_path = root / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise BundleError(f"no manifest at {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise BundleError("manifest is not valid JSON") from exc

    if not isinstance(manifest, dict):
        raise BundleError("manifest must be a JSON object")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise BundleError(
            f"format version {manifest.get('format_version')!r} unsupported "
            f"(expected {FORMAT_VERSION})"
        )
    try:
        return _load_verified(root, manifest, expected_roster_hash)
    except (KeyError, TypeError, AttributeError, ValueError) as exc:
        raise BundleError(f"manifest is malformed: {exc}") from exc


def _load_verified(
    root: Path, manifest: dict[str, Any], expected_roster_hash: str | None
) -> ModelBundle:
    roster = tuple(manifest["roster"])
    stored_hash = manifest.get("roster_hash")
    if stored_hash != roster_hash(roster):
        raise BundleError("manifest roster hash does not match its roster")
    if expected_roster_hash is not None and stored_hash != expected_roster_hash:
        raise BundleError("bundle roster hash does not match configured roster")

    models: dict[str, Any] = {}
    for logical, entry in manifest["files"].items():
        blob_path = root / entry["path"]
        try:
            blob = blob_path.read_bytes()
        except FileNotFoundError as exc:
            raise BundleError(f"missing model file {entry['path']}") from exc
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise BundleError(f"content hash mismatch for {entry['path']}")
        models[logical] = _decode_model(blob)

    regressors = {
        logical.split(":", 1)[1]: model
        for logical, model in models.items()
        if logical.startswith("regressor:")
    }
    if "pair_classifier" not in models:
        raise BundleError("bundle has no pair classifier")
    return ModelBundle(
        roster=roster,
        embedding_dim=int(manifest["embedding_dim"]),
        mode=manifest["mode"],
        regressors=regressors,
        pair_classifier=models["pair_classifier"],
        category_classifier=models.get("category_classifier"),
        config=dict(manifest.get("config", {})),
    )

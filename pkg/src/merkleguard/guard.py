"""Commit a Merkle manifest when a checkpoint is saved; verify it on load.

The manifest keeps every tree level so that a later verification can
localize tampering without trusting the checkpoint it is checking.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from pathlib import Path

from .checkpoint import Checkpoint
from .merkle import Granularity, MerkleTree, build_levels, build_tree, diff_trees

MANIFEST_VERSION = 1
HASH_ALG = "sha256"

_HEX_DIGEST = re.compile(r"[0-9a-f]{64}")
_FIELDS = (
    "format_version",
    "hash_alg",
    "granularity",
    "leaf_count",
    "model_shape",
    "leaf_coords",
    "levels",
)


class ManifestError(ValueError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.field = field
        self.line = line


class Verdict(str, enum.Enum):
    MATCH = "Match"
    TAMPERED = "Tampered"
    STRUCTURE_CHANGED = "StructureChanged"


@dataclass(frozen=True)
class Manifest:
    granularity: Granularity
    model_shape: tuple[tuple[int, int], ...]
    leaf_coords: tuple[tuple[int, int], ...]
    levels: tuple[tuple[str, ...], ...]
    format_version: int = MANIFEST_VERSION
    hash_alg: str = HASH_ALG

    @property
    def leaf_count(self) -> int:
        return len(self.levels[0])

    @property
    def root(self) -> str:
        return self.levels[-1][0]

    def to_tree(self) -> MerkleTree:
        return MerkleTree(
            levels=tuple(tuple(bytes.fromhex(d) for d in level) for level in self.levels),
            granularity=self.granularity,
            leaf_coords=self.leaf_coords,
        )


@dataclass(frozen=True)
class DivergenceReport:
    verdict: Verdict
    tampered_neurons: tuple[tuple[int, int], ...]
    root_expected: str
    root_actual: str
    nodes_visited: int
    manifest_consistent: bool = True

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "tampered_neurons": [list(c) for c in self.tampered_neurons],
            "root_expected": self.root_expected,
            "root_actual": self.root_actual,
            "nodes_visited": self.nodes_visited,
            "manifest_consistent": self.manifest_consistent,
        }


def _manifest_from_tree(tree: MerkleTree, model: Checkpoint) -> Manifest:
    return Manifest(
        granularity=tree.granularity,
        model_shape=tuple(model.shape),
        leaf_coords=tree.leaf_coords,
        levels=tuple(tuple(d.hex() for d in level) for level in tree.levels),
    )


def commit(model: Checkpoint, granularity: Granularity = Granularity.NEURON) -> Manifest:
    return _manifest_from_tree(build_tree(model, granularity), model)


def verify(model: Checkpoint, manifest: Manifest) -> DivergenceReport:
    """Rebuild the candidate tree and compare it against the committed one.

    A manifest whose internal levels do not hash up from its own leaves has
    been corrupted; it is reported as Tampered with ``manifest_consistent``
    false, and localization falls back to a linear scan of the leaves.
    """
    candidate = build_tree(model, manifest.granularity)
    actual_root = candidate.root.hex()
    if tuple(model.shape) != manifest.model_shape or candidate.leaf_count != manifest.leaf_count:
        return DivergenceReport(Verdict.STRUCTURE_CHANGED, (), manifest.root, actual_root, 0)

    reference = manifest.to_tree()
    if [list(level) for level in reference.levels] != build_levels(list(reference.levels[0])):
        changed = tuple(
            manifest.leaf_coords[i]
            for i, (a, b) in enumerate(zip(reference.levels[0], candidate.levels[0]))
            if a != b
        )
        return DivergenceReport(
            Verdict.TAMPERED, changed, manifest.root, actual_root, candidate.leaf_count, False
        )

    diff = diff_trees(reference, candidate)
    if manifest.root == actual_root:
        return DivergenceReport(Verdict.MATCH, (), manifest.root, actual_root, diff.nodes_visited)
    return DivergenceReport(
        Verdict.TAMPERED, diff.coords, manifest.root, actual_root, diff.nodes_visited
    )


# --------------------------------------------------------------------------- serialization


def dumps_manifest(m: Manifest) -> str:
    doc = {
        "format_version": m.format_version,
        "hash_alg": m.hash_alg,
        "granularity": m.granularity.value,
        "leaf_count": m.leaf_count,
        "model_shape": [list(s) for s in m.model_shape],
        "leaf_coords": [list(c) for c in m.leaf_coords],
        "levels": [list(level) for level in m.levels],
    }
    return json.dumps(doc, indent=1, ensure_ascii=True) + "\n"


def write_manifest(m: Manifest, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_manifest(m))


def _pairs(value: object, field: str) -> tuple[tuple[int, int], ...]:
    if not isinstance(value, list):
        raise ManifestError("expected a list", field)
    out = []
    for i, item in enumerate(value):
        if (
            not isinstance(item, list)
            or len(item) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in item)
        ):
            raise ManifestError(f"expected a pair of non-negative integers, got {item!r}", f"{field}[{i}]")
        out.append((item[0], item[1]))
    return tuple(out)


def loads_manifest(text: str) -> Manifest:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(exc.msg, line=exc.lineno) from exc
    if not isinstance(doc, dict):
        raise ManifestError("top level must be an object")
    missing = [f for f in _FIELDS if f not in doc]
    if missing:
        raise ManifestError("missing field", missing[0])
    unknown = sorted(set(doc) - set(_FIELDS))
    if unknown:
        raise ManifestError("unknown field", unknown[0])

    if doc["format_version"] != MANIFEST_VERSION:
        raise ManifestError(f"unsupported version {doc['format_version']!r}", "format_version")
    if doc["hash_alg"] != HASH_ALG:
        raise ManifestError(f"unsupported hash {doc['hash_alg']!r}", "hash_alg")
    try:
        granularity = Granularity(doc["granularity"])
    except ValueError:
        raise ManifestError(f"unknown granularity {doc['granularity']!r}", "granularity") from None

    model_shape = _pairs(doc["model_shape"], "model_shape")
    if not model_shape:
        raise ManifestError("empty model shape", "model_shape")
    leaf_coords = _pairs(doc["leaf_coords"], "leaf_coords")

    levels = doc["levels"]
    if not isinstance(levels, list) or not levels:
        raise ManifestError("expected a non-empty list of levels", "levels")
    for k, level in enumerate(levels):
        if not isinstance(level, list) or not level:
            raise ManifestError("expected a non-empty list of digests", f"levels[{k}]")
        for i, d in enumerate(level):
            if not isinstance(d, str) or not _HEX_DIGEST.fullmatch(d):
                raise ManifestError(f"not a lowercase hex SHA-256 digest: {d!r}", f"levels[{k}][{i}]")
        if k > 0 and len(level) != (len(levels[k - 1]) + 1) // 2:
            raise ManifestError(
                f"{len(level)} digests, expected {(len(levels[k - 1]) + 1) // 2}", f"levels[{k}]"
            )
    if len(levels[-1]) != 1:
        raise ManifestError("top level must hold exactly one root digest", "levels")
    if any(len(level) == 1 for level in levels[:-1]):
        raise ManifestError("levels continue above the root", "levels")
    if doc["leaf_count"] != len(levels[0]):
        raise ManifestError(f"{doc['leaf_count']!r} != {len(levels[0])} leaf digests", "leaf_count")
    if len(leaf_coords) != len(levels[0]):
        raise ManifestError(f"{len(leaf_coords)} coords for {len(levels[0])} leaves", "leaf_coords")

    return Manifest(
        granularity=granularity,
        model_shape=model_shape,
        leaf_coords=leaf_coords,
        levels=tuple(tuple(level) for level in levels),
    )


def read_manifest(path: str | Path) -> Manifest:
    return loads_manifest(Path(path).read_text(encoding="utf-8"))


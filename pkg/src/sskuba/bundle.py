"""Air-gap artifact bundling: collect, store content-addressed, verify.

The closure of artifacts a disconnected cluster needs is computed by
scanning the gitops tree for fields named ``image``, ``chart`` and
``repository`` (a field-name scan, deliberately, so the closure is
auditable without rendering semantics). Artifacts land in a
registry-style layout, ``blobs/sha256/<digest>``, next to a manifest
whose own digest covers the sorted entries. Verification re-hashes every
blob and needs no resolver and no network.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import yaml

from . import SskubaError
from .gitops import RepoSnapshot
from .util import atomic_write_bytes, atomic_write_text, canonical_json, sha256_hex, to_iso, utc_now

BUNDLE_MANIFEST_NAME = "bundle.manifest.json"
BUNDLE_VERSION = 1

_REF_FIELDS = {"image": "image", "chart": "chart", "repository": "repo"}


class BundleError(SskubaError):
    pass


class ResolveFailedError(BundleError):
    def __init__(self, locator: str, cause: Exception | None = None):
        self.locator = locator
        super().__init__(f"could not resolve {locator!r}" + (f": {cause}" if cause else ""))


class StoreIoError(BundleError):
    pass


@dataclass(frozen=True)
class ArtifactRef:
    kind: str  # image | chart | repo | file
    locator: str
    digest: str | None = None


@dataclass(frozen=True)
class BundleEntry:
    kind: str
    locator: str
    digest: str
    size_bytes: int

    def as_dict(self) -> dict:
        return {"kind": self.kind, "locator": self.locator, "digest": self.digest, "size_bytes": self.size_bytes}


@dataclass(frozen=True)
class BundleManifest:
    created_at: str
    source_revision: str
    entries: tuple[BundleEntry, ...]
    bundle_digest: str
    version: int = BUNDLE_VERSION

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "created_at": self.created_at,
            "source_revision": self.source_revision,
            "entries": [entry.as_dict() for entry in self.entries],
            "bundle_digest": self.bundle_digest,
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "BundleManifest":
        doc = json.loads(text)
        return cls(
            created_at=doc["created_at"],
            source_revision=doc["source_revision"],
            entries=tuple(
                BundleEntry(
                    kind=entry["kind"],
                    locator=entry["locator"],
                    digest=entry["digest"],
                    size_bytes=entry["size_bytes"],
                )
                for entry in doc["entries"]
            ),
            bundle_digest=doc["bundle_digest"],
            version=doc["version"],
        )

    @classmethod
    def load(cls, path: str) -> "BundleManifest":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


@dataclass(frozen=True)
class BundleVerifyReport:
    missing: tuple[str, ...] = ()
    corrupt: tuple[dict, ...] = ()  # {"digest": expected, "actual": recomputed}

    @property
    def ok(self) -> bool:
        return not self.missing and not self.corrupt


def _walk_fields(node, found: list[tuple[str, str]]) -> None:
    if isinstance(node, dict):
        for key, value in node.items():
            if key in _REF_FIELDS and isinstance(value, str) and value:
                found.append((_REF_FIELDS[key], value))
            _walk_fields(value, found)
    elif isinstance(node, list):
        for item in node:
            _walk_fields(item, found)


def collect_references(snapshot: RepoSnapshot) -> list[ArtifactRef]:
    """Scan the tree for artifact references, deduplicated by locator.

    Unparseable files are skipped; the sync layer already reports them.
    Order is deterministic: sorted by kind then locator.
    """
    found: list[tuple[str, str]] = []
    for rel in sorted(snapshot.files):
        try:
            doc = yaml.safe_load(snapshot.files[rel].decode("utf-8"))
        except (UnicodeDecodeError, yaml.YAMLError):
            continue
        _walk_fields(doc, found)
    by_locator: dict[str, str] = {}
    for kind, locator in found:
        by_locator.setdefault(locator, kind)
    refs = [ArtifactRef(kind=kind, locator=locator) for locator, kind in by_locator.items()]
    refs.sort(key=lambda ref: (ref.kind, ref.locator))
    return refs


def blob_path(store_dir: str, digest: str) -> str:
    return os.path.join(store_dir, "blobs", "sha256", digest)


def build_bundle(
    refs: list[ArtifactRef],
    resolver,
    store_dir: str,
    source_revision: str = "",
) -> BundleManifest:
    """Resolve every reference into the content-addressed store.

    ``resolver(ref) -> bytes`` produces the artifact payload; tests use a
    fixture resolver and the CLI a deterministic placeholder one (real
    pull protocols are out of scope). Identical content collapses to one
    blob and one entry. Rebuilding from identical inputs reproduces the
    same bundle digest.
    """
    by_digest: dict[str, BundleEntry] = {}
    for ref in sorted(refs, key=lambda r: (r.kind, r.locator)):
        try:
            data = resolver(ref)
        except Exception as exc:
            raise ResolveFailedError(ref.locator, exc) from exc
        if not isinstance(data, bytes):
            raise ResolveFailedError(ref.locator, TypeError("resolver must return bytes"))
        digest = sha256_hex(data)
        try:
            path = blob_path(store_dir, digest)
            if not os.path.exists(path):
                atomic_write_bytes(path, data)
        except OSError as exc:
            raise StoreIoError(f"writing blob for {ref.locator!r}: {exc}") from exc
        if digest not in by_digest:
            by_digest[digest] = BundleEntry(
                kind=ref.kind, locator=ref.locator, digest=digest, size_bytes=len(data)
            )
    entries = tuple(sorted(by_digest.values(), key=lambda entry: entry.digest))
    bundle_digest = sha256_hex(
        canonical_json([entry.as_dict() for entry in entries]).encode("utf-8")
    )
    manifest = BundleManifest(
        created_at=to_iso(utc_now()),
        source_revision=source_revision,
        entries=entries,
        bundle_digest=bundle_digest,
    )
    try:
        atomic_write_text(os.path.join(store_dir, BUNDLE_MANIFEST_NAME), manifest.to_json())
    except OSError as exc:
        raise StoreIoError(f"writing bundle manifest: {exc}") from exc
    return manifest


def verify_bundle(manifest: BundleManifest, store_dir: str) -> BundleVerifyReport:
    """Re-hash every blob against the manifest, offline.

    Filesystem only; nothing here can reach a network. An empty report
    means the bundle is complete and intact.
    """
    missing: list[str] = []
    corrupt: list[dict] = []
    for entry in manifest.entries:
        path = blob_path(store_dir, entry.digest)
        if not os.path.exists(path):
            missing.append(entry.digest)
            continue
        hasher = hashlib.sha256()
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(65536), b""):
                hasher.update(chunk)
        actual = hasher.hexdigest()
        if actual != entry.digest:
            corrupt.append({"digest": entry.digest, "actual": actual})
    return BundleVerifyReport(missing=tuple(missing), corrupt=tuple(corrupt))


def placeholder_resolver(ref: ArtifactRef) -> bytes:
    """Deterministic offline stand-in payload for an artifact reference."""
    return f"sskuba bundle placeholder\nkind: {ref.kind}\nlocator: {ref.locator}\n".encode("utf-8")

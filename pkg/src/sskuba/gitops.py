"""GitOps synchronization: apply a repository tree to cluster app state.

A repo snapshot is a directory tree of single-document YAML manifests,
each carrying ``apiVersion``, ``kind`` and ``metadata.name``. Syncing
applies objects present in the tree, prunes sync-owned objects that
disappeared from it, and records the tree's content revision. Objects
created by anything other than the sync (the access agent registration,
for instance) carry a different ownership label and are never pruned.

At desk scale the repository is a local directory; a URL form parses but
there is no network fetcher, so snapshots for remote repositories must
arrive through the same snapshot interface by other means.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import yaml

from . import SskubaError
from .access import AccessRegistry
from .manifest import GitOpsSpec
from .util import atomic_write_text, canonical_json, sha256_hex

OWNER_LABEL = "managed-by"
SYNC_OWNER = "sskuba-sync"
ACCESS_OWNER = "sskuba-access"


class GitopsError(SskubaError):
    pass


class RepoUnreachableError(GitopsError):
    pass


class AuthFailedError(GitopsError):
    pass


class NotBootstrappedError(GitopsError):
    pass


@dataclass(frozen=True)
class SyncConfig:
    repository: str
    branch: str
    path: str
    interval: int = 1
    credential_ref: str | None = None


@dataclass(frozen=True)
class SyncError:
    file: str
    reason: str


@dataclass(frozen=True)
class SyncResult:
    revision: str
    applied: tuple[str, ...]
    pruned: tuple[str, ...]
    errors: tuple[SyncError, ...] = ()


@dataclass(frozen=True)
class RepoSnapshot:
    """Immutable view of the manifest tree: relative path -> bytes."""

    files: dict

    @classmethod
    def from_dir(cls, root: str) -> "RepoSnapshot":
        if not os.path.isdir(root):
            raise RepoUnreachableError(f"repository path {root!r} is not a readable directory")
        files = {}
        for dirpath, _dirnames, filenames in os.walk(root):
            for filename in sorted(filenames):
                if not filename.endswith((".yaml", ".yml")):
                    continue
                full = os.path.join(dirpath, filename)
                rel = os.path.relpath(full, root)
                with open(full, "rb") as fh:
                    files[rel] = fh.read()
        return cls(files=files)


def tree_revision(snapshot: RepoSnapshot) -> str:
    """Pure content digest: invariant under file order and renames."""
    digests = sorted(sha256_hex(data) for data in snapshot.files.values())
    return hashlib.sha256("".join(digests).encode("ascii")).hexdigest()


@dataclass
class ClusterAppState:
    """Desk-scale stand-in for in-cluster application state.

    Objects are a map of object id to content digest plus ownership
    labels; no API server is emulated.
    """

    cluster: str
    fqdn: str = ""
    zone: str = ""
    objects: dict = field(default_factory=dict)
    sync: SyncConfig | None = None
    last_revision: str | None = None
    agent_id: str | None = None

    def to_json(self) -> str:
        doc = {
            "version": 1,
            "cluster": self.cluster,
            "fqdn": self.fqdn,
            "zone": self.zone,
            "objects": self.objects,
            "sync": None
            if self.sync is None
            else {
                "repository": self.sync.repository,
                "branch": self.sync.branch,
                "path": self.sync.path,
                "interval": self.sync.interval,
                "credential_ref": self.sync.credential_ref,
            },
            "last_revision": self.last_revision,
            "agent_id": self.agent_id,
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ClusterAppState":
        doc = json.loads(text)
        sync = None
        if doc.get("sync"):
            sync = SyncConfig(
                repository=doc["sync"]["repository"],
                branch=doc["sync"]["branch"],
                path=doc["sync"]["path"],
                interval=doc["sync"].get("interval", 1),
                credential_ref=doc["sync"].get("credential_ref"),
            )
        return cls(
            cluster=doc["cluster"],
            fqdn=doc.get("fqdn", ""),
            zone=doc.get("zone", ""),
            objects=doc.get("objects", {}),
            sync=sync,
            last_revision=doc.get("last_revision"),
            agent_id=doc.get("agent_id"),
        )

    def save(self, path: str) -> None:
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path: str) -> "ClusterAppState":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def _is_url(repository: str) -> bool:
    return "://" in repository


def repo_tree_dir(spec: GitOpsSpec) -> str:
    return os.path.normpath(os.path.join(spec.repository, spec.path))


def snapshot_repo(spec: GitOpsSpec) -> RepoSnapshot:
    """Snapshot the manifest tree for a local-directory repository."""
    if _is_url(spec.repository):
        raise RepoUnreachableError(
            f"{spec.repository}: remote repositories need an externally supplied snapshot"
        )
    root = repo_tree_dir(spec)
    base = os.path.abspath(spec.repository)
    if not os.path.abspath(root).startswith(base):
        raise RepoUnreachableError(f"path {spec.path!r} escapes the repository root")
    return RepoSnapshot.from_dir(root)


def bootstrap_sync(
    state: ClusterAppState, spec: GitOpsSpec, credential: str | None = None
) -> SyncConfig:
    """Record the sync configuration on the cluster and check reachability.

    When the spec names a credential, an absent or empty token is an
    authentication failure, before any repository access is attempted.
    """
    if spec.credential_ref and not credential:
        raise AuthFailedError(
            f"credential {spec.credential_ref!r} required but no token is available"
        )
    if not _is_url(spec.repository) and not os.path.isdir(repo_tree_dir(spec)):
        raise RepoUnreachableError(
            f"repository tree {repo_tree_dir(spec)!r} is not a readable directory"
        )
    config = SyncConfig(
        repository=spec.repository,
        branch=spec.branch,
        path=spec.path,
        credential_ref=spec.credential_ref,
    )
    state.sync = config
    return config


def _parse_object(rel: str, data: bytes) -> tuple[str, str]:
    try:
        doc = yaml.safe_load(data.decode("utf-8"))
    except (UnicodeDecodeError, yaml.YAMLError) as exc:
        raise ValueError(f"invalid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValueError("manifest is not a mapping")
    for key in ("apiVersion", "kind"):
        if not isinstance(doc.get(key), str) or not doc[key]:
            raise ValueError(f"missing {key}")
    metadata = doc.get("metadata")
    if not isinstance(metadata, dict) or not isinstance(metadata.get("name"), str) or not metadata["name"]:
        raise ValueError("missing metadata.name")
    object_id = f"{doc['kind']}/{metadata['name']}"
    return object_id, sha256_hex(canonical_json(doc).encode("utf-8"))


def sync_once(state: ClusterAppState, snapshot: RepoSnapshot) -> SyncResult:
    """Apply the snapshot: new or changed objects in, vanished ones out.

    Malformed files are recorded as per-file errors and do not stop the
    sync. Idempotent: a second sync on the same tree applies and prunes
    nothing.
    """
    if state.sync is None:
        raise NotBootstrappedError("sync has not been bootstrapped for this cluster")

    desired: dict[str, str] = {}
    errors: list[SyncError] = []
    for rel in sorted(snapshot.files):
        try:
            object_id, digest = _parse_object(rel, snapshot.files[rel])
        except ValueError as exc:
            errors.append(SyncError(file=rel, reason=str(exc)))
            continue
        if object_id in desired:
            errors.append(SyncError(file=rel, reason=f"duplicate object {object_id}"))
            continue
        desired[object_id] = digest

    applied = []
    for object_id, digest in sorted(desired.items()):
        existing = state.objects.get(object_id)
        if existing is None or existing.get("digest") != digest:
            state.objects[object_id] = {"digest": digest, "labels": {OWNER_LABEL: SYNC_OWNER}}
            applied.append(object_id)

    pruned = []
    for object_id in sorted(state.objects):
        entry = state.objects[object_id]
        if entry.get("labels", {}).get(OWNER_LABEL) != SYNC_OWNER:
            continue  # not ours to prune
        if object_id not in desired:
            del state.objects[object_id]
            pruned.append(object_id)

    revision = tree_revision(snapshot)
    state.last_revision = revision
    return SyncResult(
        revision=revision,
        applied=tuple(applied),
        pruned=tuple(pruned),
        errors=tuple(errors),
    )


def register_access_agent(
    state: ClusterAppState, registry: AccessRegistry, token_value: str
) -> str:
    """Deploy the access agent: redeem the join token, record the agent.

    The agent object is owned by the access machinery, not the sync, so
    pruning never removes it.
    """
    registration = registry.redeem(token_value, state.cluster, state.fqdn)
    state.objects["Pod/access-agent"] = {
        "digest": sha256_hex(registration.agent_id.encode("ascii")),
        "labels": {OWNER_LABEL: ACCESS_OWNER},
    }
    state.agent_id = registration.agent_id
    return registration.agent_id

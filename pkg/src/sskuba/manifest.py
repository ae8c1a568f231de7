"""Parsing, validation, and canonicalization of the cluster manifest.

The manifest is a single YAML document with three sections: ``metadata``
(naming), ``target`` (host environment and node pools), and ``gitops``
(the repository the cluster syncs from). The schema is closed: unknown
keys anywhere in the document are rejected at parse time, because silent
typos in infrastructure configuration are the failure mode to kill.
Semantic rules (DNS grammar, etcd quorum) are checked by :func:`validate`,
which reports violations as data instead of raising.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import yaml

from . import SskubaError
from .util import canonical_json, sha256_hex

API_VERSION = "sskuba/v1"
KIND = "Cluster"
PROVIDERS = ("sim", "aws", "azure", "vsphere")

_DNS_LABEL = re.compile(r"^[a-z0-9]([a-z0-9-]{0,61}[a-z0-9])?$")


class ManifestError(SskubaError):
    pass


class ParseError(ManifestError):
    """Malformed document syntax."""

    def __init__(self, line: int | None, message: str):
        self.line = line
        self.message = message
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class SchemaError(ManifestError):
    """Structurally valid document that does not fit the manifest schema."""

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}" if path else message)


@dataclass(frozen=True)
class NodePool:
    count: int
    machine_type: str = ""


@dataclass(frozen=True)
class GitOpsSpec:
    repository: str
    branch: str = "main"
    path: str = "."
    credential_ref: str | None = None


@dataclass(frozen=True)
class ClusterManifest:
    name: str
    domain: str
    provider: str
    region: str
    control_plane: NodePool
    workers: NodePool
    gpu_workers: NodePool
    gitops: GitOpsSpec


@dataclass(frozen=True)
class Violation:
    path: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def messages(self) -> list[str]:
        return [v.message for v in self.violations]


def _require_mapping(node: object, path: str) -> dict:
    if not isinstance(node, dict):
        raise SchemaError(path, "expected a mapping")
    for key in node:
        if not isinstance(key, str):
            raise SchemaError(path, f"non-string key {key!r}")
    return node


def _check_keys(node: dict, path: str, required: tuple[str, ...], optional: tuple[str, ...] = ()) -> None:
    for key in node:
        if key not in required and key not in optional:
            raise SchemaError(_join(path, key), "unknown field")
    for key in required:
        if key not in node:
            raise SchemaError(_join(path, key), "required")


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _string(node: dict, path: str, key: str) -> str:
    value = node[key]
    if not isinstance(value, str):
        raise SchemaError(_join(path, key), "expected a string")
    return value


def _count(node: dict, path: str, key: str) -> int:
    value = node[key]
    # bool is an int subclass in Python and a distinct type in YAML; reject it.
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(_join(path, key), "expected an integer")
    return value


def _parse_pool(node: object, path: str, required: bool = True) -> NodePool:
    mapping = _require_mapping(node, path)
    _check_keys(mapping, path, required=("count",), optional=("machineType",))
    machine_type = ""
    if "machineType" in mapping:
        machine_type = _string(mapping, path, "machineType")
    return NodePool(count=_count(mapping, path, "count"), machine_type=machine_type)


def parse_manifest(text: str) -> ClusterManifest:
    """Parse one YAML document into a :class:`ClusterManifest`.

    Raises :class:`ParseError` for malformed syntax and :class:`SchemaError`
    for missing or unknown fields. Semantic invariants are left to
    :func:`validate` so a parsed-but-wrong manifest can be reported as a
    list of violations.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        line = None
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            line = mark.line + 1
        raise ParseError(line, str(getattr(exc, "problem", exc))) from exc

    root = _require_mapping(doc, "")
    _check_keys(root, "", required=("apiVersion", "kind", "metadata", "target", "gitops"))

    api_version = _string(root, "", "apiVersion")
    if api_version != API_VERSION:
        raise SchemaError("apiVersion", f"unsupported value {api_version!r} (expected {API_VERSION!r})")
    kind = _string(root, "", "kind")
    if kind != KIND:
        raise SchemaError("kind", f"unsupported value {kind!r} (expected {KIND!r})")

    metadata = _require_mapping(root["metadata"], "metadata")
    _check_keys(metadata, "metadata", required=("name", "domain"))

    target = _require_mapping(root["target"], "target")
    _check_keys(
        target,
        "target",
        required=("provider", "region", "controlPlane", "workers"),
        optional=("gpuWorkers",),
    )
    gpu_workers = NodePool(count=0)
    if "gpuWorkers" in target:
        gpu_workers = _parse_pool(target["gpuWorkers"], "target.gpuWorkers")

    gitops = _require_mapping(root["gitops"], "gitops")
    _check_keys(gitops, "gitops", required=("repository",), optional=("branch", "path", "credentialRef"))
    credential_ref = None
    if "credentialRef" in gitops:
        credential_ref = _string(gitops, "gitops", "credentialRef")

    return ClusterManifest(
        name=_string(metadata, "metadata", "name"),
        domain=_string(metadata, "metadata", "domain"),
        provider=_string(target, "target", "provider"),
        region=_string(target, "target", "region"),
        control_plane=_parse_pool(target["controlPlane"], "target.controlPlane"),
        workers=_parse_pool(target["workers"], "target.workers"),
        gpu_workers=gpu_workers,
        gitops=GitOpsSpec(
            repository=_string(gitops, "gitops", "repository"),
            branch=_string(gitops, "gitops", "branch") if "branch" in gitops else "main",
            path=_string(gitops, "gitops", "path") if "path" in gitops else ".",
            credential_ref=credential_ref,
        ),
    )


def _pool_violations(pool: NodePool, path: str) -> list[Violation]:
    out = []
    if pool.count < 0:
        out.append(Violation(f"{path}.count", f"{path} count must be non-negative"))
    if pool.count > 0 and not pool.machine_type:
        out.append(Violation(f"{path}.machineType", f"{path} machine type required when count > 0"))
    return out


def validate(m: ClusterManifest) -> ValidationReport:
    """Check all semantic invariants. Violations are data, not exceptions."""
    violations: list[Violation] = []

    if not _DNS_LABEL.match(m.name):
        violations.append(Violation("metadata.name", "name is not a DNS label"))
    if not m.domain or not all(_DNS_LABEL.match(label) for label in m.domain.split(".")):
        violations.append(Violation("metadata.domain", "domain is not a DNS zone name"))
    if m.provider not in PROVIDERS:
        violations.append(
            Violation("target.provider", f"provider must be one of {', '.join(PROVIDERS)}")
        )
    if not m.region:
        violations.append(Violation("target.region", "region must be non-empty"))

    if m.control_plane.count < 1 or m.control_plane.count % 2 == 0:
        violations.append(
            Violation("target.controlPlane.count", "control plane count must be odd and at least 1")
        )
    violations.extend(_pool_violations(m.control_plane, "target.controlPlane"))
    violations.extend(_pool_violations(m.workers, "target.workers"))
    violations.extend(_pool_violations(m.gpu_workers, "target.gpuWorkers"))

    if not m.gitops.repository:
        violations.append(Violation("gitops.repository", "repository must be non-empty"))
    parts = m.gitops.path.replace("\\", "/").split("/")
    if ".." in parts:
        violations.append(Violation("gitops.path", "path must not traverse parent directories"))

    return ValidationReport(tuple(violations))


def fqdn(m: ClusterManifest) -> str:
    """The cluster's fully qualified domain name, ``<name>.<domain>``."""
    return f"{m.name}.{m.domain}".lower()


def canonical_document(m: ClusterManifest) -> dict:
    """The schema-shaped dict whose canonical JSON defines the spec hash."""
    doc: dict = {
        "apiVersion": API_VERSION,
        "kind": KIND,
        "metadata": {"name": m.name, "domain": m.domain},
        "target": {
            "provider": m.provider,
            "region": m.region,
            "controlPlane": {"count": m.control_plane.count, "machineType": m.control_plane.machine_type},
            "workers": {"count": m.workers.count, "machineType": m.workers.machine_type},
            "gpuWorkers": {"count": m.gpu_workers.count, "machineType": m.gpu_workers.machine_type},
        },
        "gitops": {
            "repository": m.gitops.repository,
            "branch": m.gitops.branch,
            "path": m.gitops.path,
        },
    }
    if m.gitops.credential_ref is not None:
        doc["gitops"]["credentialRef"] = m.gitops.credential_ref
    return doc


def serialize_manifest(m: ClusterManifest) -> str:
    return yaml.safe_dump(canonical_document(m), sort_keys=True, default_flow_style=False)


def spec_hash(m: ClusterManifest) -> str:
    """64-hex digest of the canonical serialization.

    Key order and comments in the source document never affect the digest;
    any field change does.
    """
    return sha256_hex(canonical_json(canonical_document(m)).encode("utf-8"))

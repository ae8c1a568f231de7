"""Immutable-OS machine configuration rendering.

One config per node, rendered as a pure function of (manifest, bundle,
role, index). The host OS contract is non-negotiable: the root
filesystem is read-only and there is no shell or SSH access, so those
flags are constants here rather than options. Control-plane configs
additionally carry etcd peer credentials; GPU workers get the NVIDIA
driver system extension.

Configs embed certificate private keys, so they are written to disk only
inside sealed blobs (``<node>.machineconfig.sealed``); the plaintext form
exists in memory during apply and, redacted, in golden test files.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

import yaml

from . import SskubaError
from .manifest import ClusterManifest, NodePool, fqdn
from .pki import Role, TrustBundle, derive_cert
from .util import sha256_hex

NVIDIA_EXTENSION = "nvidia-driver"
MANAGEMENT_API_PORT = 50000
KUBERNETES_API_PORT = 6443

ROLE_ABBREV = {Role.CONTROL_PLANE: "cp", Role.WORKER: "wk", Role.GPU_WORKER: "gpu"}

CONTROL_PLANE_LABEL = ("node-role/control-plane", "true")
GPU_LABEL = ("accelerator", "gpu")


class MachineConfigError(SskubaError):
    pass


class IndexOutOfRangeError(MachineConfigError):
    pass


class InvalidRoleError(MachineConfigError):
    pass


@dataclass(frozen=True)
class Taint:
    key: str
    value: str
    effect: str

    def as_dict(self) -> dict:
        return {"key": self.key, "value": self.value, "effect": self.effect}


@dataclass(frozen=True)
class OsFlags:
    root_readonly: bool = True
    ssh_enabled: bool = False
    api_port: int = MANAGEMENT_API_PORT


@dataclass(frozen=True)
class MachineConfig:
    node_name: str
    role: Role
    cluster_endpoint: str
    certs: dict
    secrets: dict
    labels: dict
    taints: tuple[Taint, ...]
    os_flags: OsFlags = OsFlags()
    extensions: tuple[str, ...] = ()


def labels_and_taints(role: Role) -> tuple[dict, tuple[Taint, ...]]:
    """The fixed label/taint rule table per node role."""
    if role is Role.CONTROL_PLANE:
        return (
            {CONTROL_PLANE_LABEL[0]: CONTROL_PLANE_LABEL[1]},
            (Taint(key="node-role/control-plane", value="", effect="NoSchedule"),),
        )
    if role is Role.GPU_WORKER:
        return (
            {GPU_LABEL[0]: GPU_LABEL[1]},
            (Taint(key="gpu", value="", effect="NoSchedule"),),
        )
    if role is Role.WORKER:
        return ({}, ())
    raise InvalidRoleError(f"{role.value} is not a node role")


def node_name(cluster: str, role: Role, index: int) -> str:
    return f"{cluster}-{ROLE_ABBREV[role]}-{index}"


def pool_for_role(m: ClusterManifest, role: Role) -> NodePool:
    pools = {
        Role.CONTROL_PLANE: m.control_plane,
        Role.WORKER: m.workers,
        Role.GPU_WORKER: m.gpu_workers,
    }
    if role not in pools:
        raise InvalidRoleError(f"{role.value} is not a node role")
    return pools[role]


def cluster_endpoint(m: ClusterManifest) -> str:
    return f"https://{fqdn(m)}:{KUBERNETES_API_PORT}"


def render(m: ClusterManifest, bundle: TrustBundle, role: Role, index: int) -> MachineConfig:
    """Render the machine configuration for one node.

    Deterministic: certificates and keys are derived from the bundle's
    secret seed, so two renders with the same inputs serialize
    byte-identically.
    """
    pool = pool_for_role(m, role)
    if index < 0 or index >= pool.count:
        raise IndexOutOfRangeError(
            f"index {index} out of range for {role.value} pool of {pool.count}"
        )
    name = node_name(m.name, role, index)
    ttl = bundle.policy.machine_ttl
    node_cred = derive_cert(bundle, name, role, ttl)
    certs = {
        "node_cert": node_cred.cert_pem,
        "node_key": node_cred.key_pem,
        "cluster_ca": bundle.cluster_ca.cert_pem,
    }
    if role is Role.CONTROL_PLANE:
        peer = derive_cert(bundle, name, Role.ETCD_PEER, ttl)
        certs["etcd_peer_cert"] = peer.cert_pem
        certs["etcd_peer_key"] = peer.key_pem
        certs["etcd_ca"] = bundle.etcd_ca.cert_pem
    labels, taints = labels_and_taints(role)
    extensions = (NVIDIA_EXTENSION,) if role is Role.GPU_WORKER else ()
    return MachineConfig(
        node_name=name,
        role=role,
        cluster_endpoint=cluster_endpoint(m),
        certs=certs,
        secrets={"bootstrap_token": bundle.bootstrap_token()},
        labels=labels,
        taints=taints,
        extensions=extensions,
    )


def gpu_overlay(cfg: MachineConfig) -> MachineConfig:
    """Turn a worker config into a GPU worker config.

    Idempotent: the NVIDIA extension is appended exactly once. Labels and
    taints are rewritten to the GPU rule table so the result is a
    consistent gpu_worker config.
    """
    if cfg.role is Role.CONTROL_PLANE:
        raise InvalidRoleError("gpu overlay applies to worker configs only")
    if cfg.role not in (Role.WORKER, Role.GPU_WORKER):
        raise InvalidRoleError(f"{cfg.role.value} is not a worker role")
    extensions = cfg.extensions
    if NVIDIA_EXTENSION not in extensions:
        extensions = extensions + (NVIDIA_EXTENSION,)
    labels, taints = labels_and_taints(Role.GPU_WORKER)
    return replace(cfg, role=Role.GPU_WORKER, extensions=extensions, labels=labels, taints=taints)


def _as_document(cfg: MachineConfig) -> dict:
    return {
        "node_name": cfg.node_name,
        "role": cfg.role.value,
        "cluster_endpoint": cfg.cluster_endpoint,
        "certs": dict(cfg.certs),
        "secrets": dict(cfg.secrets),
        "labels": dict(cfg.labels),
        "taints": [t.as_dict() for t in cfg.taints],
        "os_flags": {
            "root_readonly": cfg.os_flags.root_readonly,
            "ssh_enabled": cfg.os_flags.ssh_enabled,
            "api_port": cfg.os_flags.api_port,
        },
        "extensions": list(cfg.extensions),
    }


def canonical_serialize(cfg: MachineConfig) -> str:
    """Deterministic structured text: sorted keys, stable formatting."""
    return yaml.safe_dump(_as_document(cfg), sort_keys=True, default_flow_style=False)


_PEM_PRIVATE = re.compile(
    r"-----BEGIN [A-Z ]*PRIVATE KEY-----.*?-----END [A-Z ]*PRIVATE KEY-----\n?", re.DOTALL
)


def redacted_canonical(cfg: MachineConfig) -> str:
    """Canonical form with secret material replaced by digests.

    Used for golden files, which must never carry private keys or
    bootstrap tokens into the repository.
    """
    doc = _as_document(cfg)
    for key, pem in list(doc["certs"].items()):
        if _PEM_PRIVATE.search(pem):
            doc["certs"][key] = f"sha256:{sha256_hex(pem.encode('ascii'))}"
    doc["secrets"] = {k: f"sha256:{sha256_hex(v.encode('utf-8'))}" for k, v in doc["secrets"].items()}
    return yaml.safe_dump(doc, sort_keys=True, default_flow_style=False)

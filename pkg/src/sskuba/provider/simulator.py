"""Deterministic simulated target environment with fault injection.

All state mutations are serialized behind one lock, identifiers are
sequential counters, and public IPs are allocated in order from
10.255.0.0/16, so identical call sequences (including fault specs and
seed) always produce identical snapshots. When constructed with a
``state_path`` the world is persisted after every mutation, which is what
makes crash tests honest: a killed process leaves behind exactly the
world the next process loads.

Fault specs are never persisted; they belong to the harness, not the
world.
"""

from __future__ import annotations

import ipaddress
import json
import os
import threading

from . import (
    AlreadyBootstrappedError,
    FaultSpec,
    InjectedFaultError,
    InvalidInputsError,
    NodePhase,
    NodeRecord,
    NotFoundError,
    Provider,
    ProviderResourceRecord,
    QuotaExceededError,
    ResourceKind,
    StaleUnavailableError,
    WrongPhaseError,
    ZoneNotFoundError,
)
from ..util import atomic_write_text

_MACHINE_REQUIRED_INPUTS = ("node_name", "role", "image", "machine_type", "config_ref")
_PUBLIC_IP_BASE = int(ipaddress.IPv4Address("10.255.0.0"))


def _kind(value) -> ResourceKind:
    return value if isinstance(value, ResourceKind) else ResourceKind(value)


class SimProvider(Provider):
    name = "sim"

    def __init__(
        self,
        zones: tuple[str, ...] = (),
        seed: int = 0,
        max_resources: int | None = None,
        latency: dict | None = None,
        faults: tuple[FaultSpec, ...] = (),
        state_path: str | None = None,
    ):
        self._lock = threading.RLock()
        self._faults = tuple(faults)
        self._state_path = state_path
        self._records: dict[str, ProviderResourceRecord] = {}
        self._nodes: dict[str, NodeRecord] = {}
        self._secrets: dict[str, str] = {}
        self._dns: dict[str, dict[str, dict]] = {zone: {} for zone in zones}
        self._etcd_bootstrapped = False
        self._etcd_bootstrap_count = 0
        self._next_id = 1
        self._next_ip = 1
        self._next_dns_id = 1
        self._sim_time = 0.0
        self._seed = seed
        self._max_resources = max_resources
        self._latency = dict(latency or {})
        self._create_seq: dict[str, int] = {}
        self._read_seq: dict[str, int] = {}
        self._observe_seq = 0

    # -- persistence ------------------------------------------------------

    @classmethod
    def open(
        cls,
        state_path: str,
        zones: tuple[str, ...] = (),
        faults: tuple[FaultSpec, ...] = (),
        **kwargs,
    ) -> "SimProvider":
        """Load the persisted world if present, else start a fresh one."""
        if os.path.exists(state_path):
            sim = cls.load(state_path, faults=faults)
            for zone in zones:
                sim._dns.setdefault(zone, {})
            return sim
        sim = cls(zones=zones, faults=faults, state_path=state_path, **kwargs)
        sim._persist()
        return sim

    @classmethod
    def load(cls, state_path: str, faults: tuple[FaultSpec, ...] = ()) -> "SimProvider":
        with open(state_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        sim = cls(faults=faults, state_path=state_path)
        sim._records = {
            pid: ProviderResourceRecord(
                provider_id=pid,
                kind=ResourceKind(rec["kind"]),
                inputs=rec["inputs"],
                outputs=rec["outputs"],
                state=rec["state"],
            )
            for pid, rec in doc["records"].items()
        }
        sim._nodes = {
            name: NodeRecord(
                name=name,
                role=node["role"],
                phase=NodePhase(node["phase"]),
                labels=node["labels"],
                taints=node["taints"],
                config_applied=node["config_applied"],
            )
            for name, node in doc["nodes"].items()
        }
        sim._secrets = dict(doc["secrets"])
        sim._dns = {zone: dict(records) for zone, records in doc["dns"].items()}
        sim._etcd_bootstrapped = doc["etcd"]["bootstrapped"]
        sim._etcd_bootstrap_count = doc["etcd"]["bootstrap_count"]
        counters = doc["counters"]
        sim._next_id = counters["next_id"]
        sim._next_ip = counters["next_ip"]
        sim._next_dns_id = counters["next_dns_id"]
        sim._sim_time = counters["sim_time"]
        sim._seed = doc.get("seed", 0)
        sim._max_resources = doc.get("max_resources")
        sim._latency = doc.get("latency", {})
        return sim

    def _persist(self) -> None:
        if self._state_path is None:
            return
        doc = {
            "version": 1,
            "records": {
                pid: {
                    "kind": rec.kind.value,
                    "inputs": rec.inputs,
                    "outputs": rec.outputs,
                    "state": rec.state,
                }
                for pid, rec in self._records.items()
            },
            "nodes": {
                name: {
                    "role": node.role,
                    "phase": node.phase.value,
                    "labels": node.labels,
                    "taints": node.taints,
                    "config_applied": node.config_applied,
                }
                for name, node in self._nodes.items()
            },
            "secrets": self._secrets,
            "dns": self._dns,
            "etcd": {"bootstrapped": self._etcd_bootstrapped, "bootstrap_count": self._etcd_bootstrap_count},
            "counters": {
                "next_id": self._next_id,
                "next_ip": self._next_ip,
                "next_dns_id": self._next_dns_id,
                "sim_time": self._sim_time,
            },
            "seed": self._seed,
            "max_resources": self._max_resources,
            "latency": self._latency,
        }
        atomic_write_text(self._state_path, json.dumps(doc, sort_keys=True, indent=2))

    # -- fault matching ----------------------------------------------------

    def _bump(self, table: dict[str, int], kind: ResourceKind) -> int:
        table[kind.value] = table.get(kind.value, 0) + 1
        return table[kind.value]

    def _match_fault(self, kind: ResourceKind, ordinal: int, behavior: str) -> FaultSpec | None:
        for fault in self._faults:
            if fault.kind == kind and fault.ordinal == ordinal and fault.behavior == behavior:
                return fault
        return None

    # -- resource lifecycle -------------------------------------------------

    def create(self, kind, inputs: dict) -> ProviderResourceRecord:
        kind = _kind(kind)
        with self._lock:
            seq = self._bump(self._create_seq, kind)
            if self._match_fault(kind, seq, "fail_create"):
                raise InjectedFaultError(f"injected fault: {kind.value} create #{seq}")
            if self._match_fault(kind, seq, "delay"):
                self._sim_time += 10.0
            if self._max_resources is not None and len(self._records) >= self._max_resources:
                raise QuotaExceededError(f"resource cap of {self._max_resources} reached")
            outputs = self._outputs_for(kind, inputs)
            provider_id = f"sim-{kind.value.lower()}-{self._next_id}"
            self._next_id += 1
            if kind is ResourceKind.MACHINE:
                self._register_node(inputs)
                outputs = {"node_name": inputs["node_name"], "image": inputs["image"]}
            elif kind is ResourceKind.SECRET_ENTRY:
                self._secrets[inputs["name"]] = inputs.get("value", "placeholder")
                outputs = {"name": inputs["name"]}
            elif kind is ResourceKind.DNS_RECORD:
                record_id = self._dns_upsert_locked(
                    inputs["zone"], inputs["name"], inputs.get("type", "CNAME"), inputs["value"]
                )
                outputs = {"record_id": record_id}
            record = ProviderResourceRecord(
                provider_id=provider_id,
                kind=kind,
                inputs=dict(inputs),
                outputs=outputs,
                state="ready",
            )
            self._records[provider_id] = record
            self._sim_time += float(self._latency.get(kind.value, 0))
            self._persist()
            return ProviderResourceRecord(provider_id, kind, dict(record.inputs), dict(record.outputs), record.state)

    def _outputs_for(self, kind: ResourceKind, inputs: dict) -> dict:
        if kind is ResourceKind.PUBLIC_IP:
            address = str(ipaddress.IPv4Address(_PUBLIC_IP_BASE + self._next_ip))
            self._next_ip += 1
            return {"address": address}
        if kind is ResourceKind.LOAD_BALANCER:
            return {"address": f"lb-{self._next_id}.sim.internal", "listen_port": inputs.get("listen_port", 6443)}
        if kind is ResourceKind.NETWORK:
            return {"cidr": inputs.get("cidr", "10.0.0.0/16")}
        if kind is ResourceKind.SUBNET:
            return {"cidr": inputs.get("cidr", "10.0.1.0/24")}
        if kind is ResourceKind.SECURITY_GROUP:
            return {"rules": list(inputs.get("rules", []))}
        if kind is ResourceKind.ROUTE:
            return {"destination": inputs.get("destination", "0.0.0.0/0")}
        if kind is ResourceKind.STORAGE_CLASS:
            return {"name": inputs.get("name", "default"), "provisioner": "sim.csi"}
        return {"ok": True}

    def _register_node(self, inputs: dict) -> None:
        missing = [key for key in _MACHINE_REQUIRED_INPUTS if not inputs.get(key)]
        if missing:
            raise InvalidInputsError(f"machine inputs missing {', '.join(missing)}")
        name = inputs["node_name"]
        if name in self._nodes:
            raise InvalidInputsError(f"node {name!r} already exists")
        self._nodes[name] = NodeRecord(name=name, role=inputs["role"])

    def delete(self, provider_id: str) -> None:
        with self._lock:
            record = self._records.get(provider_id)
            if record is None:
                raise NotFoundError(f"no such resource {provider_id!r}")
            if record.kind is ResourceKind.MACHINE:
                self._remove_node(record.inputs["node_name"])
            elif record.kind is ResourceKind.SECRET_ENTRY:
                self._secrets.pop(record.inputs["name"], None)
            elif record.kind is ResourceKind.DNS_RECORD:
                zone = record.inputs["zone"]
                key = f"{record.inputs['name']}|{record.inputs.get('type', 'CNAME')}"
                if zone in self._dns:
                    self._dns[zone].pop(key, None)
            del self._records[provider_id]
            self._persist()

    def _remove_node(self, name: str) -> None:
        self._nodes.pop(name, None)
        # etcd lives on the control plane; losing the last cp node ends the
        # cluster lifetime and a replacement must bootstrap afresh.
        if self._etcd_bootstrapped and not any(
            node.role == "control_plane" for node in self._nodes.values()
        ):
            self._etcd_bootstrapped = False

    def read(self, provider_id: str) -> ProviderResourceRecord:
        with self._lock:
            record = self._records.get(provider_id)
            if record is None:
                raise NotFoundError(f"no such resource {provider_id!r}")
            seq = self._bump(self._read_seq, record.kind)
            if self._match_fault(record.kind, seq, "drop_observation"):
                raise StaleUnavailableError(f"observation dropped for {provider_id}")
            return ProviderResourceRecord(
                record.provider_id, record.kind, dict(record.inputs), dict(record.outputs), record.state
            )

    def snapshot(self) -> str:
        """Canonical JSON of the whole observable world, minus secrets' values."""
        with self._lock:
            doc = {
                "resources": [
                    {
                        "provider_id": pid,
                        "kind": rec.kind.value,
                        "inputs": rec.inputs,
                        "outputs": rec.outputs,
                        "state": rec.state,
                    }
                    for pid, rec in sorted(self._records.items())
                ],
                "nodes": [
                    {
                        "name": node.name,
                        "role": node.role,
                        "phase": node.phase.value,
                        "labels": node.labels,
                        "taints": node.taints,
                    }
                    for node in sorted(self._nodes.values(), key=lambda n: n.name)
                ],
                "etcd": "bootstrapped" if self._etcd_bootstrapped else "absent",
                "dns": {
                    zone: {key: dict(value) for key, value in sorted(records.items())}
                    for zone, records in sorted(self._dns.items())
                },
                "secrets": sorted(self._secrets),
            }
            return json.dumps(doc, sort_keys=True, indent=2)

    # -- secret manager -----------------------------------------------------

    def secret_put(self, name: str, value: str) -> None:
        if not name:
            raise InvalidInputsError("secret name must be non-empty")
        with self._lock:
            self._secrets[name] = value
            self._persist()

    def secret_get(self, name: str) -> str:
        with self._lock:
            if name not in self._secrets:
                raise NotFoundError(f"no such secret {name!r}")
            return self._secrets[name]

    def secret_delete(self, name: str) -> None:
        with self._lock:
            self._secrets.pop(name, None)
            self._persist()

    # -- hosted DNS ----------------------------------------------------------

    def _dns_upsert_locked(self, zone: str, name: str, rtype: str, value: str) -> str:
        if zone not in self._dns:
            raise ZoneNotFoundError(f"no hosted zone {zone!r}")
        key = f"{name}|{rtype}"
        existing = self._dns[zone].get(key)
        if existing is not None:
            existing["value"] = value
            return existing["record_id"]
        record_id = f"dns-{self._next_dns_id}"
        self._next_dns_id += 1
        self._dns[zone][key] = {"record_id": record_id, "name": name, "type": rtype, "value": value}
        return record_id

    def dns_upsert(self, zone: str, name: str, rtype: str, value: str) -> str:
        with self._lock:
            record_id = self._dns_upsert_locked(zone, name, rtype, value)
            self._persist()
            return record_id

    def dns_delete(self, zone: str, name: str, rtype: str) -> None:
        with self._lock:
            if zone not in self._dns:
                raise ZoneNotFoundError(f"no hosted zone {zone!r}")
            self._dns[zone].pop(f"{name}|{rtype}", None)
            self._persist()

    def dns_get(self, zone: str, name: str, rtype: str) -> dict | None:
        with self._lock:
            if zone not in self._dns:
                raise ZoneNotFoundError(f"no hosted zone {zone!r}")
            record = self._dns[zone].get(f"{name}|{rtype}")
            return dict(record) if record else None

    # -- node registry --------------------------------------------------------

    def list_nodes(self) -> list[NodeRecord]:
        with self._lock:
            self._observe_seq += 1
            if self._match_fault(ResourceKind.MACHINE, self._observe_seq, "drop_observation"):
                raise StaleUnavailableError("node observation dropped")
            return [
                NodeRecord(
                    name=node.name,
                    role=node.role,
                    phase=node.phase,
                    labels=dict(node.labels),
                    taints=list(node.taints),
                    config_applied=node.config_applied,
                )
                for node in sorted(self._nodes.values(), key=lambda n: n.name)
            ]

    def _node(self, name: str) -> NodeRecord:
        node = self._nodes.get(name)
        if node is None:
            raise NotFoundError(f"no such node {name!r}")
        return node

    def apply_node_config(self, name: str) -> None:
        with self._lock:
            self._node(name).config_applied = True
            self._persist()

    def set_node_labels_taints(self, name: str, labels: dict, taints: list) -> None:
        with self._lock:
            node = self._node(name)
            node.labels = dict(labels)
            node.taints = [dict(t) for t in taints]
            self._persist()

    def bootstrap_etcd(self, name: str) -> None:
        with self._lock:
            node = self._node(name)
            if self._etcd_bootstrapped:
                raise AlreadyBootstrappedError("etcd already bootstrapped for this cluster lifetime")
            if node.role != "control_plane":
                raise WrongPhaseError(f"{name} is a {node.role}, not a control plane node")
            if node.phase is not NodePhase.CONFIG_APPLIED:
                raise WrongPhaseError(f"{name} is at {node.phase.value}, expected ConfigApplied")
            self._etcd_bootstrapped = True
            self._etcd_bootstrap_count += 1
            self._persist()

    def etcd_state(self) -> str:
        with self._lock:
            return "bootstrapped" if self._etcd_bootstrapped else "absent"

    @property
    def etcd_bootstrap_count(self) -> int:
        """How many successful bootstraps this world has seen (test oracle)."""
        with self._lock:
            return self._etcd_bootstrap_count

    def machine_id(self, node_name: str) -> str | None:
        with self._lock:
            for pid, record in self._records.items():
                if record.kind is ResourceKind.MACHINE and record.inputs.get("node_name") == node_name:
                    return pid
            return None

    def tick(self) -> None:
        """Advance every node at most one phase along the boot order."""
        with self._lock:
            for node in self._nodes.values():
                if node.phase is NodePhase.PROVISIONED:
                    node.phase = NodePhase.BOOTED
                elif node.phase is NodePhase.BOOTED and node.config_applied:
                    node.phase = NodePhase.CONFIG_APPLIED
                elif node.phase is NodePhase.CONFIG_APPLIED and self._etcd_bootstrapped:
                    node.phase = NodePhase.JOINED
                elif node.phase is NodePhase.JOINED:
                    node.phase = NodePhase.READY
            self._persist()

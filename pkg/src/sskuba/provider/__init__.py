"""Target-environment abstraction and its implementations.

The interface below is what the stack engine and the reconciler program
against. The simulator (:mod:`sskuba.provider.simulator`) is the only
complete backend; aws/azure/vsphere are interface stubs that define the
credential convention (``SSKUBA_<PROVIDER>_TOKEN`` environment variables)
and the method surface, and raise ``NotImplementedError`` when invoked.
"""

from __future__ import annotations

import abc
import enum
from dataclasses import dataclass, field

from .. import SskubaError


class ProviderFault(SskubaError):
    """Base class for errors raised by provider implementations."""


class QuotaExceededError(ProviderFault):
    pass


class InvalidInputsError(ProviderFault):
    pass


class InjectedFaultError(ProviderFault):
    pass


class NotFoundError(ProviderFault):
    pass


class StaleUnavailableError(ProviderFault):
    pass


class ZoneNotFoundError(ProviderFault):
    pass


class AlreadyBootstrappedError(ProviderFault):
    pass


class WrongPhaseError(ProviderFault):
    pass


class MissingCredentialsError(ProviderFault):
    pass


class ResourceKind(str, enum.Enum):
    NETWORK = "Network"
    SUBNET = "Subnet"
    PUBLIC_IP = "PublicIp"
    LOAD_BALANCER = "LoadBalancer"
    SECURITY_GROUP = "SecurityGroup"
    ROUTE = "Route"
    MACHINE = "Machine"
    DNS_RECORD = "DnsRecord"
    SECRET_ENTRY = "SecretEntry"
    STORAGE_CLASS = "StorageClass"


class NodePhase(str, enum.Enum):
    """Boot phases of a simulated node, in strict transition order."""

    PROVISIONED = "Provisioned"
    BOOTED = "Booted"
    CONFIG_APPLIED = "ConfigApplied"
    JOINED = "Joined"
    READY = "Ready"


PHASE_ORDER = (
    NodePhase.PROVISIONED,
    NodePhase.BOOTED,
    NodePhase.CONFIG_APPLIED,
    NodePhase.JOINED,
    NodePhase.READY,
)


@dataclass
class ProviderResourceRecord:
    provider_id: str
    kind: ResourceKind
    inputs: dict
    outputs: dict
    state: str = "ready"  # creating | ready | deleted


@dataclass(frozen=True)
class FaultSpec:
    """Test-harness fault: trigger on the nth operation touching a kind."""

    kind: ResourceKind
    ordinal: int
    behavior: str  # fail_create | delay | drop_observation

    def __post_init__(self):
        if self.ordinal < 1:
            raise ValueError("fault ordinal must be >= 1")
        if self.behavior not in ("fail_create", "delay", "drop_observation"):
            raise ValueError(f"unknown fault behavior {self.behavior!r}")


@dataclass
class NodeRecord:
    """A simulated node as the cluster-facing registry sees it."""

    name: str
    role: str
    phase: NodePhase = NodePhase.PROVISIONED
    labels: dict = field(default_factory=dict)
    taints: list = field(default_factory=list)
    config_applied: bool = False


class Provider(abc.ABC):
    """Everything a target environment must offer the lifecycle engine."""

    name: str = "abstract"

    # Resource lifecycle
    @abc.abstractmethod
    def create(self, kind: ResourceKind, inputs: dict) -> ProviderResourceRecord: ...

    @abc.abstractmethod
    def delete(self, provider_id: str) -> None: ...

    @abc.abstractmethod
    def read(self, provider_id: str) -> ProviderResourceRecord: ...

    @abc.abstractmethod
    def snapshot(self) -> str: ...

    # Secret manager
    @abc.abstractmethod
    def secret_put(self, name: str, value: str) -> None: ...

    @abc.abstractmethod
    def secret_get(self, name: str) -> str: ...

    # Hosted DNS
    @abc.abstractmethod
    def dns_upsert(self, zone: str, name: str, rtype: str, value: str) -> str: ...

    @abc.abstractmethod
    def dns_delete(self, zone: str, name: str, rtype: str) -> None: ...

    @abc.abstractmethod
    def dns_get(self, zone: str, name: str, rtype: str) -> dict | None: ...

    # Cluster-facing node registry (real targets would proxy the node
    # management API; only the simulator implements these)
    @abc.abstractmethod
    def list_nodes(self) -> list[NodeRecord]: ...

    @abc.abstractmethod
    def apply_node_config(self, name: str) -> None: ...

    @abc.abstractmethod
    def set_node_labels_taints(self, name: str, labels: dict, taints: list) -> None: ...

    @abc.abstractmethod
    def bootstrap_etcd(self, name: str) -> None: ...

    @abc.abstractmethod
    def etcd_state(self) -> str: ...

    @abc.abstractmethod
    def machine_id(self, node_name: str) -> str | None: ...

    @abc.abstractmethod
    def tick(self) -> None: ...


def make_provider(name: str, **kwargs) -> Provider:
    """Factory keyed by the manifest's ``target.provider`` value."""
    from .simulator import SimProvider
    from .stubs import AwsProvider, AzureProvider, VsphereProvider

    factories = {
        "sim": SimProvider,
        "aws": AwsProvider,
        "azure": AzureProvider,
        "vsphere": VsphereProvider,
    }
    if name not in factories:
        raise ValueError(f"unknown provider {name!r}")
    return factories[name](**kwargs)


__all__ = [
    "AlreadyBootstrappedError",
    "FaultSpec",
    "InjectedFaultError",
    "InvalidInputsError",
    "MissingCredentialsError",
    "NodePhase",
    "NodeRecord",
    "NotFoundError",
    "PHASE_ORDER",
    "Provider",
    "ProviderFault",
    "ProviderResourceRecord",
    "QuotaExceededError",
    "ResourceKind",
    "StaleUnavailableError",
    "WrongPhaseError",
    "ZoneNotFoundError",
    "make_provider",
]

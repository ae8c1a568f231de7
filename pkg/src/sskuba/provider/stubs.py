"""Interface stubs for real target environments.

These define the provider surface and the credential convention for
aws/azure/vsphere without talking to any cloud API. Credentials come
from ``SSKUBA_<PROVIDER>_TOKEN`` environment variables only, never from
flags or files in the repository: the intent is short-lived tokens
minted outside this tool.
"""

from __future__ import annotations

import os

from . import MissingCredentialsError, NodeRecord, Provider, ProviderResourceRecord, ResourceKind


class CloudStub(Provider):
    name = "stub"
    env_var = ""

    def __init__(self, env=None, **_ignored):
        env = os.environ if env is None else env
        token = env.get(self.env_var, "")
        if not token:
            raise MissingCredentialsError(
                f"{self.name} credentials missing: set {self.env_var} to a short-lived token"
            )
        self._token = token

    def _unimplemented(self, operation: str):
        raise NotImplementedError(
            f"{self.name} provider is an interface stub; {operation} is not implemented"
        )

    def create(self, kind: ResourceKind, inputs: dict) -> ProviderResourceRecord:
        self._unimplemented("create")

    def delete(self, provider_id: str) -> None:
        self._unimplemented("delete")

    def read(self, provider_id: str) -> ProviderResourceRecord:
        self._unimplemented("read")

    def snapshot(self) -> str:
        self._unimplemented("snapshot")

    def secret_put(self, name: str, value: str) -> None:
        self._unimplemented("secret_put")

    def secret_get(self, name: str) -> str:
        self._unimplemented("secret_get")

    def dns_upsert(self, zone: str, name: str, rtype: str, value: str) -> str:
        self._unimplemented("dns_upsert")

    def dns_delete(self, zone: str, name: str, rtype: str) -> None:
        self._unimplemented("dns_delete")

    def dns_get(self, zone: str, name: str, rtype: str) -> dict | None:
        self._unimplemented("dns_get")

    def list_nodes(self) -> list[NodeRecord]:
        self._unimplemented("list_nodes")

    def apply_node_config(self, name: str) -> None:
        self._unimplemented("apply_node_config")

    def set_node_labels_taints(self, name: str, labels: dict, taints: list) -> None:
        self._unimplemented("set_node_labels_taints")

    def bootstrap_etcd(self, name: str) -> None:
        self._unimplemented("bootstrap_etcd")

    def etcd_state(self) -> str:
        self._unimplemented("etcd_state")

    def machine_id(self, node_name: str) -> str | None:
        self._unimplemented("machine_id")

    def tick(self) -> None:
        self._unimplemented("tick")


class AwsProvider(CloudStub):
    name = "aws"
    env_var = "SSKUBA_AWS_TOKEN"


class AzureProvider(CloudStub):
    name = "azure"
    env_var = "SSKUBA_AZURE_TOKEN"


class VsphereProvider(CloudStub):
    name = "vsphere"
    env_var = "SSKUBA_VSPHERE_TOKEN"

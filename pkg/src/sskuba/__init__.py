"""sskuba: ephemeral, immutable-infrastructure cluster lifecycle at desk scale.

A single declarative manifest drives the whole lifecycle: per-cluster PKI
bootstrap, core networking, machine provisioning, etcd bootstrap, gitops
synchronization, and identity-aware access. The only complete provider
backend is a deterministic simulator, so every step is verifiable locally;
aws/azure/vsphere exist as interface stubs.
"""

__version__ = "0.1.0"


class SskubaError(Exception):
    """Base class for all errors raised by this package."""

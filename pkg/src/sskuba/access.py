"""Identity-aware access: join tokens, cluster registry, user credentials.

A desk-scale stand-in for an access-management server. Join tokens are
single-use and expiring; the registry stores only their hashes and
compares in constant time, so a leaked registry file never leaks a
usable token. Redemption is an atomic check-and-set: under concurrent
attempts exactly one succeeds.
"""

from __future__ import annotations

import hmac
import json
import os
import secrets
import threading
from dataclasses import dataclass
from datetime import datetime, timedelta

from . import SskubaError
from .pki import Role, TrustBundle, generate_kubeconfig
from .util import Clock, atomic_write_text, from_iso, sha256_hex, to_iso, utc_now

DEFAULT_TOKEN_TTL = timedelta(minutes=30)


class AccessError(SskubaError):
    pass


class UnknownTokenError(AccessError):
    pass


class TokenExpiredError(AccessError):
    pass


class TokenReusedError(AccessError):
    pass


class ClusterNotRegisteredError(AccessError):
    pass


@dataclass(frozen=True)
class JoinToken:
    value: str  # 32 random bytes, hex encoded; only ever returned at mint
    expires_at: datetime
    used: bool = False


@dataclass(frozen=True)
class ClusterRegistration:
    cluster: str
    endpoint: str
    registered_at: datetime
    agent_id: str


class AccessRegistry:
    """Token and registration store, optionally persisted to one file."""

    def __init__(self, path: str | None = None, clock: Clock | None = None):
        self.path = path
        self.clock = clock or utc_now
        self._lock = threading.Lock()
        self._tokens: list[dict] = []
        self._registrations: dict[str, dict] = {}
        if path is not None and os.path.exists(path):
            self._load()

    def _load(self) -> None:
        with open(self.path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        self._tokens = doc.get("tokens", [])
        self._registrations = doc.get("registrations", {})

    def _persist(self) -> None:
        if self.path is None:
            return
        doc = {"version": 1, "tokens": self._tokens, "registrations": self._registrations}
        atomic_write_text(self.path, json.dumps(doc, sort_keys=True, indent=2), mode=0o600)

    def mint_join_token(self, ttl: timedelta = DEFAULT_TOKEN_TTL) -> JoinToken:
        """Mint a fresh single-use token; only its hash is stored."""
        if ttl <= timedelta(0):
            raise ValueError("token ttl must be positive")
        value = secrets.token_hex(32)
        expires_at = self.clock() + ttl
        with self._lock:
            self._tokens.append(
                {"hash": sha256_hex(value.encode("ascii")), "expires_at": to_iso(expires_at), "used": False}
            )
            self._persist()
        return JoinToken(value=value, expires_at=expires_at)

    def redeem(self, token_value: str, cluster: str, endpoint: str = "") -> ClusterRegistration:
        """Atomically consume a token and register the cluster.

        Exactly one of any number of concurrent redeemers wins; the rest
        see :class:`TokenReusedError`.
        """
        presented = sha256_hex(token_value.encode("utf-8"))
        with self._lock:
            entry = None
            for candidate in self._tokens:
                if hmac.compare_digest(candidate["hash"], presented):
                    entry = candidate
                    break
            if entry is None:
                raise UnknownTokenError("no such join token")
            if entry["used"]:
                raise TokenReusedError("join token already redeemed")
            if self.clock() > from_iso(entry["expires_at"]):
                raise TokenExpiredError("join token expired")
            entry["used"] = True
            registration = {
                "cluster": cluster,
                "endpoint": endpoint,
                "registered_at": to_iso(self.clock()),
                "agent_id": f"agent-{secrets.token_hex(4)}",
            }
            self._registrations[cluster] = registration
            self._persist()
        return self._as_registration(registration)

    @staticmethod
    def _as_registration(doc: dict) -> ClusterRegistration:
        return ClusterRegistration(
            cluster=doc["cluster"],
            endpoint=doc["endpoint"],
            registered_at=from_iso(doc["registered_at"]),
            agent_id=doc["agent_id"],
        )

    def registration(self, cluster: str) -> ClusterRegistration | None:
        with self._lock:
            doc = self._registrations.get(cluster)
            return None if doc is None else self._as_registration(doc)

    def deregister(self, cluster: str) -> None:
        with self._lock:
            self._registrations.pop(cluster, None)
            self._persist()


def issue_user_credential(
    registry: AccessRegistry,
    bundle: TrustBundle,
    identity: str,
    cluster: str,
    ttl: timedelta,
    at: datetime | None = None,
):
    """Short-lived user kubeconfig for a registered cluster.

    Delegates to the PKI module with ``Role.USER``, so the user policy
    ceiling applies; the endpoint comes from the cluster's registration.
    """
    registration = registry.registration(cluster)
    if registration is None:
        raise ClusterNotRegisteredError(f"cluster {cluster!r} is not registered")
    endpoint = registration.endpoint
    if endpoint and "://" not in endpoint:
        endpoint = f"https://{endpoint}:6443"
    return generate_kubeconfig(bundle, identity, ttl, endpoint, role=Role.USER, at=at)

"""Per-cluster trust: CA bootstrap, short-lived certificates, sealing.

Every cluster gets two fresh self-signed CAs (cluster and etcd trust are
separated, mirroring how real Kubernetes bootstraps keep etcd peers in
their own domain) plus an asymmetric sealing keypair. Machine
configurations contain private keys, so they are persisted only inside
sealed blobs; the sealing private key lives in a single operator key file
and nowhere else.

Signatures are Ed25519 with the algorithm recorded in the bundle for
agility. Sealing is hybrid: ephemeral X25519 agreement, HKDF-SHA256, and
AES-256-GCM.

Machine identities must render byte-identically for a fixed bundle, so
the bundle carries a secret seed from which node keys, serial numbers,
and the bootstrap token are derived with HKDF. General issuance
(:func:`issue_cert`) uses fresh entropy instead.
"""

from __future__ import annotations

import base64
import enum
import json
import os
from dataclasses import dataclass
from datetime import datetime, timedelta

import yaml
from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID

from . import SskubaError
from .util import Clock, atomic_write_bytes, from_iso, sha256_hex, to_iso, utc_now

SEAL_MAGIC = b"SSKUBA-SEAL\x00v1\x00\x00"
assert len(SEAL_MAGIC) == 16

_SEAL_INFO = b"sskuba-seal-v1"
_ALGORITHM = "ed25519"


class PkiError(SskubaError):
    pass


class EntropyUnavailableError(PkiError):
    pass


class TtlExceedsPolicyError(PkiError):
    pass


class InvalidSubjectError(PkiError):
    pass


class IntegrityError(PkiError):
    pass


class WrongKeyError(PkiError):
    pass


class Role(enum.Enum):
    CONTROL_PLANE = "control_plane"
    WORKER = "worker"
    GPU_WORKER = "gpu_worker"
    ADMIN = "admin"
    USER = "user"
    # etcd peers chain to the etcd CA rather than the cluster CA.
    ETCD_PEER = "etcd_peer"


_MACHINE_ROLES = (Role.CONTROL_PLANE, Role.WORKER, Role.GPU_WORKER, Role.ETCD_PEER)


@dataclass(frozen=True)
class IssuancePolicy:
    """Maximum (and default) lifetimes per credential class.

    Short-lived by default: machine certs last a day, user certs half a
    day. The break-glass admin credential is deliberately longer because
    it is stored sealed and only unsealed in emergencies. All three are
    configurable.
    """

    machine_ttl: timedelta = timedelta(hours=24)
    user_ttl: timedelta = timedelta(hours=12)
    admin_ttl: timedelta = timedelta(hours=720)

    def max_ttl_for(self, role: Role) -> timedelta:
        if role in _MACHINE_ROLES:
            return self.machine_ttl
        if role is Role.ADMIN:
            return self.admin_ttl
        return self.user_ttl


@dataclass(frozen=True)
class CertificateWithKey:
    cert: x509.Certificate
    key: Ed25519PrivateKey

    @property
    def cert_pem(self) -> str:
        return self.cert.public_bytes(serialization.Encoding.PEM).decode("ascii")

    @property
    def key_pem(self) -> str:
        return self.key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        ).decode("ascii")


@dataclass(frozen=True)
class IssuedCertificate(CertificateWithKey):
    role: Role = Role.USER

    @property
    def subject(self) -> str:
        return self.cert.subject.get_attributes_for_oid(NameOID.COMMON_NAME)[0].value


@dataclass(frozen=True)
class VerifyReport:
    valid: bool
    reason: str | None = None


@dataclass
class TrustBundle:
    """All trust material for one cluster.

    ``seal_private`` is present in memory right after creation or after
    the operator key file has been loaded; it is never part of the
    bundle's own serialized form.
    """

    cluster_id: str
    created_at: datetime
    algorithm: str
    cluster_ca: CertificateWithKey
    etcd_ca: CertificateWithKey
    seal_public: X25519PublicKey
    node_secret_seed: bytes
    policy: IssuancePolicy
    seal_private: X25519PrivateKey | None = None

    @property
    def seal_key_id(self) -> str:
        return _key_id(self.seal_public)

    def bootstrap_token(self) -> str:
        """Deterministic kubeadm-style bootstrap token for this cluster."""
        raw = _hkdf(self.node_secret_seed, b"bootstrap-token", 12)
        return f"{raw[:3].hex()}.{raw[3:].hex()}"

    def to_json(self) -> str:
        doc = {
            "version": 1,
            "cluster_id": self.cluster_id,
            "created_at": to_iso(self.created_at),
            "algorithm": self.algorithm,
            "policy": {
                "machine_ttl_s": int(self.policy.machine_ttl.total_seconds()),
                "user_ttl_s": int(self.policy.user_ttl.total_seconds()),
                "admin_ttl_s": int(self.policy.admin_ttl.total_seconds()),
            },
            "cluster_ca": {"cert_pem": self.cluster_ca.cert_pem, "key_pem": self.cluster_ca.key_pem},
            "etcd_ca": {"cert_pem": self.etcd_ca.cert_pem, "key_pem": self.etcd_ca.key_pem},
            "seal_public": _raw_public_hex(self.seal_public),
            "node_secret_seed": self.node_secret_seed.hex(),
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str, seal_private: X25519PrivateKey | None = None) -> "TrustBundle":
        doc = json.loads(text)
        policy = IssuancePolicy(
            machine_ttl=timedelta(seconds=doc["policy"]["machine_ttl_s"]),
            user_ttl=timedelta(seconds=doc["policy"]["user_ttl_s"]),
            admin_ttl=timedelta(seconds=doc["policy"]["admin_ttl_s"]),
        )
        return cls(
            cluster_id=doc["cluster_id"],
            created_at=from_iso(doc["created_at"]),
            algorithm=doc["algorithm"],
            cluster_ca=_load_ca(doc["cluster_ca"]),
            etcd_ca=_load_ca(doc["etcd_ca"]),
            seal_public=X25519PublicKey.from_public_bytes(bytes.fromhex(doc["seal_public"])),
            node_secret_seed=bytes.fromhex(doc["node_secret_seed"]),
            policy=policy,
            seal_private=seal_private,
        )


@dataclass(frozen=True)
class SealedBlob:
    recipient_key_id: str
    ephemeral_public: bytes
    nonce: bytes
    ciphertext: bytes  # AEAD output, integrity tag included

    def to_bytes(self) -> bytes:
        return (
            SEAL_MAGIC
            + bytes.fromhex(self.recipient_key_id)
            + self.ephemeral_public
            + self.nonce
            + self.ciphertext
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedBlob":
        if len(data) < 16 + 32 + 32 + 12 or data[:16] != SEAL_MAGIC:
            raise IntegrityError("not a sealed blob (bad magic header)")
        return cls(
            recipient_key_id=data[16:48].hex(),
            ephemeral_public=data[48:80],
            nonce=data[80:92],
            ciphertext=data[92:],
        )


@dataclass(frozen=True)
class KubeconfigDocument:
    cluster_name: str
    endpoint: str
    identity: str
    ca_pem: str
    client_cert_pem: str
    client_key_pem: str

    def to_yaml(self) -> str:
        b64 = lambda pem: base64.b64encode(pem.encode("ascii")).decode("ascii")
        context = f"{self.identity}@{self.cluster_name}"
        doc = {
            "apiVersion": "v1",
            "kind": "Config",
            "clusters": [
                {
                    "name": self.cluster_name,
                    "cluster": {
                        "server": self.endpoint,
                        "certificate-authority-data": b64(self.ca_pem),
                    },
                }
            ],
            "users": [
                {
                    "name": self.identity,
                    "user": {
                        "client-certificate-data": b64(self.client_cert_pem),
                        "client-key-data": b64(self.client_key_pem),
                    },
                }
            ],
            "contexts": [{"name": context, "context": {"cluster": self.cluster_name, "user": self.identity}}],
            "current-context": context,
        }
        return yaml.safe_dump(doc, sort_keys=False, default_flow_style=False)


def _key_id(public: X25519PublicKey) -> str:
    return sha256_hex(public.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw))


def _raw_public_hex(public: X25519PublicKey) -> str:
    return public.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw).hex()


def _load_ca(doc: dict) -> CertificateWithKey:
    cert = x509.load_pem_x509_certificate(doc["cert_pem"].encode("ascii"))
    key = serialization.load_pem_private_key(doc["key_pem"].encode("ascii"), password=None)
    return CertificateWithKey(cert=cert, key=key)


def _hkdf(seed: bytes, info: bytes, length: int) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=None, info=info).derive(seed)


def _entropy_bytes(entropy, n: int) -> bytes:
    try:
        data = entropy(n)
    except Exception as exc:
        raise EntropyUnavailableError(str(exc)) from exc
    if not isinstance(data, bytes) or len(data) != n:
        raise EntropyUnavailableError(f"entropy source returned {len(data) if isinstance(data, bytes) else type(data)} for {n} bytes")
    return data


def _ca_name(common_name: str, cluster_id: str) -> x509.Name:
    return x509.Name(
        [
            x509.NameAttribute(NameOID.COMMON_NAME, common_name),
            x509.NameAttribute(NameOID.ORGANIZATION_NAME, cluster_id),
        ]
    )


def _make_ca(common_name: str, cluster_id: str, key: Ed25519PrivateKey, at: datetime, serial: int) -> CertificateWithKey:
    name = _ca_name(common_name, cluster_id)
    cert = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(serial)
        .not_valid_before(at)
        .not_valid_after(at + timedelta(days=3650))
        .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
        .add_extension(
            x509.KeyUsage(
                digital_signature=True,
                content_commitment=False,
                key_encipherment=False,
                data_encipherment=False,
                key_agreement=False,
                key_cert_sign=True,
                crl_sign=True,
                encipher_only=False,
                decipher_only=False,
            ),
            critical=True,
        )
        .add_extension(x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False)
        .sign(key, None)
    )
    return CertificateWithKey(cert=cert, key=key)


def new_trust_bundle(
    cluster_id: str,
    clock: Clock | None = None,
    entropy=None,
    policy: IssuancePolicy | None = None,
) -> TrustBundle:
    """Bootstrap fresh trust for a cluster.

    Repeated calls always produce distinct key material. ``clock`` and
    ``entropy`` are injectable so tests can make bundles reproducible;
    production callers leave them at the defaults.
    """
    if not cluster_id:
        raise InvalidSubjectError("cluster_id must be non-empty")
    clock = clock or utc_now
    entropy = entropy or os.urandom
    policy = policy or IssuancePolicy()
    at = clock()

    cluster_key = Ed25519PrivateKey.from_private_bytes(_entropy_bytes(entropy, 32))
    etcd_key = Ed25519PrivateKey.from_private_bytes(_entropy_bytes(entropy, 32))
    seal_private = X25519PrivateKey.from_private_bytes(_entropy_bytes(entropy, 32))
    serial_a = int.from_bytes(_entropy_bytes(entropy, 16), "big") | 1
    serial_b = int.from_bytes(_entropy_bytes(entropy, 16), "big") | 1
    seed = _entropy_bytes(entropy, 32)

    return TrustBundle(
        cluster_id=cluster_id,
        created_at=at,
        algorithm=_ALGORITHM,
        cluster_ca=_make_ca("sskuba cluster ca", cluster_id, cluster_key, at, serial_a),
        etcd_ca=_make_ca("sskuba etcd ca", cluster_id, etcd_key, at, serial_b),
        seal_public=seal_private.public_key(),
        node_secret_seed=seed,
        policy=policy,
        seal_private=seal_private,
    )


def _issuing_ca(bundle: TrustBundle, role: Role) -> CertificateWithKey:
    return bundle.etcd_ca if role is Role.ETCD_PEER else bundle.cluster_ca


def _build_cert(
    bundle: TrustBundle,
    subject: str,
    role: Role,
    ttl: timedelta,
    at: datetime,
    key: Ed25519PrivateKey,
    serial: int,
) -> IssuedCertificate:
    if not subject or not subject.strip():
        raise InvalidSubjectError("subject must be non-empty")
    if ttl <= timedelta(0) or ttl > bundle.policy.max_ttl_for(role):
        raise TtlExceedsPolicyError(
            f"ttl {ttl} outside (0, {bundle.policy.max_ttl_for(role)}] for role {role.value}"
        )
    ca = _issuing_ca(bundle, role)
    ca_ski = ca.cert.extensions.get_extension_for_class(x509.SubjectKeyIdentifier).value
    cert = (
        x509.CertificateBuilder()
        .subject_name(
            x509.Name(
                [
                    x509.NameAttribute(NameOID.COMMON_NAME, subject),
                    x509.NameAttribute(NameOID.ORGANIZATIONAL_UNIT_NAME, role.value),
                    x509.NameAttribute(NameOID.ORGANIZATION_NAME, bundle.cluster_id),
                ]
            )
        )
        .issuer_name(ca.cert.subject)
        .public_key(key.public_key())
        .serial_number(serial)
        .not_valid_before(at)
        .not_valid_after(at + ttl)
        .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
        .add_extension(
            x509.KeyUsage(
                digital_signature=True,
                content_commitment=False,
                key_encipherment=False,
                data_encipherment=False,
                key_agreement=False,
                key_cert_sign=False,
                crl_sign=False,
                encipher_only=False,
                decipher_only=False,
            ),
            critical=True,
        )
        .add_extension(
            x509.ExtendedKeyUsage([ExtendedKeyUsageOID.CLIENT_AUTH, ExtendedKeyUsageOID.SERVER_AUTH]),
            critical=False,
        )
        .add_extension(x509.AuthorityKeyIdentifier.from_issuer_subject_key_identifier(ca_ski), critical=False)
        .add_extension(x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False)
        .sign(ca.key, None)
    )
    return IssuedCertificate(cert=cert, key=key, role=role)


def issue_cert(
    bundle: TrustBundle,
    subject: str,
    role: Role,
    ttl: timedelta,
    at: datetime | None = None,
    entropy=None,
) -> IssuedCertificate:
    """Issue a short-lived certificate chained to the appropriate CA."""
    entropy = entropy or os.urandom
    key = Ed25519PrivateKey.from_private_bytes(_entropy_bytes(entropy, 32))
    serial = int.from_bytes(_entropy_bytes(entropy, 16), "big") | 1
    return _build_cert(bundle, subject, role, ttl, at or bundle.created_at, key, serial)


def derive_cert(bundle: TrustBundle, subject: str, role: Role, ttl: timedelta) -> IssuedCertificate:
    """Reproducible machine identity derived from the bundle's secret seed.

    Two calls with the same arguments return byte-identical certificates
    and keys, which is what makes machine-config rendering a pure function
    of its inputs. Timestamps come from the bundle's creation instant.
    """
    info = f"{subject}/{role.value}".encode("utf-8")
    key = Ed25519PrivateKey.from_private_bytes(_hkdf(bundle.node_secret_seed, b"key/" + info, 32))
    serial = int.from_bytes(_hkdf(bundle.node_secret_seed, b"serial/" + info, 16), "big") | 1
    return _build_cert(bundle, subject, role, ttl, bundle.created_at, key, serial)


def verify_chain(cert: x509.Certificate, bundle: TrustBundle, at: datetime | None = None) -> VerifyReport:
    """Check a certificate against the bundle's CAs at a point in time."""
    at = at or utc_now()
    try:
        aki = cert.extensions.get_extension_for_class(x509.AuthorityKeyIdentifier).value.key_identifier
    except x509.ExtensionNotFound:
        return VerifyReport(False, "unknown issuer")

    issuer = None
    for ca in (bundle.cluster_ca, bundle.etcd_ca):
        ski = ca.cert.extensions.get_extension_for_class(x509.SubjectKeyIdentifier).value.key_identifier
        if ski == aki:
            issuer = ca
            break
    if issuer is None:
        return VerifyReport(False, "unknown issuer")

    public = issuer.cert.public_key()
    assert isinstance(public, Ed25519PublicKey)
    try:
        public.verify(cert.signature, cert.tbs_certificate_bytes)
    except InvalidSignature:
        return VerifyReport(False, "bad signature")

    not_before = cert.not_valid_before_utc
    not_after = cert.not_valid_after_utc
    if at < not_before:
        return VerifyReport(False, "not yet valid")
    if at > not_after:
        return VerifyReport(False, "expired")
    return VerifyReport(True)


def seal(plaintext: bytes, recipient: X25519PublicKey, entropy=None) -> SealedBlob:
    """Encrypt to a recipient public key (ephemeral ECDH + AEAD)."""
    entropy = entropy or os.urandom
    eph = X25519PrivateKey.from_private_bytes(_entropy_bytes(entropy, 32))
    eph_pub = eph.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    recip_raw = recipient.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    key = _hkdf(eph.exchange(recipient), _SEAL_INFO + eph_pub + recip_raw, 32)
    nonce = _entropy_bytes(entropy, 12)
    key_id = _key_id(recipient)
    ciphertext = AESGCM(key).encrypt(nonce, plaintext, key_id.encode("ascii"))
    return SealedBlob(recipient_key_id=key_id, ephemeral_public=eph_pub, nonce=nonce, ciphertext=ciphertext)


def unseal(blob: SealedBlob, private: X25519PrivateKey) -> bytes:
    """Invert :func:`seal`. Wrong key and tampering are distinct errors."""
    if _key_id(private.public_key()) != blob.recipient_key_id:
        raise WrongKeyError("sealed for a different recipient key")
    eph_pub = X25519PublicKey.from_public_bytes(blob.ephemeral_public)
    recip_raw = private.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    key = _hkdf(private.exchange(eph_pub), _SEAL_INFO + blob.ephemeral_public + recip_raw, 32)
    try:
        return AESGCM(key).decrypt(blob.nonce, blob.ciphertext, blob.recipient_key_id.encode("ascii"))
    except Exception as exc:
        raise IntegrityError("sealed blob failed integrity check") from exc


def generate_kubeconfig(
    bundle: TrustBundle,
    identity: str,
    ttl: timedelta,
    endpoint: str,
    role: Role = Role.ADMIN,
    at: datetime | None = None,
) -> KubeconfigDocument:
    """Produce a kubeconfig with an embedded short-lived client certificate.

    The default role is the break-glass admin; the access module passes
    ``Role.USER`` for ordinary user credentials.
    """
    if not identity or not identity.strip():
        raise InvalidSubjectError("identity must be non-empty")
    issued = issue_cert(bundle, identity, role, ttl, at=at or utc_now())
    return KubeconfigDocument(
        cluster_name=bundle.cluster_id,
        endpoint=endpoint,
        identity=identity,
        ca_pem=bundle.cluster_ca.cert_pem,
        client_cert_pem=issued.cert_pem,
        client_key_pem=issued.key_pem,
    )


def save_seal_private_key(path: str, key: X25519PrivateKey) -> None:
    """Write the operator key file (owner read/write only)."""
    pem = key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )
    atomic_write_bytes(path, pem, mode=0o600)


def load_seal_private_key(path: str) -> X25519PrivateKey:
    with open(path, "rb") as fh:
        key = serialization.load_pem_private_key(fh.read(), password=None)
    if not isinstance(key, X25519PrivateKey):
        raise WrongKeyError(f"{path} does not contain a sealing private key")
    return key


def write_sealed_bundle(bundle: TrustBundle, path: str, entropy=None) -> None:
    """Persist the trust bundle sealed to its own sealing key."""
    blob = seal(bundle.to_json().encode("utf-8"), bundle.seal_public, entropy=entropy)
    atomic_write_bytes(path, blob.to_bytes(), mode=0o600)


def load_sealed_bundle(path: str, seal_private: X25519PrivateKey) -> TrustBundle:
    with open(path, "rb") as fh:
        blob = SealedBlob.from_bytes(fh.read())
    text = unseal(blob, seal_private).decode("utf-8")
    return TrustBundle.from_json(text, seal_private=seal_private)

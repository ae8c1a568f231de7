"""Infrastructure-as-code engine: resource graphs, plans, checkpoints.

Each cluster is an isolated stack. The desired resource graph is a pure
function of the manifest; planning diffs it against the persisted
checkpoint. Replacement semantics are immutable-infrastructure style:
any change to the target (counts, machine types, provider, region) plans
a full stack replacement, never an in-place update. A manifest change
confined to the gitops section produces an empty plan flagged
resync-only.

Execution persists the checkpoint after every step, so a crash between
any two steps leaves a resumable state, and re-planning picks up exactly
the remaining work. Deletes run in reverse dependency order; creates in
topological order with lexicographic URN tie-breaking for determinism.
"""

from __future__ import annotations

import heapq
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

from . import SskubaError
from .machineconfig import cluster_endpoint, node_name
from .manifest import ClusterManifest
from .pki import Role, TrustBundle
from .provider import NotFoundError, Provider, ResourceKind
from .util import atomic_write_text, canonical_json, sha256_hex, to_iso, utc_now

CHECKPOINT_VERSION = 1

GPU_IMAGE = "talos-v1-nvidia"
BASE_IMAGE = "talos-v1"


class StackError(SskubaError):
    pass


class CheckpointCorruptError(StackError):
    pass


class StackLockedError(StackError):
    pass


class ProviderError(StackError):
    """A plan step failed; completed steps are already checkpointed."""

    def __init__(self, urn: str, cause: Exception):
        self.urn = urn
        self.cause = cause
        super().__init__(f"{urn}: {cause}")


class ExecutionInterrupted(StackError):
    """Execution stopped at an injected interruption point (crash test)."""

    def __init__(self, completed_steps: int):
        self.completed_steps = completed_steps
        super().__init__(f"interrupted after {completed_steps} steps")


@dataclass(frozen=True)
class ResourceSpec:
    urn: str
    kind: ResourceKind
    inputs: dict
    depends_on: tuple[str, ...] = ()


@dataclass
class CheckpointRecord:
    urn: str
    kind: ResourceKind
    provider_id: str
    input_hash: str
    outputs: dict
    depends_on: tuple[str, ...]
    created_at: str


@dataclass
class StackCheckpoint:
    stack_name: str
    spec_hash: str = ""
    seal_public_key: str = ""
    resources: dict[str, CheckpointRecord] = field(default_factory=dict)

    def copy(self) -> "StackCheckpoint":
        return StackCheckpoint(
            stack_name=self.stack_name,
            spec_hash=self.spec_hash,
            seal_public_key=self.seal_public_key,
            resources={urn: replace(rec) for urn, rec in self.resources.items()},
        )

    def to_json(self) -> str:
        doc = {
            "version": CHECKPOINT_VERSION,
            "stack_name": self.stack_name,
            "spec_hash": self.spec_hash,
            "seal_public_key": self.seal_public_key,
            "resources": [
                {
                    "urn": rec.urn,
                    "kind": rec.kind.value,
                    "provider_id": rec.provider_id,
                    "input_hash": rec.input_hash,
                    "outputs": rec.outputs,
                    "depends_on": list(rec.depends_on),
                    "created_at": rec.created_at,
                }
                for _, rec in sorted(self.resources.items())
            ],
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "StackCheckpoint":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CheckpointCorruptError(f"checkpoint is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
            raise CheckpointCorruptError(f"unsupported checkpoint version {doc.get('version')!r}")
        cp = cls(
            stack_name=doc["stack_name"],
            spec_hash=doc.get("spec_hash", ""),
            seal_public_key=doc.get("seal_public_key", ""),
        )
        for entry in doc.get("resources", []):
            urn = entry["urn"]
            if urn in cp.resources:
                raise CheckpointCorruptError(f"duplicate resource record for {urn}")
            cp.resources[urn] = CheckpointRecord(
                urn=urn,
                kind=ResourceKind(entry["kind"]),
                provider_id=entry["provider_id"],
                input_hash=entry["input_hash"],
                outputs=entry["outputs"],
                depends_on=tuple(entry.get("depends_on", ())),
                created_at=entry["created_at"],
            )
        return cp


@dataclass(frozen=True)
class PlanStep:
    action: str  # create | delete | replace
    urn: str
    reason: str


@dataclass
class Plan:
    steps: list[PlanStep]
    specs: dict[str, ResourceSpec]
    new_spec_hash: str
    resync_only: bool = False

    @property
    def creates(self) -> int:
        return sum(1 for s in self.steps if s.action == "create")

    @property
    def deletes(self) -> int:
        return sum(1 for s in self.steps if s.action == "delete")

    def summary(self) -> dict:
        return {"create": self.creates, "delete": self.deletes, "resync_only": self.resync_only}


def urn_for(stack: str, kind: ResourceKind, name: str) -> str:
    return f"urn:sskuba:{stack}:{kind.value}:{name}"


def input_hash(inputs: dict) -> str:
    return sha256_hex(canonical_json(inputs).encode("utf-8"))


def sealed_config_ref(node: str) -> str:
    return f"{node}.machineconfig.sealed"


def desired_resources(m: ClusterManifest, bundle: TrustBundle | None = None) -> list[ResourceSpec]:
    """Compute the full resource graph for a manifest.

    Inputs deliberately contain no key material, so plans stay stable
    across re-keying and crash resume; machines reference their sealed
    configuration by file name. ``bundle`` is accepted for call-site
    symmetry with execution but does not shape the graph.
    """
    del bundle
    stack = m.name
    endpoint = cluster_endpoint(m)

    net = urn_for(stack, ResourceKind.NETWORK, "net")
    subnet = urn_for(stack, ResourceKind.SUBNET, "nodes")
    public_ip = urn_for(stack, ResourceKind.PUBLIC_IP, "ingress")
    load_balancer = urn_for(stack, ResourceKind.LOAD_BALANCER, "ingress")
    security_group = urn_for(stack, ResourceKind.SECURITY_GROUP, "cluster")

    specs = [
        ResourceSpec(net, ResourceKind.NETWORK,
                     {"provider": m.provider, "region": m.region, "cidr": "10.0.0.0/16"}),
        ResourceSpec(subnet, ResourceKind.SUBNET, {"cidr": "10.0.1.0/24"}, (net,)),
        ResourceSpec(public_ip, ResourceKind.PUBLIC_IP, {}, (net,)),
        ResourceSpec(load_balancer, ResourceKind.LOAD_BALANCER,
                     {"listen_port": 6443}, (subnet, public_ip)),
        ResourceSpec(security_group, ResourceKind.SECURITY_GROUP,
                     {"rules": ["allow:6443", "allow:50000"]}, (net,)),
        ResourceSpec(urn_for(stack, ResourceKind.ROUTE, "default"), ResourceKind.ROUTE,
                     {"destination": "0.0.0.0/0"}, (net, subnet)),
        ResourceSpec(urn_for(stack, ResourceKind.STORAGE_CLASS, "default"), ResourceKind.STORAGE_CLASS,
                     {"name": "default", "provider": m.provider}),
        ResourceSpec(urn_for(stack, ResourceKind.SECRET_ENTRY, "registry-token"), ResourceKind.SECRET_ENTRY,
                     {"name": f"{stack}-registry-token"}),
    ]

    pools = (
        (Role.CONTROL_PLANE, m.control_plane, BASE_IMAGE),
        (Role.WORKER, m.workers, BASE_IMAGE),
        (Role.GPU_WORKER, m.gpu_workers, GPU_IMAGE),
    )
    for role, pool, image in pools:
        for index in range(pool.count):
            node = node_name(stack, role, index)
            specs.append(
                ResourceSpec(
                    urn_for(stack, ResourceKind.MACHINE, node),
                    ResourceKind.MACHINE,
                    {
                        "node_name": node,
                        "role": role.value,
                        "image": image,
                        "machine_type": pool.machine_type,
                        "cluster_endpoint": endpoint,
                        "config_ref": sealed_config_ref(node),
                    },
                    (subnet, security_group),
                )
            )
    return specs


def topo_order(nodes: dict[str, tuple[str, ...]]) -> list[str]:
    """Kahn's algorithm with a lexicographic heap for deterministic ties."""
    indegree = {urn: 0 for urn in nodes}
    dependents: dict[str, list[str]] = {urn: [] for urn in nodes}
    for urn, deps in nodes.items():
        for dep in deps:
            if dep not in nodes:
                raise StackError(f"{urn} depends on unknown resource {dep}")
            indegree[urn] += 1
            dependents[dep].append(urn)
    ready = [urn for urn, degree in indegree.items() if degree == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        urn = heapq.heappop(ready)
        order.append(urn)
        for dependent in dependents[urn]:
            indegree[dependent] -= 1
            if indegree[dependent] == 0:
                heapq.heappush(ready, dependent)
    if len(order) != len(nodes):
        raise StackError("dependency cycle in resource graph")
    return order


def plan(desired: list[ResourceSpec], cp: StackCheckpoint, spec_hash: str) -> Plan:
    """Diff the desired graph against the checkpoint.

    Same spec hash means resume: only resources missing from the
    checkpoint are created. A different spec hash with any infrastructure
    difference triggers full replacement; with none, the plan is empty
    and flagged resync-only (the change was confined to gitops).
    """
    specs = {spec.urn: spec for spec in desired}
    if len(specs) != len(desired):
        raise StackError("duplicate URNs in desired resources")
    graph = {spec.urn: spec.depends_on for spec in desired}
    create_order = topo_order(graph)

    def full_creates(reason: str) -> list[PlanStep]:
        return [PlanStep("create", urn, reason) for urn in create_order]

    def full_deletes(reason: str) -> list[PlanStep]:
        existing = {urn: rec.depends_on for urn, rec in cp.resources.items()}
        return [PlanStep("delete", urn, reason) for urn in reversed(topo_order(existing))]

    if not cp.resources:
        return Plan(full_creates("new resource"), specs, spec_hash)

    same_manifest = cp.spec_hash == spec_hash
    hashes_match = all(
        urn in specs and input_hash(specs[urn].inputs) == rec.input_hash
        for urn, rec in cp.resources.items()
    )

    if same_manifest and hashes_match:
        steps = [
            PlanStep("create", urn, "resume: missing from checkpoint")
            for urn in create_order
            if urn not in cp.resources
        ]
        return Plan(steps, specs, spec_hash)

    if hashes_match and set(cp.resources) == set(specs):
        # Manifest changed but no infrastructure input did: gitops-only.
        return Plan([], specs, spec_hash, resync_only=True)

    reason = "target changed: full stack replacement"
    return Plan(full_deletes(reason) + full_creates(reason), specs, spec_hash)


class CheckpointStore:
    """Loads and persists one stack's checkpoint file."""

    def __init__(self, stack_dir: str, stack_name: str):
        self.stack_dir = stack_dir
        self.stack_name = stack_name
        self.path = os.path.join(stack_dir, f"{stack_name}.checkpoint.json")

    def exists(self) -> bool:
        return os.path.exists(self.path)

    def load(self) -> StackCheckpoint:
        if not self.exists():
            return StackCheckpoint(stack_name=self.stack_name)
        with open(self.path, "r", encoding="utf-8") as fh:
            return StackCheckpoint.from_json(fh.read())

    def save(self, cp: StackCheckpoint) -> None:
        atomic_write_text(self.path, cp.to_json())

    def remove(self) -> None:
        if self.exists():
            os.unlink(self.path)


class StackLock:
    """Exclusive per-stack lock file; one writer per stack, ever."""

    def __init__(self, stack_dir: str, stack_name: str):
        self.path = os.path.join(stack_dir, f"{stack_name}.lock")
        self._fd: int | None = None

    def __enter__(self) -> "StackLock":
        os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StackLockedError(
                f"stack is locked by another process (remove {self.path} if stale)"
            ) from None
        os.write(self._fd, str(os.getpid()).encode("ascii"))
        return self

    def __exit__(self, *exc) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass


def _apply_step(
    step: PlanStep,
    p: Plan,
    provider: Provider,
    cp: StackCheckpoint,
    warn,
) -> None:
    if step.action == "create":
        spec = p.specs[step.urn]
        record = provider.create(spec.kind, spec.inputs)
        cp.resources[step.urn] = CheckpointRecord(
            urn=step.urn,
            kind=spec.kind,
            provider_id=record.provider_id,
            input_hash=input_hash(spec.inputs),
            outputs=record.outputs,
            depends_on=spec.depends_on,
            created_at=to_iso(utc_now()),
        )
    elif step.action == "delete":
        record = cp.resources.get(step.urn)
        if record is not None:
            try:
                provider.delete(record.provider_id)
            except NotFoundError:
                warn(f"{step.urn}: already deleted in provider, continuing")
            cp.resources.pop(step.urn, None)
    else:
        raise StackError(f"unknown plan action {step.action!r}")


def execute(
    p: Plan,
    provider: Provider,
    cp: StackCheckpoint,
    store: CheckpointStore | None = None,
    on_step=None,
    warn=None,
    interrupt_after: int | None = None,
    parallel: int = 1,
) -> StackCheckpoint:
    """Run a plan, checkpointing after every step.

    On a step failure the checkpoint reflects all completed steps and a
    :class:`ProviderError` is raised; re-planning then yields exactly the
    remaining work. ``interrupt_after`` simulates a process kill after
    the given number of completed steps. An empty plan touches nothing,
    not even the checkpoint file.
    """
    warn = warn or (lambda message: None)
    on_step = on_step or (lambda step, index, total: None)
    if not p.steps:
        return cp

    cp = cp.copy()
    completed = 0

    def finish_step(step: PlanStep, index: int) -> None:
        nonlocal completed
        # The new manifest hash is recorded once the delete phase is over,
        # so a crash mid-replacement still re-plans the remaining deletes.
        if step.action == "create":
            cp.spec_hash = p.new_spec_hash
        if store is not None:
            store.save(cp)
        completed += 1
        on_step(step, index, len(p.steps))
        if interrupt_after is not None and completed >= interrupt_after:
            raise ExecutionInterrupted(completed)

    if parallel <= 1:
        for index, step in enumerate(p.steps):
            try:
                _apply_step(step, p, provider, cp, warn)
            except ExecutionInterrupted:
                raise
            except Exception as exc:
                if store is not None:
                    store.save(cp)
                raise ProviderError(step.urn, exc) from exc
            finish_step(step, index)
        return cp

    return _execute_parallel(p, provider, cp, store, finish_step, warn, parallel)


def _execute_parallel(p, provider, cp, store, finish_step, warn, width):
    # Wave execution: the provider calls for all ready steps run
    # concurrently up to the configured width; checkpoint mutation stays
    # serialized in deterministic (lexicographic) batch order. Deletes
    # keep the plan's serial semantics and run before any create wave.
    index = 0
    for step in [s for s in p.steps if s.action == "delete"]:
        try:
            _apply_step(step, p, provider, cp, warn)
        except Exception as exc:
            if store is not None:
                store.save(cp)
            raise ProviderError(step.urn, exc) from exc
        finish_step(step, index)
        index += 1

    remaining = {s.urn: s for s in p.steps if s.action == "create"}
    done: set[str] = set(cp.resources)
    while remaining:
        ready = sorted(
            (
                step
                for step in remaining.values()
                if all(dep in done for dep in p.specs[step.urn].depends_on)
            ),
            key=lambda s: s.urn,
        )
        if not ready:
            raise StackError("plan deadlock: no ready steps")
        batch = ready[:width]
        with ThreadPoolExecutor(max_workers=width) as pool:
            futures = [
                (step, pool.submit(provider.create, p.specs[step.urn].kind, p.specs[step.urn].inputs))
                for step in batch
            ]
        for step, future in futures:
            exc = future.exception()
            if exc is not None:
                if store is not None:
                    store.save(cp)
                raise ProviderError(step.urn, exc) from exc
            record = future.result()
            spec = p.specs[step.urn]
            cp.resources[step.urn] = CheckpointRecord(
                urn=step.urn,
                kind=spec.kind,
                provider_id=record.provider_id,
                input_hash=input_hash(spec.inputs),
                outputs=record.outputs,
                depends_on=spec.depends_on,
                created_at=to_iso(utc_now()),
            )
            finish_step(step, index)
            index += 1
            done.add(step.urn)
            remaining.pop(step.urn)
    return cp


def destroy(
    cp: StackCheckpoint,
    provider: Provider,
    store: CheckpointStore | None = None,
    on_step=None,
    warn=None,
) -> StackCheckpoint:
    """Delete everything in reverse dependency order.

    Resources the provider already forgot are treated as deleted (with a
    warning). Partial progress is persisted, so a failed destroy can be
    re-run.
    """
    warn = warn or (lambda message: None)
    on_step = on_step or (lambda step, index, total: None)
    cp = cp.copy()
    graph = {urn: rec.depends_on for urn, rec in cp.resources.items()}
    order = list(reversed(topo_order(graph)))
    for index, urn in enumerate(order):
        record = cp.resources[urn]
        try:
            provider.delete(record.provider_id)
        except NotFoundError:
            warn(f"{urn}: already deleted in provider, continuing")
        except Exception as exc:
            if store is not None:
                store.save(cp)
            raise ProviderError(urn, exc) from exc
        cp.resources.pop(urn)
        if store is not None:
            store.save(cp)
        on_step(PlanStep("delete", urn, "destroy"), index, len(order))
    cp.spec_hash = ""
    if store is not None and order:
        store.save(cp)
    return cp


def refresh_machine_records(cp: StackCheckpoint, provider: Provider) -> bool:
    """Re-point Machine records at the provider's current machines.

    Self-healing recreates nodes outside the plan/execute path, which
    leaves checkpoint records holding dead provider ids. Refreshing keeps
    destroy honest. Returns True when anything changed.
    """
    changed = False
    for record in cp.resources.values():
        if record.kind is not ResourceKind.MACHINE:
            continue
        node = record.outputs.get("node_name")
        if not node:
            continue
        current = provider.machine_id(node)
        if current is not None and current != record.provider_id:
            record.provider_id = current
            changed = True
    return changed

"""Reconciliation engine over simulated nodes.

Three views of the world: the desired state (from the manifest), the
actual state (owned by the provider simulator), and the observed state,
which may be stale or incomplete but never fabricates nodes.
:func:`reconcile_step` is a pure function from (desired, observed) to a
minimal action list; the loop in :func:`run_to_convergence` executes
those actions, advances simulated time one tick per round, and stops at
the fixed point.

etcd is bootstrapped exactly once per cluster lifetime. A stale
observation can cause the action to be issued twice; the benign
``AlreadyBootstrapped`` answer from the provider is swallowed so the
counter in the simulator stays at one. Losing every control-plane node
ends the lifetime: the whole node set is recreated rather than repaired.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

from . import SskubaError
from .machineconfig import Taint, cluster_endpoint, labels_and_taints, node_name, pool_for_role
from .manifest import ClusterManifest
from .pki import Role
from .provider import (
    AlreadyBootstrappedError,
    NodePhase,
    NotFoundError,
    Provider,
    ResourceKind,
    StaleUnavailableError,
    WrongPhaseError,
)


class ClusterError(SskubaError):
    pass


class DivergedError(ClusterError):
    def __init__(self, max_steps: int, observed: "ObservedState"):
        self.max_steps = max_steps
        self.observed = observed
        super().__init__(f"did not converge within {max_steps} reconcile steps")


class ActionKind(str, enum.Enum):
    APPLY_CONFIG = "ApplyConfig"
    BOOTSTRAP_ETCD = "BootstrapEtcd"
    APPLY_LABELS_TAINTS = "ApplyLabelsTaints"
    WAIT = "Wait"
    RECREATE_NODE = "RecreateNode"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    target: str  # node name, or "cluster" for Wait


@dataclass(frozen=True)
class DesiredNode:
    name: str
    role: str
    labels: dict
    taints: tuple[Taint, ...]


@dataclass(frozen=True)
class DesiredClusterState:
    nodes: tuple[DesiredNode, ...]
    endpoint: str
    etcd_bootstrapped: bool = True
    gitops_revision_target: str | None = None


@dataclass(frozen=True)
class ObservedNode:
    name: str
    phase: NodePhase
    labels: dict
    taints: tuple[dict, ...]


@dataclass(frozen=True)
class ObservedState:
    nodes: tuple[ObservedNode, ...]
    etcd: str  # absent | bootstrapped
    observation_age: int = 0
    stale: bool = False
    gitops_revision: str | None = None


@dataclass(frozen=True)
class ClusterStatus:
    converged: bool
    steps_used: int
    observed: ObservedState


def desired_state_from_manifest(m: ClusterManifest) -> DesiredClusterState:
    nodes = []
    for role in (Role.CONTROL_PLANE, Role.WORKER, Role.GPU_WORKER):
        pool = pool_for_role(m, role)
        labels, taints = labels_and_taints(role)
        for index in range(pool.count):
            nodes.append(
                DesiredNode(
                    name=node_name(m.name, role, index),
                    role=role.value,
                    labels=labels,
                    taints=taints,
                )
            )
    return DesiredClusterState(nodes=tuple(nodes), endpoint=cluster_endpoint(m))


def _labels_taints_match(desired: DesiredNode, observed: ObservedNode) -> bool:
    want_taints = [t.as_dict() for t in desired.taints]
    have_taints = [dict(t) for t in observed.taints]
    return dict(observed.labels) == dict(desired.labels) and have_taints == want_taints


def reconcile_step(desired: DesiredClusterState, observed: ObservedState) -> list[Action]:
    """Compare observed against desired and return the minimal actions.

    Pure and deterministic; actions are data. An empty list is returned
    exactly when the observation matches the desired state (all nodes
    Ready with the right labels and taints, etcd bootstrapped).
    """
    observed_by_name = {node.name: node for node in observed.nodes}
    actions: list[Action] = []

    cp_names = [n.name for n in desired.nodes if n.role == Role.CONTROL_PLANE.value]
    quorum_lost = bool(cp_names) and not any(name in observed_by_name for name in cp_names)
    if quorum_lost:
        # Replace, don't repair: with the whole control plane gone the
        # cluster's data is gone too, so every node is recreated.
        return [Action(ActionKind.RECREATE_NODE, node.name) for node in desired.nodes]

    for node in desired.nodes:
        if node.name not in observed_by_name:
            actions.append(Action(ActionKind.RECREATE_NODE, node.name))

    for node in desired.nodes:
        seen = observed_by_name.get(node.name)
        if seen is None:
            continue
        if seen.phase in (NodePhase.PROVISIONED, NodePhase.BOOTED):
            # Booted is included because the observation may lag the
            # config application; the action is idempotent.
            actions.append(Action(ActionKind.APPLY_CONFIG, node.name))
        elif seen.phase in (NodePhase.JOINED, NodePhase.READY):
            if not _labels_taints_match(node, seen):
                actions.append(Action(ActionKind.APPLY_LABELS_TAINTS, node.name))

    if desired.etcd_bootstrapped and observed.etcd != "bootstrapped":
        for name in cp_names:
            seen = observed_by_name.get(name)
            if seen is not None and seen.phase is NodePhase.CONFIG_APPLIED:
                actions.append(Action(ActionKind.BOOTSTRAP_ETCD, name))
                break

    if actions:
        return actions

    converged = (
        observed.etcd == "bootstrapped"
        and all(
            (seen := observed_by_name.get(node.name)) is not None
            and seen.phase is NodePhase.READY
            and _labels_taints_match(node, seen)
            for node in desired.nodes
        )
    )
    if converged:
        return []
    return [Action(ActionKind.WAIT, "cluster")]


class StalenessPolicy:
    """Injected staleness: decide per observation round whether to drop it."""

    def drop(self, round_index: int) -> bool:
        raise NotImplementedError


class DropRounds(StalenessPolicy):
    def __init__(self, rounds):
        self.rounds = set(rounds)

    def drop(self, round_index: int) -> bool:
        return round_index in self.rounds


class RandomDrops(StalenessPolicy):
    def __init__(self, seed: int, probability: float):
        import random

        self._rng = random.Random(seed)
        self.probability = probability

    def drop(self, round_index: int) -> bool:
        return self._rng.random() < self.probability


class Observer:
    """Reads the provider's node registry, remembering the last good view.

    A dropped observation (injected policy or provider-side fault)
    returns the previous snapshot marked stale with its age bumped. The
    first observation is always taken fresh; there is nothing older to
    serve.
    """

    def __init__(self, provider: Provider, staleness: StalenessPolicy | None = None):
        self.provider = provider
        self.staleness = staleness
        self._rounds = 0
        self._last: ObservedState | None = None

    def observe(self) -> ObservedState:
        self._rounds += 1
        if self.staleness is not None and self._last is not None and self.staleness.drop(self._rounds):
            self._last = replace(self._last, stale=True, observation_age=self._last.observation_age + 1)
            return self._last
        try:
            nodes = self.provider.list_nodes()
            etcd = self.provider.etcd_state()
        except StaleUnavailableError:
            if self._last is None:
                state = ObservedState(nodes=(), etcd="absent", stale=True, observation_age=1)
                return state
            self._last = replace(self._last, stale=True, observation_age=self._last.observation_age + 1)
            return self._last
        state = ObservedState(
            nodes=tuple(
                ObservedNode(
                    name=node.name,
                    phase=node.phase,
                    labels=dict(node.labels),
                    taints=tuple(dict(t) for t in node.taints),
                )
                for node in nodes
            ),
            etcd=etcd,
        )
        self._last = state
        return state


def observe(provider: Provider, staleness: StalenessPolicy | None = None) -> ObservedState:
    """One-shot observation (no memory of previous rounds)."""
    return Observer(provider, staleness).observe()


def bootstrap_etcd(provider: Provider, node: str) -> None:
    """One-time etcd bootstrap on a config-applied control-plane node."""
    provider.bootstrap_etcd(node)


def default_machine_inputs(desired: DesiredClusterState, node: DesiredNode) -> dict:
    image = "talos-v1-nvidia" if node.role == Role.GPU_WORKER.value else "talos-v1"
    return {
        "node_name": node.name,
        "role": node.role,
        "image": image,
        "machine_type": "m.sim",
        "cluster_endpoint": desired.endpoint,
        "config_ref": f"{node.name}.machineconfig.sealed",
    }


def apply_action(
    provider: Provider,
    desired: DesiredClusterState,
    action: Action,
    machine_inputs: dict | None = None,
) -> None:
    """Execute one reconcile action against the provider.

    Benign races with stale observations (node vanished, etcd already
    bootstrapped) are swallowed; the next round sees the truth.
    """
    desired_by_name = {node.name: node for node in desired.nodes}
    if action.kind is ActionKind.WAIT:
        return
    if action.kind is ActionKind.APPLY_CONFIG:
        try:
            provider.apply_node_config(action.target)
        except NotFoundError:
            pass
        return
    if action.kind is ActionKind.APPLY_LABELS_TAINTS:
        node = desired_by_name[action.target]
        try:
            provider.set_node_labels_taints(
                action.target, node.labels, [t.as_dict() for t in node.taints]
            )
        except NotFoundError:
            pass
        return
    if action.kind is ActionKind.BOOTSTRAP_ETCD:
        try:
            provider.bootstrap_etcd(action.target)
        except (AlreadyBootstrappedError, WrongPhaseError, NotFoundError):
            pass
        return
    if action.kind is ActionKind.RECREATE_NODE:
        existing = provider.machine_id(action.target)
        if existing is not None:
            try:
                provider.delete(existing)
            except NotFoundError:
                pass
        node = desired_by_name[action.target]
        inputs = dict((machine_inputs or {}).get(action.target) or default_machine_inputs(desired, node))
        provider.create(ResourceKind.MACHINE, inputs)
        return
    raise ClusterError(f"unknown action kind {action.kind}")


def run_to_convergence(
    desired: DesiredClusterState,
    provider: Provider,
    max_steps: int,
    staleness: StalenessPolicy | None = None,
    machine_inputs: dict | None = None,
    ticks_per_round: int = 1,
    on_round=None,
) -> ClusterStatus:
    """Reconcile in a loop until fixed point or the step budget runs out.

    Convergence is only declared on a fresh observation; an empty action
    list computed from a stale view keeps the loop running. Raises
    :class:`DivergedError` when the budget is exhausted.
    """
    if max_steps <= 0:
        raise ValueError("max_steps must be positive")
    observer = Observer(provider, staleness)
    observed = observer.observe()
    for step in range(1, max_steps + 1):
        actions = reconcile_step(desired, observed)
        if not actions and not observed.stale:
            return ClusterStatus(converged=True, steps_used=step, observed=observed)
        for action in actions:
            apply_action(provider, desired, action, machine_inputs)
        for _ in range(max(1, ticks_per_round)):
            provider.tick()
        if on_round is not None:
            on_round(step, actions)
        observed = observer.observe()
    raise DivergedError(max_steps, observed)

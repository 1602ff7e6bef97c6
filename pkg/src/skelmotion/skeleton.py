"""Skeletal topology, topology-preserving pooling plans and left/right counterparts."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

ROOT_DIM = 7
FOOT_DIM = 13
JOINT_DIM = 12
N_ATOMIC = 7
SIDES = ("left", "right", "center")


class TopologyError(ValueError):
    """Raised for malformed skeletons, pooling plans or counterpart pairings."""


@dataclass(frozen=True)
class SkeletonTopology:
    joint_names: tuple[str, ...]
    parent: tuple[int, ...]
    side: tuple[str, ...]
    foot: tuple[bool, ...]
    offsets: tuple[tuple[float, float, float], ...] | None = None
    feature_dim: tuple[int, ...] = field(init=False)
    neighbors: tuple[tuple[int, ...], ...] = field(init=False)

    def __post_init__(self):
        dims = []
        for j, p in enumerate(self.parent):
            if p < 0:
                dims.append(ROOT_DIM)
            elif self.foot[j]:
                dims.append(FOOT_DIM)
            else:
                dims.append(JOINT_DIM)
        nbrs: list[list[int]] = [[] for _ in self.parent]
        for j, p in enumerate(self.parent):
            if p >= 0:
                nbrs[j].append(p)
                nbrs[p].append(j)
        object.__setattr__(self, "feature_dim", tuple(dims))
        object.__setattr__(self, "neighbors", tuple(tuple(sorted(n)) for n in nbrs))

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def root(self) -> int:
        return self.parent.index(-1)

    @property
    def total_width(self) -> int:
        return sum(self.feature_dim)

    @property
    def feature_offsets(self) -> tuple[int, ...]:
        """Start column of each joint block inside the flat pose vector."""
        out, acc = [], 0
        for d in self.feature_dim:
            out.append(acc)
            acc += d
        return tuple(out)

    def index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise TopologyError(f"unknown joint {name!r}") from None

    def to_dict(self) -> dict[str, Any]:
        joints = []
        for j, name in enumerate(self.joint_names):
            entry: dict[str, Any] = {
                "name": name,
                "parent": self.joint_names[self.parent[j]] if self.parent[j] >= 0 else None,
                "side": self.side[j],
            }
            if self.foot[j]:
                entry["foot"] = True
            if self.offsets is not None:
                entry["offset"] = list(self.offsets[j])
            joints.append(entry)
        return {"joints": joints}


def build_topology(joints: Sequence[Mapping[str, Any]]) -> SkeletonTopology:
    """Build a topology from joint records.

    Each record holds ``name``, ``parent`` (a joint name, an index, or
    None / -1 for the root), optional ``side`` (default center), optional
    ``foot`` flag and optional rest ``offset``.
    """
    if not joints:
        raise TopologyError("skeleton must have at least one joint")
    names = [str(j["name"]) for j in joints]
    if len(set(names)) != len(names):
        raise TopologyError("joint names must be unique")
    lookup = {n: i for i, n in enumerate(names)}
    n = len(names)

    parents = []
    for i, rec in enumerate(joints):
        p = rec.get("parent")
        if p is None:
            p = -1
        elif isinstance(p, str):
            if p not in lookup:
                raise TopologyError(f"joint {names[i]!r}: unknown parent {p!r}")
            p = lookup[p]
        else:
            p = int(p)
            if p < -1 or p >= n:
                raise TopologyError(f"joint {names[i]!r}: parent index {p} out of range")
        parents.append(p)

    roots = [i for i, p in enumerate(parents) if p < 0]
    if len(roots) == 0:
        raise TopologyError("parent links contain a cycle (no root)")
    if len(roots) > 1:
        raise TopologyError(f"multiple roots: {[names[r] for r in roots]}")

    for start in range(n):
        j, steps = start, 0
        while parents[j] >= 0:
            j = parents[j]
            steps += 1
            if steps > n:
                raise TopologyError(f"parent links contain a cycle through {names[start]!r}")

    sides = []
    for rec in joints:
        s = rec.get("side", "center")
        if s not in SIDES:
            raise TopologyError(f"joint {rec['name']!r}: side must be one of {SIDES}")
        sides.append(s)

    offsets = None
    if all("offset" in rec for rec in joints):
        offsets = tuple(tuple(float(v) for v in rec["offset"]) for rec in joints)

    return SkeletonTopology(
        joint_names=tuple(names),
        parent=tuple(parents),
        side=tuple(sides),
        foot=tuple(bool(rec.get("foot", False)) for rec in joints),
        offsets=offsets,
    )


@dataclass(frozen=True)
class PoolingStage:
    """One pooling step: ``assignment[j]`` is the group id of incoming joint ``j``."""

    assignment: tuple[int, ...]
    group_names: tuple[str, ...] | None = None
    topology: SkeletonTopology | None = None

    @property
    def n_groups(self) -> int:
        return max(self.assignment) + 1

    def members(self, g: int) -> tuple[int, ...]:
        return tuple(j for j, a in enumerate(self.assignment) if a == g)


@dataclass(frozen=True)
class PoolingPlan:
    stages: tuple[PoolingStage, ...]

    @property
    def validated(self) -> bool:
        return all(s.topology is not None for s in self.stages)

    def topologies(self, base: SkeletonTopology) -> list[SkeletonTopology]:
        """Topology at every resolution, finest first (``len(stages) + 1`` entries)."""
        if not self.validated:
            raise TopologyError("pooling plan has not been validated")
        return [base] + [s.topology for s in self.stages]

    def to_dict(self, base: SkeletonTopology) -> list[dict[str, Any]]:
        out = []
        names = base.joint_names
        for s in self.stages:
            groups = []
            for g in range(s.n_groups):
                gname = s.group_names[g] if s.group_names else f"g{g}"
                groups.append({"name": gname, "joints": [names[j] for j in s.members(g)]})
            out.append({"groups": groups})
            names = s.topology.joint_names if s.topology else tuple(gr["name"] for gr in groups)
        return out


def _contract(topology: SkeletonTopology, stage: PoolingStage, stage_idx: int) -> SkeletonTopology:
    a = stage.assignment
    if len(a) != topology.n_joints:
        raise TopologyError(
            f"stage {stage_idx}: assignment covers {len(a)} joints, skeleton has {topology.n_joints}"
        )
    if min(a) < 0:
        raise TopologyError(f"stage {stage_idx}: negative group id")
    n_groups = max(a) + 1
    heads = []
    for g in range(n_groups):
        members = [j for j in range(len(a)) if a[j] == g]
        if not members:
            raise TopologyError(f"stage {stage_idx}: group {g} is empty")
        # an induced subgraph of a tree is connected iff exactly one member's
        # parent lies outside the set
        top = [j for j in members if topology.parent[j] < 0 or a[topology.parent[j]] != g]
        if len(top) != 1:
            label = [topology.joint_names[j] for j in members]
            raise TopologyError(f"stage {stage_idx}: group {g} {label} is not a connected subtree")
        heads.append(top[0])

    names = stage.group_names or tuple(f"s{stage_idx}g{g}" for g in range(n_groups))
    if len(names) != n_groups:
        raise TopologyError(f"stage {stage_idx}: {len(names)} group names for {n_groups} groups")
    records = []
    for g, h in enumerate(heads):
        p = topology.parent[h]
        member_sides = {topology.side[j] for j in range(len(a)) if a[j] == g}
        side = member_sides.pop() if len(member_sides) == 1 else "center"
        records.append({"name": names[g], "parent": a[p] if p >= 0 else None, "side": side})
    return build_topology(records)


def validate_pooling_plan(
    topology: SkeletonTopology, plan: PoolingPlan, final_joints: int | None = N_ATOMIC
) -> PoolingPlan:
    """Check every stage contracts connected groups and return the plan with
    the pooled topology attached to each stage.

    ``final_joints=None`` skips the atomic-joint count check (toy skeletons).
    """
    if len(plan.stages) < 1:
        raise TopologyError("pooling plan needs at least one stage")
    current = topology
    stages = []
    for i, stage in enumerate(plan.stages):
        pooled = _contract(current, stage, i)
        stages.append(PoolingStage(stage.assignment, pooled.joint_names, pooled))
        current = pooled
    if final_joints is not None and current.n_joints != final_joints:
        raise TopologyError(f"final stage has {current.n_joints} joints, expected {final_joints}")
    return PoolingPlan(tuple(stages))


def plan_from_groups(
    topology: SkeletonTopology, stages: Sequence[Sequence[Mapping[str, Any]]]
) -> PoolingPlan:
    """Build an (unvalidated) plan from named groups of joint names per stage."""
    out = []
    names = list(topology.joint_names)
    for i, groups in enumerate(stages):
        lookup = {n: k for k, n in enumerate(names)}
        assignment = [-1] * len(names)
        for g, grp in enumerate(groups):
            for member in grp["joints"]:
                if member not in lookup:
                    raise TopologyError(f"stage {i}: unknown joint {member!r}")
                if assignment[lookup[member]] != -1:
                    raise TopologyError(f"stage {i}: joint {member!r} assigned twice")
                assignment[lookup[member]] = g
        missing = [names[k] for k, v in enumerate(assignment) if v < 0]
        if missing:
            raise TopologyError(f"stage {i}: joints not assigned to any group: {missing}")
        group_names = tuple(str(grp.get("name", f"s{i}g{g}")) for g, grp in enumerate(groups))
        out.append(PoolingStage(tuple(assignment), group_names))
        names = list(group_names)
    return PoolingPlan(tuple(out))


def counterpart_map(topology: SkeletonTopology) -> tuple[int, ...]:
    """Index of each joint's mirror-image joint; center joints map to themselves.

    Left and right joints pair by swapping ``left`` and ``right`` in the name.
    """
    out = []
    for j, name in enumerate(topology.joint_names):
        side = topology.side[j]
        if side == "center":
            out.append(j)
            continue
        other_side = "right" if side == "left" else "left"
        if side not in name:
            raise TopologyError(f"joint {name!r} is tagged {side} but its name lacks {side!r}")
        mate = name.replace(side, other_side)
        if mate not in topology.joint_names:
            raise TopologyError(f"joint {name!r} has no {other_side} counterpart {mate!r}")
        k = topology.joint_names.index(mate)
        if topology.side[k] != other_side:
            raise TopologyError(f"counterpart {mate!r} of {name!r} is not tagged {other_side}")
        out.append(k)
    return tuple(out)


def load_skeleton(path: str | Path | None = None) -> tuple[SkeletonTopology, PoolingPlan]:
    """Read a skeleton + pooling plan file; ``None`` loads the bundled 22-joint default."""
    if path is None:
        text = resources.files("skelmotion.data").joinpath("humanml22.yaml").read_text()
    else:
        text = Path(path).read_text()
    return skeleton_from_dict(yaml.safe_load(text))


def skeleton_from_dict(doc: Mapping[str, Any]) -> tuple[SkeletonTopology, PoolingPlan]:
    if "joints" not in doc or "pooling" not in doc:
        raise TopologyError("skeleton document needs 'joints' and 'pooling' keys")
    topology = build_topology(doc["joints"])
    plan = plan_from_groups(topology, [stage["groups"] for stage in doc["pooling"]])
    return topology, validate_pooling_plan(topology, plan)


def skeleton_to_dict(topology: SkeletonTopology, plan: PoolingPlan) -> dict[str, Any]:
    doc = topology.to_dict()
    doc["pooling"] = plan.to_dict(topology)
    return doc

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skelmotion.skeleton import (
    N_ATOMIC,
    PoolingPlan,
    PoolingStage,
    TopologyError,
    build_topology,
    counterpart_map,
    load_skeleton,
    skeleton_from_dict,
    skeleton_to_dict,
    validate_pooling_plan,
)


def _atomic():
    return build_topology([
        {"name": "root", "parent": None},
        {"name": "spine", "parent": "root"},
        {"name": "head", "parent": "spine"},
        {"name": "left_arm", "parent": "spine", "side": "left"},
        {"name": "right_arm", "parent": "spine", "side": "right"},
        {"name": "left_leg", "parent": "root", "side": "left"},
        {"name": "right_leg", "parent": "root", "side": "right"},
    ])


def test_chain_neighbors(chain3):
    assert chain3.neighbors == ((1,), (0, 2), (1,))


def test_feature_dims_follow_joint_role():
    topo = build_topology([
        {"name": "root", "parent": None},
        {"name": "mid", "parent": 0},
        {"name": "toe", "parent": 1, "foot": True},
    ])
    assert topo.feature_dim == (7, 12, 13)
    assert topo.total_width == 32
    assert topo.feature_offsets == (0, 7, 19)


def test_default_skeleton_layout(topo, plan):
    assert topo.n_joints == 22
    assert topo.total_width == 263
    assert topo.feature_dim[topo.root] == 7
    assert sum(topo.foot) == 4
    assert [s.n_groups for s in plan.stages] == [12, N_ATOMIC]
    atomic = plan.topologies(topo)[-1]
    assert set(atomic.joint_names) == {"root", "spine", "head", "left_arm", "right_arm", "left_leg", "right_leg"}


@pytest.mark.parametrize(
    "joints, match",
    [
        ([{"name": "a", "parent": None}, {"name": "b", "parent": 0}, {"name": "c", "parent": 2}], "cycle"),
        ([{"name": "a", "parent": None}, {"name": "b", "parent": None}], "multiple roots"),
        ([{"name": "a", "parent": None}, {"name": "b", "parent": 5}], "out of range"),
        ([{"name": "a", "parent": 1}, {"name": "b", "parent": 0}], "cycle"),
        ([{"name": "a", "parent": None}, {"name": "b", "parent": 0, "side": "up"}], "side"),
        ([], "at least one"),
    ],
)
def test_build_topology_errors(joints, match):
    with pytest.raises(TopologyError, match=match):
        build_topology(joints)


@st.composite
def random_trees(draw):
    n = draw(st.integers(1, 25))
    parents = [-1] + [draw(st.integers(0, i - 1)) for i in range(1, n)]
    return build_topology([{"name": f"j{i}", "parent": p} for i, p in enumerate(parents)])


@given(random_trees())
def test_neighbor_sets_symmetric(topo):
    for j, nbrs in enumerate(topo.neighbors):
        for n in nbrs:
            assert j in topo.neighbors[n]
    assert sum(len(n) for n in topo.neighbors) == 2 * (topo.n_joints - 1)


def test_identity_plan_on_atomic_skeleton():
    topo = _atomic()
    plan = validate_pooling_plan(topo, PoolingPlan((PoolingStage(tuple(range(7))),)))
    pooled = plan.stages[0].topology
    assert pooled.parent == topo.parent
    assert pooled.n_joints == 7


def test_chain_contraction(chain3):
    plan = validate_pooling_plan(chain3, PoolingPlan((PoolingStage((0, 0, 1)),)), final_joints=None)
    pooled = plan.stages[0].topology
    assert pooled.parent == (-1, 0)


def test_disconnected_group_rejected(chain3):
    with pytest.raises(TopologyError, match="connected"):
        validate_pooling_plan(chain3, PoolingPlan((PoolingStage((0, 1, 0)),)), final_joints=None)


def test_wrong_final_count_rejected(chain3):
    with pytest.raises(TopologyError, match="expected 7"):
        validate_pooling_plan(chain3, PoolingPlan((PoolingStage((0, 0, 1)),)))


@given(random_trees(), st.data())
@settings(max_examples=60)
def test_contracted_groups_form_tree(topo, data):
    # Contract random parent-child edges: each joint either joins its parent's group or starts one.
    group = [0] * topo.n_joints
    next_id = 1
    for j in range(1, topo.n_joints):
        if data.draw(st.booleans()):
            group[j] = group[topo.parent[j]]
        else:
            group[j] = next_id
            next_id += 1
    plan = validate_pooling_plan(topo, PoolingPlan((PoolingStage(tuple(group)),)), final_joints=None)
    pooled = plan.stages[0].topology
    assert pooled.n_joints == next_id
    assert sum(p < 0 for p in pooled.parent) == 1


def test_atomic_counterparts():
    topo = _atomic()
    assert counterpart_map(topo) == (0, 1, 2, 4, 3, 6, 5)


def test_default_counterparts_involutive(topo, plan):
    for t in plan.topologies(topo):
        c = counterpart_map(t)
        assert all(c[c[j]] == j for j in range(t.n_joints))
        assert all((c[j] == j) == (t.side[j] == "center") for j in range(t.n_joints))


def test_all_center_identity(chain3):
    assert counterpart_map(chain3) == (0, 1, 2)


def test_unpaired_side_rejected():
    topo = build_topology([
        {"name": "root", "parent": None},
        {"name": "left_arm", "parent": 0, "side": "left"},
    ])
    with pytest.raises(TopologyError, match="counterpart"):
        counterpart_map(topo)


def test_dict_round_trip(topo, plan):
    topo2, plan2 = skeleton_from_dict(skeleton_to_dict(topo, plan))
    assert topo2 == topo
    assert [s.assignment for s in plan2.stages] == [s.assignment for s in plan.stages]


def test_load_from_file(tmp_path, topo, plan):
    import yaml

    path = tmp_path / "skel.yaml"
    path.write_text(yaml.safe_dump(skeleton_to_dict(topo, plan)))
    topo2, _ = load_skeleton(path)
    assert topo2.joint_names == topo.joint_names

"""
Graph Builder
把一个 GroupSample 转成固定大小、按深度排序、带 dummy 填充的上下文图，
并从不同起始节点出发枚举候选子图
"""

from itertools import combinations
from typing import List, Optional, Sequence, Union

import numpy as np

from src.core.exceptions import DimensionMismatchError, GraphSizeError
from src.models import AffinityMatrix, ContextGraph, GroupSample, Node, PersonDescriptor
from src.processors.feature_store import sort_members


def _complete_edges(n_real: int) -> frozenset:
    return frozenset(combinations(range(n_real), 2))


def _assemble(
    members: Sequence[PersonDescriptor],
    n_max: int,
    part_count: int,
    part_dim: int,
    group_id: str = '',
    camera_id: str = '',
) -> ContextGraph:
    nodes = [Node(descriptor=m, part_features=m.parts.copy()) for m in members]
    dummy = np.zeros((part_count, part_dim), dtype=np.float64)
    nodes.extend(Node(descriptor=None, part_features=dummy) for _ in range(n_max - len(members)))
    return ContextGraph(
        nodes=tuple(nodes),
        edges=_complete_edges(len(members)),
        n_max=n_max,
        group_id=group_id,
        camera_id=camera_id,
    )


def build_graph(group: GroupSample, n_max: int) -> ContextGraph:
    """
    构建上下文图：真实节点按深度升序在前，dummy 节点在后，真实节点之间为完全图

    Raises:
        GraphSizeError: 组成员数超过 n_max
    """
    if n_max <= 0:
        raise GraphSizeError(f"n_max must be positive, got {n_max}")
    if not group.members:
        raise GraphSizeError(f"group {group.group_id} has no members")
    if group.size > n_max:
        raise GraphSizeError(f"group {group.group_id} has {group.size} members, n_max is {n_max}")

    first = group.members[0]
    part_count = first.part_count
    part_dim = first.dim // part_count
    return _assemble(sort_members(list(group.members)), n_max, part_count, part_dim,
                     group.group_id, group.camera_id)


def induced_subgraph(graph: ContextGraph, indices: Sequence[int]) -> ContextGraph:
    """取真实节点子集（保持深度顺序），重新填充到 n_max"""
    real = graph.descriptors
    chosen = [real[i] for i in sorted(set(indices))]
    return _assemble(chosen, graph.n_max, graph.part_count, graph.part_dim,
                     graph.group_id, graph.camera_id)


def visitation_scores(walk: np.ndarray, start: int, steps: int = 1) -> np.ndarray:
    """e_v · W^t：从起始节点 v 出发 t 步后各节点的访问概率"""
    state = np.zeros(walk.shape[0], dtype=np.float64)
    state[start] = 1.0
    for _ in range(steps):
        state = state @ walk
    return state


def enumerate_candidates(
    graph: ContextGraph,
    walk: Optional[Union[AffinityMatrix, np.ndarray]],
    size: int,
    steps: int = 1,
) -> List[ContextGraph]:
    """
    从每个真实节点出发构造候选子图

    起始节点 v 加上从 v 出发访问分数最高的 size-1 个节点（分数相同按深度顺序），
    按节点集合去重，保留首次出现的顺序

    Args:
        graph: 父图
        walk: 父图真实节点上的归一化游走矩阵 W（size == 1 时可为 None）
        size: 子图真实节点数
        steps: 访问分数的游走步数 t

    Raises:
        GraphSizeError: size 超过真实节点数
        DimensionMismatchError: W 的维度与真实节点数不一致
    """
    n_real = graph.n_real
    if size <= 0 or size > n_real:
        raise GraphSizeError(f"candidate size {size} outside 1..{n_real}")

    W = None
    if size > 1:
        if walk is None:
            raise DimensionMismatchError("a walk matrix is required for candidates larger than one node")
        W = np.asarray(getattr(walk, 'normalized', walk), dtype=np.float64)
        if W.shape != (n_real, n_real):
            raise DimensionMismatchError(f"walk matrix shape {W.shape} does not match {n_real} real nodes")

    candidates: List[ContextGraph] = []
    seen = set()
    for v in range(n_real):
        if W is None:
            chosen = (v,)
        else:
            scores = visitation_scores(W, v, steps)
            others = [u for u in range(n_real) if u != v]
            # stable sort keeps depth order among ties
            ranked = sorted(others, key=lambda u: -scores[u])
            chosen = tuple(sorted((v, *ranked[:size - 1])))
        if chosen in seen:
            continue
        seen.add(chosen)
        candidates.append(induced_subgraph(graph, chosen))
    return candidates


def sweep_candidates(
    graph: ContextGraph,
    walk: Optional[Union[AffinityMatrix, np.ndarray]],
    steps: int = 1,
) -> List[ContextGraph]:
    """所有大小 2..n_real 的候选子图合并去重；单节点图只返回自身"""
    if graph.n_real <= 1:
        return [graph]

    merged: List[ContextGraph] = []
    seen = set()
    for size in range(2, graph.n_real + 1):
        for cand in enumerate_candidates(graph, walk, size, steps):
            if cand.node_set in seen:
                continue
            seen.add(cand.node_set)
            merged.append(cand)
    return merged

"""
Random Walk Analyzer
成对亲和度打分、行 softmax 归一化（对角为 0）、游走迭代，
以及按平均亲和度从候选子图中挑选与画廊最匹配的子图
"""

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from src.core.exceptions import (
    ConfigurationError,
    DimensionMismatchError,
    EmptyInputError,
    NumericalError,
)
from src.models import AffinityMatrix, ContextGraph, PersonDescriptor, ScorerConfig, WalkState


class AffinityScorer:
    """
    Pluggable pairwise affinity in [0, 1] over descriptor features.

    Subclasses implement `matrix`; `score` is the single-pair view of it.
    """
    kind = 'base'

    def matrix(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def score(self, a: PersonDescriptor, b: PersonDescriptor) -> float:
        if a.dim != b.dim:
            raise DimensionMismatchError(f"feature dimensions differ: {a.dim} vs {b.dim}")
        return float(self.matrix(a.feature[None, :], b.feature[None, :])[0, 0])

    def to_config(self) -> ScorerConfig:
        return ScorerConfig(kind=self.kind)


class CosineScorer(AffinityScorer):
    """(<a, b> + 1) / 2 on unit features."""
    kind = 'cosine'

    def matrix(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.shape[1] != b.shape[1]:
            raise DimensionMismatchError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
        return np.clip((a @ b.T + 1.0) * 0.5, 0.0, 1.0)


class BilinearScorer(AffinityScorer):
    """sigmoid(a^T M b) with M symmetrized, so score(a, b) == score(b, a)."""
    kind = 'bilinear'

    def __init__(self, matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise DimensionMismatchError(f"bilinear matrix must be square, got {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise NumericalError("bilinear matrix has non-finite entries")
        self.M = 0.5 * (matrix + matrix.T)

    def matrix(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.shape[1] != self.M.shape[0] or b.shape[1] != self.M.shape[0]:
            raise DimensionMismatchError(
                f"feature dimension does not match bilinear matrix {self.M.shape}"
            )
        logits = a @ self.M @ b.T
        # tanh form of the logistic function, overflow-free
        return 0.5 * (1.0 + np.tanh(0.5 * logits))

    def to_config(self) -> ScorerConfig:
        return ScorerConfig(kind=self.kind, matrix=self.M.copy())


def make_scorer(config: ScorerConfig, feature_dim: Optional[int] = None) -> AffinityScorer:
    """
    按配置构造打分器；双线性打分器未给矩阵时使用单位阵 (sigmoid(<a,b>))
    """
    if config.kind == 'cosine':
        return CosineScorer()
    if config.kind == 'bilinear':
        matrix = config.matrix
        if matrix is None:
            if feature_dim is None:
                raise ConfigurationError("bilinear scorer needs a matrix or a feature dimension")
            matrix = np.eye(feature_dim)
        return BilinearScorer(matrix)
    raise ConfigurationError(f"unknown scorer kind: {config.kind!r}")


def score_affinity(a: PersonDescriptor, b: PersonDescriptor, scorer: AffinityScorer) -> float:
    return scorer.score(a, b)


def pairwise_affinities(
    a: Sequence[PersonDescriptor],
    b: Sequence[PersonDescriptor],
    scorer: AffinityScorer,
) -> np.ndarray:
    fa = np.stack([d.feature for d in a])
    fb = np.stack([d.feature for d in b])
    return scorer.matrix(fa, fb)


def _off_diagonal_softmax(S: np.ndarray) -> np.ndarray:
    """沿最后一维做排除对角项的 softmax，支持 (..., n, n) 批量输入"""
    n = S.shape[-1]
    off_diag = ~np.eye(n, dtype=bool)
    row_max = np.max(np.where(off_diag, S, -np.inf), axis=-1, keepdims=True)
    expd = np.where(off_diag, np.exp(np.where(off_diag, S - row_max, 0.0)), 0.0)
    return expd / expd.sum(axis=-1, keepdims=True)


def normalize_affinities(raw: np.ndarray) -> AffinityMatrix:
    """
    行 softmax 归一化，排除对角项：
        W(i,j) = exp(S(i,j)) / sum_{k != i} exp(S(i,k)),  W(i,i) = 0
    每行先减去非对角最大值，数学上等价且不会溢出

    Raises:
        DimensionMismatchError: 不是 n×n (n >= 2) 方阵
        NumericalError: 含非有限值
    """
    S = np.asarray(raw, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] < 2:
        raise DimensionMismatchError(f"affinity matrix must be n×n with n >= 2, got {S.shape}")
    if not np.all(np.isfinite(S)):
        raise NumericalError("affinity matrix contains non-finite values")
    return AffinityMatrix(raw=S, normalized=_off_diagonal_softmax(S))


def graph_walk_matrix(graph: ContextGraph, scorer: AffinityScorer) -> Optional[AffinityMatrix]:
    """图中真实节点两两亲和度构成的游走矩阵；少于 2 个真实节点时返回 None"""
    real = graph.descriptors
    if len(real) < 2:
        return None
    return normalize_affinities(pairwise_affinities(real, real, scorer))


def walk_step(W: AffinityMatrix, y: WalkState) -> WalkState:
    """y^(t+1) = W y^(t)"""
    scores = np.asarray(y.scores, dtype=np.float64)
    if scores.shape != (W.size,):
        raise DimensionMismatchError(f"walk state of length {scores.shape} does not match W of size {W.size}")
    return WalkState(scores=W.normalized @ scores, iteration=y.iteration + 1)


def iterate_walk(W: AffinityMatrix, y0: WalkState, steps: int) -> WalkState:
    if steps < 1:
        raise ConfigurationError(f"walk steps must be >= 1, got {steps}")
    state = y0
    for _ in range(steps):
        state = walk_step(W, state)
    return state


def _joint_average_affinities(S_joint: np.ndarray, n_cand: int, steps: int) -> np.ndarray:
    """
    S_joint: (C, n, n)，每个切片的前 n_cand 行/列是候选节点，其余是画廊节点
    候选节点初值 = 对画廊节点的平均亲和度；画廊节点初值 = 对候选节点的最大亲和度
    返回每个切片游走 steps 步后候选节点分数的均值 (C,)
    """
    if steps < 1:
        raise ConfigurationError(f"walk steps must be >= 1, got {steps}")
    if S_joint.shape[-1] < 2:
        raise DimensionMismatchError(f"joint graph needs at least 2 nodes, got {S_joint.shape[-1]}")
    cross = S_joint[:, :n_cand, n_cand:]
    y = np.concatenate([cross.mean(axis=2), cross.max(axis=1)], axis=1)
    W = _off_diagonal_softmax(S_joint)
    for _ in range(steps):
        y = (W * y[:, None, :]).sum(axis=2)
    return y[:, :n_cand].mean(axis=1)


def average_affinity(
    candidate: ContextGraph,
    gallery: ContextGraph,
    scorer: AffinityScorer,
    steps: int = 1,
) -> float:
    """
    候选子图与画廊图的平均亲和度：在 候选真实节点 ∪ 画廊真实节点 上联合游走，
    返回候选节点精炼后分数的均值

    Raises:
        EmptyInputError: 候选或画廊没有真实节点
    """
    cand = candidate.descriptors
    gal = gallery.descriptors
    if not cand:
        raise EmptyInputError("candidate graph has no real nodes")
    if not gal:
        raise EmptyInputError("gallery graph has no real nodes")
    joint = list(cand) + list(gal)
    S = pairwise_affinities(joint, joint, scorer)
    return float(_joint_average_affinities(S[None], len(cand), steps)[0])


def select_best_graph(
    candidates: Sequence[ContextGraph],
    gallery: ContextGraph,
    scorer: AffinityScorer,
    steps: int = 1,
) -> Tuple[ContextGraph, float]:
    """
    选出平均亲和度最高的候选子图；同分取最早的候选
    节点集合重复的候选只评估一次，同样大小的候选一起批量游走

    Raises:
        EmptyInputError: 候选列表为空
    """
    if not candidates:
        raise EmptyInputError("no candidate graphs to select from")

    gal = gallery.descriptors
    if not gal:
        raise EmptyInputError("gallery graph has no real nodes")

    unique: List[ContextGraph] = []
    seen = set()
    for cand in candidates:
        if cand.node_set in seen:
            continue
        if cand.n_real == 0:
            raise EmptyInputError("candidate graph has no real nodes")
        seen.add(cand.node_set)
        unique.append(cand)

    # 画廊与所有候选节点的亲和度只算一次，候选只取子矩阵
    pool: List[PersonDescriptor] = []
    index: Dict[str, int] = {}
    for cand in unique:
        for d in cand.descriptors:
            if d.person_id not in index:
                index[d.person_id] = len(pool)
                pool.append(d)
    joint = pool + list(gal)
    S_full = pairwise_affinities(joint, joint, scorer)
    gal_idx = list(range(len(pool), len(joint)))

    by_size: Dict[int, List[int]] = {}
    for k, cand in enumerate(unique):
        by_size.setdefault(cand.n_real, []).append(k)
    scores = np.empty(len(unique))
    for size, members in by_size.items():
        rows = np.array([[index[d.person_id] for d in unique[k].descriptors] + gal_idx for k in members])
        scores[members] = _joint_average_affinities(S_full[rows[:, :, None], rows[:, None, :]], size, steps)

    best = int(np.argmax(scores))
    logger.opt(lazy=True).debug(
        "{n} 个候选 vs {gid}: 最佳 {nodes} 平均亲和度 {score:.6f}",
        n=lambda: len(unique), gid=lambda: gallery.group_id,
        nodes=lambda: sorted(unique[best].node_set), score=lambda: float(scores[best]),
    )
    return unique[best], float(scores[best])

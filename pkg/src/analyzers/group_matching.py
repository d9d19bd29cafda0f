"""
Group Matching
图间注意力消息传递（T 轮）、自注意力读出得到图嵌入、组相似度

张量约定:
    节点特征 x: (B, N, P, D_p)，mask: (B, N) bool，True 表示真实节点
    dummy 节点特征恒为 0，且不参与注意力、消息与读出
"""

import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from src.analyzers.losses import circle_loss
from src.core.exceptions import (
    ConfigurationError,
    DimensionMismatchError,
    EmptyInputError,
    NumericalError,
)
from src.models import ContextGraph, GraphEmbedding, Node

DTYPE = torch.float64
INIT_UNIFORM = 'uniform'
INIT_PASSTHROUGH = 'passthrough'
INIT_SCHEMES = (INIT_UNIFORM, INIT_PASSTHROUGH)
ArrayLike = Union[np.ndarray, torch.Tensor]


def _tensor(x: ArrayLike) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _uniform_(tensor: torch.Tensor, fan_in: int, generator: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        tensor.copy_(torch.rand(tensor.shape, generator=generator, dtype=DTYPE) * 2 * bound - bound)


class MatchParams(nn.Module):
    """
    组匹配模型参数

    projections:  T 个 D_p×D_p 投影矩阵 W_e^(t)
    update_mlp:   2·D_p -> 2·D_p -> D_p，单隐层 ReLU
    readout_proj: (P·D_p)×D_g 读出投影 W_u；第 0 列同时作为自注意力 logit
    gamma / weight_pos / weight_neg: circle loss 的尺度与正负样本权重
    init:         uniform（按 fan_in 均匀初始化）或 passthrough（见 reset_passthrough）
    """

    def __init__(
        self,
        part_dim: int,
        part_count: int,
        rounds: int = 2,
        embed_dim: int = 0,
        gamma: float = 32.0,
        weight_pos: float = 1.0,
        weight_neg: float = 1.0,
        seed: int = 0,
        init: str = INIT_UNIFORM,
    ):
        super().__init__()
        if part_dim <= 0 or part_count <= 0:
            raise ConfigurationError(f"part_dim and part_count must be positive, got {part_dim}, {part_count}")
        if rounds < 1:
            raise ConfigurationError(f"rounds must be >= 1, got {rounds}")
        if gamma <= 0:
            raise ConfigurationError(f"gamma must be positive, got {gamma}")
        if weight_pos < 0 or weight_neg < 0:
            raise ConfigurationError("circle loss weights must be non-negative")
        if init not in INIT_SCHEMES:
            raise ConfigurationError(f"unknown init {init!r}, expected one of {INIT_SCHEMES}")
        if init == INIT_PASSTHROUGH and embed_dim == 0:
            embed_dim = part_dim * part_count + 1

        self.part_dim = part_dim
        self.part_count = part_count
        self.rounds = rounds
        self.embed_dim = embed_dim or part_dim * part_count
        self.gamma = float(gamma)
        self.weight_pos = float(weight_pos)
        self.weight_neg = float(weight_neg)
        self.seed = seed
        self.init = init

        self.projections = nn.ParameterList(
            [nn.Parameter(torch.empty(part_dim, part_dim, dtype=DTYPE)) for _ in range(rounds)]
        )
        self.update_mlp = nn.Sequential(
            nn.Linear(2 * part_dim, 2 * part_dim, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(2 * part_dim, part_dim, dtype=DTYPE),
        )
        self.readout_proj = nn.Parameter(torch.empty(part_dim * part_count, self.embed_dim, dtype=DTYPE))
        self.reset_parameters()
        if init == INIT_PASSTHROUGH:
            self.reset_passthrough()

    def reset_parameters(self) -> None:
        gen = torch.Generator().manual_seed(self.seed)
        for proj in self.projections:
            _uniform_(proj, self.part_dim, gen)
        for layer in self.update_mlp:
            if isinstance(layer, nn.Linear):
                _uniform_(layer.weight, layer.in_features, gen)
                _uniform_(layer.bias, layer.in_features, gen)
        _uniform_(self.readout_proj, self.part_dim * self.part_count, gen)

    def reset_passthrough(self) -> None:
        """
        让 GM 退化为成员特征均值的余弦相似度，作为训练起点:
            W_e = I；MLP 第一层 [I, 0; -I, 0]，第二层 [I, -I]，即 relu(h) - relu(-h) = h，消息 o 不参与
            W_u = [0 | I]：logit 列全 0，读出为真实节点的等权平均

        Raises:
            ConfigurationError: embed_dim < P·D_p + 1
        """
        width = self.part_dim * self.part_count
        if self.embed_dim < width + 1:
            raise ConfigurationError(
                f"passthrough init needs embed_dim >= {width + 1}, got {self.embed_dim}"
            )
        eye = torch.eye(self.part_dim, dtype=DTYPE)
        first, _, second = self.update_mlp
        with torch.no_grad():
            for proj in self.projections:
                proj.copy_(eye)
            first.weight.zero_()
            first.weight[:self.part_dim, :self.part_dim] = eye
            first.weight[self.part_dim:, :self.part_dim] = -eye
            first.bias.zero_()
            second.weight.copy_(torch.cat([eye, -eye], dim=1))
            second.bias.zero_()
            self.readout_proj.zero_()
            self.readout_proj[:, 1:width + 1] = torch.eye(width, dtype=DTYPE)

    def describe(self) -> dict:
        return {
            'part_dim': self.part_dim,
            'part_count': self.part_count,
            'rounds': self.rounds,
            'embed_dim': self.embed_dim,
            'gamma': self.gamma,
            'weight_pos': self.weight_pos,
            'weight_neg': self.weight_neg,
            'seed': self.seed,
            'init': self.init,
        }

    def loss(self, pos_sims, neg_sims) -> torch.Tensor:
        return circle_loss(pos_sims, neg_sims, self.gamma, self.weight_pos, self.weight_neg)

    def forward(
        self,
        xs: torch.Tensor,
        ms: torch.Tensor,
        xr: torch.Tensor,
        mr: torch.Tensor,
    ) -> torch.Tensor:
        """批量组相似度 (B,)"""
        xs, xr = propagate_tensors(self, xs, ms, xr, mr)
        return cosine_similarity(readout_tensors(self, xs, ms), readout_tensors(self, xr, mr))


# ==================== 单步算子 ====================

def importance_weight(h_si: ArrayLike, h_rj: ArrayLike, proj: ArrayLike) -> torch.Tensor:
    """e_ij = <W_e h_si, W_e h_rj>，节点特征可以是 (P, D_p) 或 (D_p,)"""
    h_si, h_rj, proj = _tensor(h_si), _tensor(h_rj), _tensor(proj)
    if h_si.shape != h_rj.shape or h_si.shape[-1] != proj.shape[1]:
        raise DimensionMismatchError(
            f"node features {tuple(h_si.shape)}/{tuple(h_rj.shape)} do not fit projection {tuple(proj.shape)}"
        )
    return ((h_si @ proj.T) * (h_rj @ proj.T)).sum()


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor, dim: int) -> torch.Tensor:
    return torch.softmax(logits.masked_fill(~mask, float('-inf')), dim=dim)


def attention_weights(e_row: ArrayLike, mask: Optional[ArrayLike] = None) -> torch.Tensor:
    """
    对对方图真实节点做 softmax；被 mask 掉的 dummy 节点权重为 0

    Raises:
        EmptyInputError: mask 之后没有节点
    """
    e = _tensor(e_row).reshape(-1)
    m = torch.ones_like(e, dtype=torch.bool) if mask is None else torch.as_tensor(np.asarray(mask, dtype=bool))
    if e.numel() == 0 or not bool(m.any()):
        raise EmptyInputError("attention needs at least one opposing real node")
    return masked_softmax(e, m, dim=0)


def aggregate_messages(
    source_parts: ArrayLike,
    attn: ArrayLike,
    proj: ArrayLike,
    part: Optional[int] = None,
) -> torch.Tensor:
    """
    o_j = sum_i a_ij · W_e · h_{si,q}
    同一节点的所有部件共享同一组注意力权重；part=None 时返回全部部件 (P, D_p)
    """
    src, a, proj = _tensor(source_parts), _tensor(attn).reshape(-1), _tensor(proj)
    if src.dim() == 2:
        src = src[:, None, :]
    if src.shape[0] != a.shape[0] or src.shape[-1] != proj.shape[1]:
        raise DimensionMismatchError(
            f"source parts {tuple(src.shape)} do not fit attention {tuple(a.shape)} / projection {tuple(proj.shape)}"
        )
    messages = torch.einsum('i,ipd->pd', a, src @ proj.T)
    return messages if part is None else messages[part]


def update_node(h_prev: ArrayLike, message: ArrayLike, mlp: nn.Module, is_dummy: bool = False) -> torch.Tensor:
    """h^(t) = MLP(concat(h^(t-1), o))；dummy 节点保持 0 向量"""
    h, o = _tensor(h_prev), _tensor(message)
    if h.shape != o.shape:
        raise DimensionMismatchError(f"feature {tuple(h.shape)} and message {tuple(o.shape)} differ")
    if is_dummy:
        return torch.zeros_like(h)
    return mlp(torch.cat([h, o], dim=-1))


# ==================== 批量前向 ====================

def propagate_tensors(
    params: MatchParams,
    xs: torch.Tensor,
    ms: torch.Tensor,
    xr: torch.Tensor,
    mr: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    T 轮同步更新：每轮两个方向的消息都由上一轮特征计算
    """
    keep_s = ms[..., None, None].to(DTYPE)
    keep_r = mr[..., None, None].to(DTYPE)
    for proj in params.projections:
        ys = xs @ proj.T
        yr = xr @ proj.T
        e = torch.einsum('bipd,bjpd->bij', ys, yr)
        attn_s = masked_softmax(e, mr[:, None, :], dim=2)
        attn_r = masked_softmax(e.transpose(1, 2), ms[:, None, :], dim=2)
        msg_s = torch.einsum('bij,bjpd->bipd', attn_s, yr)
        msg_r = torch.einsum('bji,bipd->bjpd', attn_r, ys)
        xs, xr = (
            params.update_mlp(torch.cat([xs, msg_s], dim=-1)) * keep_s,
            params.update_mlp(torch.cat([xr, msg_r], dim=-1)) * keep_r,
        )
    return xs, xr


def readout_tensors(params: MatchParams, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """
    u_i = 第 0 列 of (h_i W_u)；γ = softmax_i(u_i)（只在真实节点上）；h = sum_i γ_i h_i W_u
    """
    values = x.flatten(start_dim=2) @ params.readout_proj
    weights = masked_softmax(values[..., 0], mask, dim=1)
    return torch.einsum('bn,bng->bg', weights, values)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1))


def stack_graphs(graphs: Sequence[ContextGraph], n_max: Optional[int] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """把若干图堆成 (B, N, P, D_p) 张量和 (B, N) mask；不足 N 的补 dummy"""
    if not graphs:
        raise EmptyInputError("no graphs to stack")
    n = max([g.n_max for g in graphs] + [n_max or 0])
    P, Dp = graphs[0].part_count, graphs[0].part_dim
    x = np.zeros((len(graphs), n, P, Dp), dtype=np.float64)
    m = np.zeros((len(graphs), n), dtype=bool)
    for b, g in enumerate(graphs):
        if (g.part_count, g.part_dim) != (P, Dp):
            raise DimensionMismatchError(
                f"graph {g.group_id} has parts {(g.part_count, g.part_dim)}, expected {(P, Dp)}"
            )
        x[b, :g.n_max] = g.part_tensor()
        m[b, :g.n_max] = g.mask()
    return torch.from_numpy(x), torch.from_numpy(m)


def _check_fit(graph: ContextGraph, params: MatchParams) -> None:
    if (graph.part_count, graph.part_dim) != (params.part_count, params.part_dim):
        raise ConfigurationError(
            f"graph parts {(graph.part_count, graph.part_dim)} do not match params "
            f"{(params.part_count, params.part_dim)}"
        )


def _with_features(graph: ContextGraph, feats: np.ndarray) -> ContextGraph:
    nodes = tuple(
        Node(descriptor=node.descriptor, part_features=feats[i].copy())
        for i, node in enumerate(graph.nodes)
    )
    return ContextGraph(nodes=nodes, edges=graph.edges, n_max=graph.n_max,
                        group_id=graph.group_id, camera_id=graph.camera_id)


# ==================== 图级接口 ====================

def propagate(g_s: ContextGraph, g_r: ContextGraph, params: MatchParams) -> Tuple[ContextGraph, ContextGraph]:
    """对一对图执行 T 轮图间消息传递，返回节点特征更新后的两张图"""
    _check_fit(g_s, params)
    _check_fit(g_r, params)
    if g_s.n_real == 0 or g_r.n_real == 0:
        raise EmptyInputError("both graphs need at least one real node")
    xs, ms = stack_graphs([g_s])
    xr, mr = stack_graphs([g_r])
    with torch.no_grad():
        ys, yr = propagate_tensors(params, xs, ms, xr, mr)
    return (_with_features(g_s, ys[0, :g_s.n_max].numpy()),
            _with_features(g_r, yr[0, :g_r.n_max].numpy()))


def readout(graph: ContextGraph, params: MatchParams) -> GraphEmbedding:
    """自注意力读出图嵌入"""
    _check_fit(graph, params)
    if graph.n_real == 0:
        raise EmptyInputError("readout needs at least one real node")
    x, m = stack_graphs([graph])
    with torch.no_grad():
        h = readout_tensors(params, x, m)[0]
    return GraphEmbedding(vector=h.numpy().copy())


def group_similarity(h_s: Union[GraphEmbedding, ArrayLike], h_r: Union[GraphEmbedding, ArrayLike]) -> float:
    """两个图嵌入的余弦相似度"""
    a = np.asarray(getattr(h_s, 'vector', h_s), dtype=np.float64)
    b = np.asarray(getattr(h_r, 'vector', h_r), dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise NumericalError("cosine similarity of a zero embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def match_similarity(g_s: ContextGraph, g_r: ContextGraph, params: MatchParams) -> float:
    """propagate + readout + cosine 的完整一对图相似度"""
    p_s, p_r = propagate(g_s, g_r, params)
    return group_similarity(readout(p_s, params), readout(p_r, params))


def match_scores(
    probes: Sequence[ContextGraph],
    galleries: Sequence[ContextGraph],
    params: MatchParams,
) -> np.ndarray:
    """批量计算 probes[i] 与 galleries[i] 的相似度，结果与逐对计算一致"""
    if len(probes) != len(galleries):
        raise DimensionMismatchError(f"{len(probes)} probes vs {len(galleries)} galleries")
    for g in list(probes) + list(galleries):
        _check_fit(g, params)
    n = max(g.n_max for g in list(probes) + list(galleries))
    xs, ms = stack_graphs(probes, n)
    xr, mr = stack_graphs(galleries, n)
    with torch.no_grad():
        sims = params(xs, ms, xr, mr)
    if not torch.isfinite(sims).all():
        raise NumericalError("non-finite group similarity (zero embedding?)")
    return sims.numpy().copy()

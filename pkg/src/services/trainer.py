"""
训练服务
由同身份跨相机视图构造正样本对、随机抽取不同身份作为负样本，
用 circle loss（或关闭 CL 时的成对 margin loss）以普通 SGD 训练组匹配参数；
打分器为双线性时，其矩阵以跨视图成员对的 BCE 一起训练
"""

import random
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from torch import nn

from src.analyzers.group_matching import INIT_SCHEMES, MatchParams, stack_graphs
from src.analyzers.losses import pairwise_margin_loss
from src.analyzers.random_walk import (
    AffinityScorer,
    BilinearScorer,
    graph_walk_matrix,
    make_scorer,
    select_best_graph,
)
from src.config import Config
from src.core.exceptions import ConfigurationError, DataError, EmptyInputError, NumericalError
from src.models import ContextGraph, DatasetManifest, PipelineFlags, ScorerConfig
from src.processors.graph_builder import build_graph, sweep_candidates
from src.services.evaluator import resolve_n_max

# (probe 侧图, gallery 侧图, 是否同一身份)
PairSample = Tuple[ContextGraph, ContextGraph, bool]
OptimizerFactory = Callable[[Iterable[nn.Parameter], float], torch.optim.Optimizer]


def _plain_sgd(parameters: Iterable[nn.Parameter], lr: float) -> torch.optim.Optimizer:
    return torch.optim.SGD(parameters, lr=lr)


@dataclass
class TrainConfig:
    learning_rate: float = Config.LEARNING_RATE
    epochs: int = Config.EPOCHS
    batch_pairs: int = Config.BATCH_PAIRS
    seed: int = Config.SEED
    flags: PipelineFlags = field(default_factory=lambda: PipelineFlags(
        rw=Config.ENABLE_RW, gm=Config.ENABLE_GM, cl=Config.ENABLE_CL
    ))
    walk_steps: int = Config.WALK_STEPS
    scorer_kind: str = Config.SCORER_KIND
    affinity_loss_weight: float = Config.AFFINITY_LOSS_WEIGHT
    margin: float = Config.CONTRASTIVE_MARGIN
    n_max: int = Config.N_MAX
    rounds: int = Config.MATCH_ROUNDS
    embed_dim: int = Config.EMBED_DIM
    gamma: float = Config.CIRCLE_GAMMA
    weight_pos: float = Config.CIRCLE_WEIGHT_POS
    weight_neg: float = Config.CIRCLE_WEIGHT_NEG
    grad_check: bool = False
    grad_check_eps: float = Config.GRAD_CHECK_EPS
    grad_check_tolerance: float = Config.GRAD_CHECK_TOLERANCE
    probe_camera: str = Config.PROBE_CAMERA
    init: str = Config.MATCH_INIT
    optimizer_factory: OptimizerFactory = _plain_sgd

    def __post_init__(self):
        if not (self.learning_rate > 0 and np.isfinite(self.learning_rate)):
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_pairs < 1:
            raise ConfigurationError(f"batch_pairs must be >= 1, got {self.batch_pairs}")
        if self.walk_steps < 1:
            raise ConfigurationError(f"walk_steps must be >= 1, got {self.walk_steps}")
        if self.init not in INIT_SCHEMES:
            raise ConfigurationError(f"unknown init {self.init!r}, expected one of {INIT_SCHEMES}")
        if not self.flags.gm:
            raise ConfigurationError("training needs the GM stage; nothing else has parameters to learn")


@dataclass
class TrainReport:
    params: MatchParams
    scorer: AffinityScorer
    losses: List[float]                 # 每个 epoch 的平均 batch loss
    n_max: int
    steps: int = 0
    grad_check_error: Optional[float] = None
    grad_check_skipped: int = 0


class BilinearAffinity(nn.Module):
    """可训练的双线性亲和度矩阵 M，初始化为单位阵"""

    def __init__(self, feature_dim: int, matrix: Optional[np.ndarray] = None):
        super().__init__()
        init = np.eye(feature_dim) if matrix is None else np.asarray(matrix, dtype=np.float64)
        self.matrix = nn.Parameter(torch.as_tensor(init.copy(), dtype=torch.float64))

    def logits(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        sym = 0.5 * (self.matrix + self.matrix.T)
        return ((a @ sym) * b).sum(-1)

    def scorer(self) -> BilinearScorer:
        return BilinearScorer(self.matrix.detach().numpy().copy())


# ==================== 样本构造 ====================

def set_seed(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


@contextmanager
def deterministic_algorithms() -> Iterator[None]:
    """with 块内开启 torch 确定性算法，退出时恢复调用前的设置"""
    previous = torch.are_deterministic_algorithms_enabled()
    warn_only = torch.is_deterministic_algorithms_warn_only_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous, warn_only=warn_only)


def build_pairs(
    manifest: DatasetManifest,
    n_max: int,
    rng: np.random.Generator,
    probe_camera: str = Config.PROBE_CAMERA,
) -> List[PairSample]:
    """
    正样本：同一 group_id 的两两跨相机视图（probe 相机的视图放在左边）
    负样本：每个正样本配一个均匀随机抽取的其他身份的视图

    Raises:
        DataError: 少于 2 个身份，或没有任何跨相机正样本
    """
    by_identity: Dict[str, List[ContextGraph]] = {}
    for group in manifest.groups:
        by_identity.setdefault(group.group_id, []).append(build_graph(group, n_max))
    identities = sorted(by_identity)
    if len(identities) < 2:
        raise DataError(f"training needs at least 2 identities, found {len(identities)}")

    positives: List[Tuple[ContextGraph, ContextGraph]] = []
    for gid in identities:
        views = sorted(by_identity[gid], key=lambda g: (g.camera_id != probe_camera, g.camera_id))
        for i in range(len(views)):
            for j in range(i + 1, len(views)):
                positives.append((views[i], views[j]))
    if not positives:
        raise DataError("no identity is seen by two cameras; nothing to train on")

    pairs: List[PairSample] = [(a, b, True) for a, b in positives]
    for a, b in positives:
        others = [gid for gid in identities if gid != a.group_id]
        other = others[int(rng.integers(len(others)))]
        views = by_identity[other]
        same_cam = [g for g in views if g.camera_id == b.camera_id]
        pool = same_cam or views
        pairs.append((a, pool[int(rng.integers(len(pool)))], False))
    return pairs


def _select_sources(
    pairs: Sequence[PairSample],
    scorer: AffinityScorer,
    steps: int,
) -> List[ContextGraph]:
    candidates: Dict[Tuple[str, str], List[ContextGraph]] = {}
    sources = []
    for probe, gallery, _ in pairs:
        key = (probe.group_id, probe.camera_id)
        if key not in candidates:
            candidates[key] = sweep_candidates(probe, graph_walk_matrix(probe, scorer), steps)
        best, _ = select_best_graph(candidates[key], gallery, scorer, steps)
        sources.append(best)
    return sources


# ==================== loss 与梯度 ====================

def batch_similarities(
    batch: Sequence[PairSample],
    params: MatchParams,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """batch 中每个样本对的组相似度 (B,) 与正样本标记 (B,) bool"""
    labels = [is_pos for _, _, is_pos in batch]
    if not any(labels) or all(labels):
        raise EmptyInputError("a batch needs at least one positive and one negative pair")

    n = max(max(a.n_max, b.n_max) for a, b, _ in batch)
    xs, ms = stack_graphs([a for a, _, _ in batch], n)
    xr, mr = stack_graphs([b for _, b, _ in batch], n)
    return params(xs, ms, xr, mr), torch.as_tensor(labels)


def _loss_from_sims(
    sims: torch.Tensor,
    is_pos: torch.Tensor,
    params: MatchParams,
    cl: bool,
    margin: float,
) -> torch.Tensor:
    pos, neg = sims[is_pos], sims[~is_pos]
    if cl:
        return params.loss(pos, neg)
    return pairwise_margin_loss(pos, neg, margin)


def batch_loss(
    batch: Sequence[PairSample],
    params: MatchParams,
    cl: bool = True,
    margin: float = Config.CONTRASTIVE_MARGIN,
) -> torch.Tensor:
    """
    一个 batch 的可微 loss；batch 中左侧图即为已选好的 probe 子图

    Raises:
        EmptyInputError: batch 缺少正样本或负样本
    """
    sims, is_pos = batch_similarities(batch, params)
    return _loss_from_sims(sims, is_pos, params, cl, margin)


def loss_and_grad(
    batch: Sequence[PairSample],
    params: MatchParams,
    cl: bool = True,
    margin: float = Config.CONTRASTIVE_MARGIN,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """loss 值与每个参数张量的梯度（反向模式自动微分）"""
    params.zero_grad()
    loss = batch_loss(batch, params, cl, margin)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss {float(loss)}")
    loss.backward()
    grads = {}
    for name, p in params.named_parameters():
        grads[name] = (p.grad.detach().numpy().copy() if p.grad is not None
                       else np.zeros(tuple(p.shape)))
    params.zero_grad()
    return float(loss), grads


@dataclass
class GradientCheck:
    errors: Dict[str, float]            # 每个参数张量的相对误差
    skipped: Dict[str, int]             # 中心差分跨过 ReLU / hinge 拐点而跳过的分量数
    noise_floor: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def total_skipped(self) -> int:
        return sum(self.skipped.values())


def _switch_pattern(
    batch: Sequence[PairSample],
    params: MatchParams,
    cl: bool,
    margin: float,
) -> Tuple[float, List[torch.Tensor]]:
    """
    不求导地计算 loss，同时记录所有分段线性开关的状态:
    真实节点上 MLP 隐层的 ReLU 是否激活，以及关闭 CL 时每个负样本的 hinge 是否激活
    """
    n = max(max(a.n_max, b.n_max) for a, b, _ in batch)
    _, ms = stack_graphs([a for a, _, _ in batch], n)
    _, mr = stack_graphs([b for _, b, _ in batch], n)
    masks = (ms, mr)

    hidden: List[torch.Tensor] = []
    hook = params.update_mlp[0].register_forward_hook(lambda _m, _i, out: hidden.append(out > 0))
    try:
        with torch.no_grad():
            sims, is_pos = batch_similarities(batch, params)
            loss = float(_loss_from_sims(sims, is_pos, params, cl, margin))
    finally:
        hook.remove()

    # propagate 每轮依次对 probe 侧和 gallery 侧调用一次 MLP
    pattern = [h[masks[k % 2]] for k, h in enumerate(hidden)]
    if not cl:
        pattern.append(sims[~is_pos] > margin)
    return loss, pattern


def _same_pattern(a: Sequence[torch.Tensor], b: Sequence[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def gradient_check(
    batch: Sequence[PairSample],
    params: MatchParams,
    eps: float = Config.GRAD_CHECK_EPS,
    cl: bool = True,
    margin: float = Config.CONTRASTIVE_MARGIN,
    tolerance: float = Config.GRAD_CHECK_TOLERANCE,
) -> GradientCheck:
    """
    中心差分梯度检查，每个参数张量的相对误差:
        max|g_auto - g_fd| / max(max|g_auto|, max|g_fd|, noise_floor / tolerance)

    noise_floor 是差分的舍入噪声 ~ 64·ε_mach·max(1, |loss|) / eps；梯度整体低于
    noise_floor / tolerance 的张量按绝对误差比较。
    ReLU 与 hinge 在拐点处不可导：θ±eps 与 θ 的开关状态不一致的分量不参与比较，计入 skipped
    """
    loss, analytic = loss_and_grad(batch, params, cl, margin)
    _, base_pattern = _switch_pattern(batch, params, cl, margin)
    noise_floor = 64.0 * float(np.finfo(np.float64).eps) * max(1.0, abs(loss)) / eps

    errors: Dict[str, float] = {}
    skipped: Dict[str, int] = {}
    for name, p in params.named_parameters():
        a = analytic[name]
        worst, scale, skips = 0.0, 0.0, 0
        for idx in np.ndindex(*a.shape):
            with torch.no_grad():
                orig = float(p[idx])
                p[idx] = orig + eps
                up, up_pattern = _switch_pattern(batch, params, cl, margin)
                p[idx] = orig - eps
                down, down_pattern = _switch_pattern(batch, params, cl, margin)
                p[idx] = orig
            if not (_same_pattern(up_pattern, base_pattern) and _same_pattern(down_pattern, base_pattern)):
                skips += 1
                continue
            numeric = (up - down) / (2.0 * eps)
            worst = max(worst, abs(float(a[idx]) - numeric))
            scale = max(scale, abs(float(a[idx])), abs(numeric))
        errors[name] = worst / max(scale, noise_floor / tolerance)
        skipped[name] = skips

    if sum(skipped.values()):
        logger.debug(f"梯度检查跳过 {sum(skipped.values())} 个拐点分量: {skipped}")
    return GradientCheck(errors=errors, skipped=skipped, noise_floor=noise_floor)


# ==================== 训练循环 ====================

def _affinity_loss(
    batch: Sequence[PairSample],
    affinity: BilinearAffinity,
) -> Optional[torch.Tensor]:
    """正样本对中跨视图成员两两 BCE：同一 person_id 为正"""
    left, right, labels = [], [], []
    for a, b, is_pos in batch:
        if not is_pos:
            continue
        for da in a.descriptors:
            for db in b.descriptors:
                left.append(da.feature)
                right.append(db.feature)
                labels.append(1.0 if da.person_id == db.person_id else 0.0)
    if not labels:
        return None
    logits = affinity.logits(torch.as_tensor(np.stack(left)), torch.as_tensor(np.stack(right)))
    return F.binary_cross_entropy_with_logits(logits, torch.as_tensor(labels, dtype=torch.float64))


def _batch_indices(n_pos: int, batch_pairs: int, rng: np.random.Generator) -> List[List[int]]:
    """build_pairs 中第 i 个正样本对应第 n_pos + i 个负样本，二者总在同一 batch"""
    order = rng.permutation(n_pos)
    out = []
    for start in range(0, n_pos, batch_pairs):
        idx = [int(i) for i in order[start:start + batch_pairs]]
        out.append(idx + [n_pos + i for i in idx])
    return out


def train(dataset: DatasetManifest, config: TrainConfig) -> TrainReport:
    """
    训练组匹配参数，同一数据集、配置和种子的结果逐位一致

    Raises:
        DataError: 身份不足或没有跨相机正样本
        NumericalError: 出现非有限 loss
    """
    with deterministic_algorithms():
        return _train(dataset, config)


def _train(dataset: DatasetManifest, config: TrainConfig) -> TrainReport:
    set_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    if dataset.feature_dim % dataset.part_count != 0:
        raise ConfigurationError(
            f"part count must divide dimension (D={dataset.feature_dim}, P={dataset.part_count})"
        )
    n_max = resolve_n_max(dataset, config.n_max)
    pairs = build_pairs(dataset, n_max, rng, config.probe_camera)
    n_pos = sum(1 for p in pairs if p[2])
    logger.info(f"🎯 训练样本: {n_pos} 个正样本对, {len(pairs) - n_pos} 个负样本对, n_max={n_max}")

    params = MatchParams(
        part_dim=dataset.feature_dim // dataset.part_count,
        part_count=dataset.part_count,
        rounds=config.rounds,
        embed_dim=config.embed_dim,
        gamma=config.gamma,
        weight_pos=config.weight_pos,
        weight_neg=config.weight_neg,
        seed=config.seed,
        init=config.init,
    )
    affinity = BilinearAffinity(dataset.feature_dim) if config.scorer_kind == 'bilinear' else None
    scorer = affinity.scorer() if affinity is not None else make_scorer(
        ScorerConfig(kind=config.scorer_kind), dataset.feature_dim
    )

    trainable = list(params.parameters())
    if affinity is not None:
        trainable += list(affinity.parameters())
    optimizer = config.optimizer_factory(trainable, config.learning_rate)

    def _resolve(batch: Sequence[PairSample], current: AffinityScorer) -> List[PairSample]:
        if not config.flags.rw:
            return list(batch)
        sources = _select_sources(batch, current, config.walk_steps)
        return [(s, b, y) for s, (_, b, y) in zip(sources, batch)]

    # 打分器固定时子图选择与参数无关，只算一次
    selected: Optional[List[PairSample]] = None
    if affinity is None:
        selected = _resolve(pairs, scorer)

    grad_error, grad_skipped = None, 0
    if config.grad_check:
        idx = list(range(min(n_pos, 2)))
        idx += [n_pos + i for i in idx]
        check_batch = [selected[i] for i in idx] if selected else _resolve([pairs[i] for i in idx], scorer)
        check = gradient_check(check_batch, params, config.grad_check_eps, config.flags.cl,
                               config.margin, config.grad_check_tolerance)
        grad_error, grad_skipped = check.max_error, check.total_skipped
        logger.info(f"🔬 梯度检查: 最大相对误差 {grad_error:.3e}，跳过 {grad_skipped} 个拐点分量")
        if grad_error > config.grad_check_tolerance:
            worst = max(check.errors, key=check.errors.get)
            raise NumericalError(
                f"gradient check failed: max relative error {grad_error:.3e} on {worst} "
                f"exceeds {config.grad_check_tolerance:.0e}"
            )

    losses: List[float] = []
    steps = 0
    for epoch in range(config.epochs):
        batch_losses = []
        for idx in _batch_indices(n_pos, config.batch_pairs, rng):
            batch = [pairs[i] for i in idx]
            resolved = [selected[i] for i in idx] if selected is not None else _resolve(batch, scorer)

            optimizer.zero_grad()
            loss = batch_loss(resolved, params, config.flags.cl, config.margin)
            if affinity is not None:
                aff = _affinity_loss(batch, affinity)
                if aff is not None:
                    loss = loss + config.affinity_loss_weight * aff
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}, step {steps + 1}")
            loss.backward()
            optimizer.step()
            steps += 1
            batch_losses.append(float(loss))
            if affinity is not None:
                scorer = affinity.scorer()

        epoch_loss = float(np.mean(batch_losses))
        losses.append(epoch_loss)
        logger.debug(f"epoch {epoch + 1}/{config.epochs}: loss {epoch_loss:.6f}")

    logger.success(f"✅ 训练完成: {config.epochs} 个 epoch, {steps} 步, 最终 loss {losses[-1]:.6f}")
    return TrainReport(params=params, scorer=scorer, losses=losses, n_max=n_max,
                       steps=steps, grad_check_error=grad_error,
                       grad_check_skipped=grad_skipped)

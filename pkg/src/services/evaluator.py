"""
评估服务
对每个 probe 组给所有 gallery 组打分排序，统计 CMC，输出结果文件，以及 Base/+RW/+GM/+RW+GM 消融
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from src.analyzers.group_matching import match_scores
from src.analyzers.random_walk import AffinityScorer, graph_walk_matrix, select_best_graph
from src.config import Config
from src.core.context import PipelineContext
from src.core.exceptions import ConfigurationError, DataError, EmptyInputError, GraphSizeError, NumericalError
from src.models import ContextGraph, DatasetManifest, RankingResult
from src.processors.graph_builder import build_graph, sweep_candidates

SelectionKey = Tuple[str, str]
Selections = Dict[SelectionKey, ContextGraph]


def resolve_n_max(manifest: DatasetManifest, configured: int = 0) -> int:
    """configured 为 0 时取数据集中最大组的人数"""
    largest = manifest.max_group_size()
    if configured <= 0:
        return largest
    if largest > configured:
        raise GraphSizeError(f"dataset has a group of {largest} members, n_max is {configured}")
    return configured


def split_views(
    manifest: DatasetManifest,
    n_max: int,
    probe_camera: str = Config.PROBE_CAMERA,
    gallery_camera: str = Config.GALLERY_CAMERA,
) -> Tuple[List[ContextGraph], List[ContextGraph]]:
    """probe 视图与 gallery 视图各自建图；gallery 中 group_id 必须唯一"""
    probes = [build_graph(g, n_max) for g in manifest.view(probe_camera)]
    gallery = [build_graph(g, n_max) for g in manifest.view(gallery_camera)]
    if not probes:
        raise EmptyInputError(f"no groups in probe camera {probe_camera!r}")
    if not gallery:
        raise EmptyInputError(f"no groups in gallery camera {gallery_camera!r}")
    ids = [g.group_id for g in gallery]
    if len(set(ids)) != len(ids):
        raise DataError(f"gallery camera {gallery_camera!r} has duplicate group ids")
    return probes, gallery


def baseline_similarity(g_s: ContextGraph, g_r: ContextGraph) -> float:
    """不经过组匹配：成员特征均值之间的余弦相似度"""
    a = g_s.real_features().mean(axis=0)
    b = g_r.real_features().mean(axis=0)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise NumericalError(f"zero mean feature in {g_s.group_id} or {g_r.group_id}")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _select_for_probe(
    probe: ContextGraph,
    gallery: Sequence[ContextGraph],
    scorer: AffinityScorer,
    steps: int,
) -> Dict[SelectionKey, ContextGraph]:
    candidates = sweep_candidates(probe, graph_walk_matrix(probe, scorer), steps)
    chosen = {}
    for g in gallery:
        best, _ = select_best_graph(candidates, g, scorer, steps)
        chosen[(probe.group_id, g.group_id)] = best
    return chosen


def select_subgraphs(
    probes: Sequence[ContextGraph],
    gallery: Sequence[ContextGraph],
    scorer: AffinityScorer,
    steps: int = 1,
    threads: int = 1,
) -> Selections:
    """
    为每个 (probe, gallery) 对挑选 probe 的最佳子图
    结果可以在消融的 +RW 与 +RW+GM 两个变体之间复用
    """
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda p: _select_for_probe(p, gallery, scorer, steps), probes))
    selections: Selections = {}
    for part in parts:
        selections.update(part)
    return selections


def _rank_one(
    probe: ContextGraph,
    gallery: Sequence[ContextGraph],
    ctx: PipelineContext,
    selections: Optional[Selections],
) -> RankingResult:
    if ctx.flags.rw:
        if selections is None:
            selections = _select_for_probe(probe, gallery, ctx.scorer, ctx.walk_steps)
        sources = [selections[(probe.group_id, g.group_id)] for g in gallery]
    else:
        sources = [probe] * len(gallery)

    if ctx.flags.gm:
        scores = match_scores(sources, gallery, ctx.params)
    else:
        scores = np.array([baseline_similarity(s, g) for s, g in zip(sources, gallery)])

    order = sorted(range(len(gallery)), key=lambda i: (-scores[i], gallery[i].group_id))
    ranked_ids = tuple(gallery[i].group_id for i in order)
    ranked_scores = tuple(float(scores[i]) for i in order)
    correct = ranked_ids.index(probe.group_id) + 1 if probe.group_id in ranked_ids else None
    return RankingResult(
        probe_id=probe.group_id,
        gallery_ids=ranked_ids,
        scores=ranked_scores,
        correct_rank=correct,
    )


def rank_all(
    probes: Sequence[ContextGraph],
    gallery: Sequence[ContextGraph],
    ctx: PipelineContext,
    selections: Optional[Selections] = None,
) -> List[RankingResult]:
    """
    对每个 probe 给全部 gallery 打分排序（分数降序，同分按 gallery id 升序）
    结果按 probe id 排序，与线程数无关

    Raises:
        EmptyInputError: probe 或 gallery 为空
        ConfigurationError: 开启 GM 但没有参数
    """
    if not probes or not gallery:
        raise EmptyInputError("rank_all needs at least one probe and one gallery graph")
    if ctx.flags.gm and ctx.params is None:
        raise ConfigurationError("GM stage enabled without match parameters")

    with ThreadPoolExecutor(max_workers=ctx.threads) as pool:
        results = list(pool.map(lambda p: _rank_one(p, gallery, ctx, selections), probes))
    results.sort(key=lambda r: r.probe_id)

    missing = sum(1 for r in results if r.correct_rank is None)
    if missing:
        logger.warning(f"⚠️ {missing} 个 probe 在 gallery 中没有真实匹配，计为未命中")
    return results


def cmc(results: Sequence[RankingResult], ks: Sequence[int] = Config.CMC_TOPK) -> Dict[int, float]:
    """
    CMC@k = 正确匹配排名 <= k 的 probe 比例；没有真实匹配的 probe 计为未命中
    """
    if not results:
        raise EmptyInputError("cmc needs at least one ranking result")
    if any(k < 1 for k in ks):
        raise ConfigurationError(f"CMC ranks must be positive, got {list(ks)}")
    ranks = np.array([r.correct_rank if r.correct_rank is not None else np.inf for r in results])
    return {int(k): float(np.mean(ranks <= k)) for k in ks}


def run_ablation(
    probes: Sequence[ContextGraph],
    gallery: Sequence[ContextGraph],
    ctx: PipelineContext,
) -> Dict[str, Tuple[List[RankingResult], Dict[int, float]]]:
    """
    依次运行 Base / +RW / +GM / +RW+GM 四个变体；没有模型参数时跳过 GM 变体
    RW 选择只计算一次，供两个 RW 变体共用
    """
    variants = [(False, False), (True, False), (False, True), (True, True)]
    if ctx.params is None:
        logger.warning("⚠️ 没有模型参数，跳过 +GM 与 +RW+GM 变体")
        variants = [v for v in variants if not v[1]]

    selections = select_subgraphs(probes, gallery, ctx.scorer, ctx.walk_steps, ctx.threads)
    report = {}
    for rw, gm in variants:
        variant = ctx.with_flags(rw=rw, gm=gm)
        results = rank_all(probes, gallery, variant, selections if rw else None)
        curve = cmc(results)
        report[variant.flags.label] = (results, curve)
        logger.info(f"📊 {variant.flags.label:<8} " + "  ".join(
            f"Rank-{k}: {v * 100:.2f}%" for k, v in curve.items()
        ))
    return report


def format_results(
    label: str,
    results: Sequence[RankingResult],
    curve: Dict[int, float],
    top_n: int = Config.RESULTS_TOP_N,
) -> str:
    lines = [f"# variant\t{label}", "probe_id\trank\ttop{}".format(top_n)]
    for r in results:
        rank = str(r.correct_rank) if r.correct_rank is not None else '-'
        lines.append(f"{r.probe_id}\t{rank}\t{','.join(r.gallery_ids[:top_n])}")
    for k, v in curve.items():
        lines.append(f"# Rank-{k}\t{v * 100:.2f}")
    return "\n".join(lines) + "\n"


def write_results(
    path: str,
    sections: Sequence[Tuple[str, Sequence[RankingResult], Dict[int, float]]],
) -> None:
    """结果文件：每个变体一个区块，内容只取决于输入，字节级可复现"""
    text = "\n".join(format_results(label, results, curve) for label, results, curve in sections)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(text)
    logger.info(f"💾 评估结果已写入 {path}")

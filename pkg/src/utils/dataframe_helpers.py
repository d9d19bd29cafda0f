"""
DataFrame 辅助函数
把数据集、校验结果和 CMC 曲线整理成 DataFrame，便于日志输出和对比
"""

from typing import Dict, Mapping, Sequence

import pandas as pd

from src.models import DatasetManifest, RankingResult, Violation


SUMMARY_COLUMNS = ['group_id', 'camera_id', 'members', 'min_depth', 'max_depth']


def summarize_dataset(manifest: DatasetManifest) -> pd.DataFrame:
    """
    每个组视图一行：group_id, camera_id, 成员数, 最小/最大深度

    Example:
        >>> summarize_dataset(manifest).iloc[0]['members']
        4
    """
    rows = [
        {
            'group_id': g.group_id,
            'camera_id': g.camera_id,
            'members': g.size,
            'min_depth': min((m.depth_mean for m in g.members), default=float('nan')),
            'max_depth': max((m.depth_mean for m in g.members), default=float('nan')),
        }
        for g in manifest.groups
    ]
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def camera_totals(summary: pd.DataFrame) -> pd.DataFrame:
    """按相机汇总：组数、人数、平均组大小"""
    if summary.empty:
        return pd.DataFrame(columns=['groups', 'persons', 'mean_size'])
    return summary.groupby('camera_id')['members'].agg(
        groups='count', persons='sum', mean_size='mean'
    ).sort_index()


def violations_frame(violations: Sequence[Violation]) -> pd.DataFrame:
    return pd.DataFrame(
        [{'group_id': v.group_id, 'person_id': v.person_id, 'rule': v.rule} for v in violations],
        columns=['group_id', 'person_id', 'rule'],
    )


def cmc_table(curves: Mapping[str, Dict[int, float]]) -> pd.DataFrame:
    """
    消融结果表：行为变体，列为 Rank-k（百分比）
    """
    table = pd.DataFrame(
        {label: {f"Rank-{k}": v * 100.0 for k, v in curve.items()} for label, curve in curves.items()}
    ).T
    return table.round(2)


def rank_frame(results: Sequence[RankingResult]) -> pd.DataFrame:
    """每个 probe 一行：正确匹配的排名和第一名"""
    return pd.DataFrame(
        [
            {
                'probe_id': r.probe_id,
                'correct_rank': r.correct_rank,
                'top1': r.gallery_ids[0] if r.gallery_ids else None,
                'top1_score': r.scores[0] if r.scores else None,
            }
            for r in results
        ],
        columns=['probe_id', 'correct_rank', 'top1', 'top1_score'],
    )


def runs_frame(rows: Sequence[Mapping[str, object]]) -> pd.DataFrame:
    """运行历史中的评估记录，Rank-k 换算成百分比"""
    columns = ['dataset', 'variant', 'rank1', 'rank5', 'rank10', 'rank20']
    frame = pd.DataFrame(list(rows), columns=columns)
    ranks = columns[2:]
    frame[ranks] = frame[ranks].astype(float) * 100.0
    return frame.round(2)

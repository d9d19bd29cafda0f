"""
模型 checkpoint 读写
JSON 格式，浮点数以 float.hex 存储：加载后逐位一致，同一模型写出的文件字节级一致
"""

import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import torch
from loguru import logger

from src.analyzers.group_matching import INIT_UNIFORM, MatchParams
from src.core.exceptions import CheckpointError, ConfigurationError
from src.models import ScorerConfig

CHECKPOINT_FORMAT = 'group-reid-checkpoint'
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    params: MatchParams
    scorer: ScorerConfig
    meta: Dict[str, Any] = field(default_factory=dict)


def _encode_array(arr: np.ndarray) -> Dict[str, Any]:
    arr = np.asarray(arr, dtype=np.float64)
    return {'shape': list(arr.shape), 'data': [float(x).hex() for x in arr.reshape(-1)]}


def _decode_array(blob: Dict[str, Any]) -> np.ndarray:
    shape = tuple(int(s) for s in blob['shape'])
    values = np.array([float.fromhex(x) for x in blob['data']], dtype=np.float64)
    if values.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"tensor data of length {values.size} does not fit shape {shape}")
    return values.reshape(shape)


def save_checkpoint(
    path: str,
    params: MatchParams,
    scorer: ScorerConfig,
    meta: Optional[Dict[str, Any]] = None,
) -> None:
    tensors = {name: _encode_array(p.detach().numpy()) for name, p in params.named_parameters()}
    doc = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'params': params.describe(),
        'tensors': tensors,
        'scorer': {
            'kind': scorer.kind,
            'matrix': None if scorer.matrix is None else _encode_array(scorer.matrix),
        },
        'meta': meta or {},
    }
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write('\n')
    logger.info(f"💾 checkpoint 已保存: {path} ({len(tensors)} 个参数张量)")


def load_checkpoint(path: str) -> Checkpoint:
    """
    Raises:
        FileNotFoundError: 文件不存在
        CheckpointError: 格式或版本不对、张量形状不匹配
    """
    with open(path, 'r', encoding='utf-8') as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path} is not a checkpoint: {e}") from e

    if not isinstance(doc, dict) or doc.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint")
    if doc.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")

    try:
        cfg = doc['params']
        params = MatchParams(
            part_dim=int(cfg['part_dim']),
            part_count=int(cfg['part_count']),
            rounds=int(cfg['rounds']),
            embed_dim=int(cfg['embed_dim']),
            gamma=float(cfg['gamma']),
            weight_pos=float(cfg['weight_pos']),
            weight_neg=float(cfg['weight_neg']),
            seed=int(cfg['seed']),
            init=str(cfg.get('init', INIT_UNIFORM)),
        )
        tensors = doc['tensors']
        with torch.no_grad():
            for name, p in params.named_parameters():
                if name not in tensors:
                    raise CheckpointError(f"checkpoint is missing tensor {name!r}")
                values = _decode_array(tensors[name])
                if values.shape != tuple(p.shape):
                    raise CheckpointError(
                        f"tensor {name!r} has shape {values.shape}, expected {tuple(p.shape)}"
                    )
                p.copy_(torch.from_numpy(values))
        extra: List[str] = sorted(set(tensors) - {n for n, _ in params.named_parameters()})
        if extra:
            raise CheckpointError(f"checkpoint has unknown tensors {extra}")

        scorer_doc = doc['scorer']
        matrix = scorer_doc.get('matrix')
        scorer = ScorerConfig(
            kind=scorer_doc['kind'],
            matrix=None if matrix is None else _decode_array(matrix),
        )
    except (KeyError, TypeError, ValueError, ConfigurationError) as e:
        raise CheckpointError(f"malformed checkpoint {path}: {e}") from e

    logger.info(f"📂 checkpoint 已加载: {path}")
    return Checkpoint(params=params, scorer=scorer, meta=doc.get('meta', {}))

"""
合成群组重识别场景生成器

每个身份生成一组单位球面上的成员原型；两个相机视图共享 members - churn 个原型，
B 视图中被替换的成员用新的随机原型代替（成员加入/离开），A 视图额外加入干扰者。
每个成员的特征加各向同性噪声后重新归一化，深度在每个视图中独立均匀采样，
因此成员的相对位置（布局）在两个视图之间随机变化。
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from loguru import logger

from src.config import Config
from src.core.exceptions import ConfigurationError
from src.models import DatasetManifest, GroupSample, PersonDescriptor
from src.processors.feature_store import sort_members

PROBE_CAMERA = 'A'
GALLERY_CAMERA = 'B'


@dataclass
class SynthConfig:
    n_identities: int = Config.SYNTH_IDENTITIES
    members_min: int = Config.SYNTH_MEMBERS_MIN
    members_max: int = Config.SYNTH_MEMBERS_MAX
    feature_dim: int = Config.SYNTH_FEATURE_DIM
    noise_sigma: float = Config.SYNTH_NOISE_SIGMA
    churn_count: int = Config.SYNTH_CHURN
    distractor_count: int = Config.SYNTH_DISTRACTORS
    seed: int = Config.SEED
    part_count: int = Config.PART_COUNT
    depth_range: Tuple[float, float] = Config.SYNTH_DEPTH_RANGE

    def __post_init__(self):
        if self.n_identities < 1:
            raise ConfigurationError(f"n_identities must be positive, got {self.n_identities}")
        if self.members_min < 1 or self.members_max < self.members_min:
            raise ConfigurationError(f"empty members range {self.members_min}..{self.members_max}")
        if self.feature_dim < 1:
            raise ConfigurationError(f"feature_dim must be positive, got {self.feature_dim}")
        if self.part_count < 1 or self.feature_dim % self.part_count != 0:
            raise ConfigurationError(
                f"part count must divide dimension (D={self.feature_dim}, P={self.part_count})"
            )
        if not np.isfinite(self.noise_sigma) or self.noise_sigma < 0:
            raise ConfigurationError(f"noise_sigma must be finite and >= 0, got {self.noise_sigma}")
        if self.churn_count < 0 or self.distractor_count < 0:
            raise ConfigurationError("churn_count and distractor_count must be >= 0")
        if self.churn_count >= self.members_min:
            raise ConfigurationError(
                f"churn_count ({self.churn_count}) must be smaller than members ({self.members_min})"
            )
        lo, hi = self.depth_range
        if not (0 <= lo < hi):
            raise ConfigurationError(f"invalid depth range {self.depth_range}")


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _observe(
    rng: np.random.Generator,
    prototypes: np.ndarray,
    sigma: float,
) -> np.ndarray:
    if sigma == 0:
        return prototypes.copy()
    dim = prototypes.shape[1]
    noisy = prototypes + rng.standard_normal(prototypes.shape) * (sigma / np.sqrt(dim))
    return noisy / np.linalg.norm(noisy, axis=1, keepdims=True)


def _view(
    rng: np.random.Generator,
    config: SynthConfig,
    group_id: str,
    camera_id: str,
    person_ids: List[str],
    prototypes: np.ndarray,
) -> GroupSample:
    feats = _observe(rng, prototypes, config.noise_sigma)
    depths = rng.uniform(*config.depth_range, size=len(person_ids))
    members = [
        PersonDescriptor(person_id=pid, feature=feats[i], depth_mean=float(depths[i]),
                         part_count=config.part_count)
        for i, pid in enumerate(person_ids)
    ]
    return GroupSample(group_id=group_id, camera_id=camera_id, members=sort_members(members))


def generate(config: SynthConfig) -> DatasetManifest:
    """
    生成两视图合成数据集（A 为 probe 视图，B 为 gallery 视图），同一种子结果完全一致

    Raises:
        ConfigurationError: churn_count >= members 等非法配置
    """
    rng = np.random.default_rng(config.seed)
    width = max(4, len(str(config.n_identities)))
    groups: List[GroupSample] = []

    for idx in range(config.n_identities):
        gid = f"G{idx:0{width}d}"
        m = int(rng.integers(config.members_min, config.members_max + 1))
        base = _unit_rows(rng, m, config.feature_dim)
        base_ids = [f"{gid}_P{k}" for k in range(m)]

        kept = m - config.churn_count
        fresh = _unit_rows(rng, config.churn_count, config.feature_dim)
        fresh_ids = [f"{gid}_J{k}" for k in range(config.churn_count)]

        distractors = _unit_rows(rng, config.distractor_count, config.feature_dim)
        distractor_ids = [f"{gid}_X{k}" for k in range(config.distractor_count)]

        groups.append(_view(
            rng, config, gid, PROBE_CAMERA,
            base_ids + distractor_ids,
            np.vstack([base, distractors]),
        ))
        groups.append(_view(
            rng, config, gid, GALLERY_CAMERA,
            base_ids[:kept] + fresh_ids,
            np.vstack([base[:kept], fresh]),
        ))

    logger.info(
        f"🧪 合成数据: {config.n_identities} 个身份 × 2 视图, D={config.feature_dim}, "
        f"σ={config.noise_sigma}, churn={config.churn_count}, distractors={config.distractor_count}"
    )
    return DatasetManifest(groups=groups, feature_dim=config.feature_dim, part_count=config.part_count)

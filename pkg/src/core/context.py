"""
Pipeline Context - 统一管理一次评估/匹配运行所需的打分器、模型参数和开关
避免 rank_all / run_ablation 等函数参数过多
"""

from __future__ import annotations  # 启用延迟类型评估，避免循环导入

from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any, Optional

from src.core.exceptions import ConfigurationError
from src.models import PipelineFlags

if TYPE_CHECKING:
    from src.analyzers.group_matching import MatchParams
    from src.analyzers.random_walk import AffinityScorer
else:
    MatchParams = Any
    AffinityScorer = Any


@dataclass
class PipelineContext:
    """
    流水线上下文

    scorer:      RW 子图选择使用的亲和度打分器
    params:      组匹配参数；GM 关闭时可以为 None
    flags:       RW / GM / CL 开关
    walk_steps:  游走迭代次数 t
    threads:     并行线程数，只影响速度
    """
    scorer: AffinityScorer
    params: Optional[MatchParams] = None
    flags: PipelineFlags = field(default_factory=PipelineFlags)
    walk_steps: int = 1
    threads: int = 1

    def __post_init__(self):
        """验证上下文对象的有效性"""
        if self.scorer is None:
            raise ConfigurationError("scorer 不能为空")
        if self.flags.gm and self.params is None:
            raise ConfigurationError("GM 阶段已开启但没有模型参数 (缺少 checkpoint?)")
        if self.walk_steps < 1:
            raise ConfigurationError(f"walk_steps 必须 >= 1, 当前 {self.walk_steps}")
        if self.threads < 1:
            raise ConfigurationError(f"threads 必须 >= 1, 当前 {self.threads}")

    def with_flags(self, rw: bool, gm: bool) -> 'PipelineContext':
        """消融实验用：同一上下文切换 RW/GM 开关"""
        return replace(self, flags=PipelineFlags(rw=rw, gm=gm, cl=self.flags.cl))

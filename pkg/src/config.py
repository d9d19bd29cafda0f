"""
配置文件 - 所有默认配置项都在此文件中直接设置
如需修改配置，直接编辑本文件，或使用环境变量（优先）
环境变量优先级高于文件中的默认值；命令行参数与运行配置文件再覆盖这里的值
"""

import os
from typing import Tuple
from dotenv import load_dotenv

# 加载 .env 文件（如果存在）
load_dotenv()


def _env_bool(name: str, default: bool) -> bool:
    return os.getenv(name, str(default)).lower() == 'true'


def _env_ints(name: str, default: str) -> Tuple[int, ...]:
    raw = os.getenv(name, default)
    return tuple(int(x) for x in raw.split(',') if x.strip())


class Config:
    # ==================== 基础配置 ====================
    # 日志级别
    LOG_LEVEL = os.getenv('LOG_LEVEL', "INFO")
    # 日志文件（空字符串表示不写文件）
    LOG_FILE = os.getenv('LOG_FILE', "logs/group_reid.log")

    # 全局随机种子
    SEED = int(os.getenv('SEED', '0'))

    # 工作线程数（只影响速度，不影响结果）
    THREADS = int(os.getenv('THREADS', '1'))

    # 默认运行配置文件路径从这个环境变量读取
    CONFIG_ENV_VAR = "GROUPREID_CONFIG"

    # ==================== 图构建配置 ====================
    # 身体部件数 P (P=4 效果最好)
    PART_COUNT = int(os.getenv('PART_COUNT', '4'))
    # 固定节点数，0 表示取数据集中最大的组
    N_MAX = int(os.getenv('N_MAX', '0'))

    # ==================== 随机游走配置 ====================
    WALK_STEPS = int(os.getenv('WALK_STEPS', '1'))     # 游走迭代次数
    SCORER_KIND = os.getenv('SCORER_KIND', "cosine")   # 'cosine' 或 'bilinear'

    # ==================== 组匹配配置 ====================
    MATCH_ROUNDS = int(os.getenv('MATCH_ROUNDS', '2'))  # 图间消息传递轮数 T
    EMBED_DIM = int(os.getenv('EMBED_DIM', '0'))        # 图嵌入维度，0 表示 P*D_p
    MATCH_INIT = os.getenv('MATCH_INIT', "uniform")       # 'uniform' 或 'passthrough'（从成员均值相似度起步）
    CIRCLE_GAMMA = float(os.getenv('CIRCLE_GAMMA', '32.0'))
    CIRCLE_WEIGHT_POS = float(os.getenv('CIRCLE_WEIGHT_POS', '1.0'))
    CIRCLE_WEIGHT_NEG = float(os.getenv('CIRCLE_WEIGHT_NEG', '1.0'))
    CONTRASTIVE_MARGIN = float(os.getenv('CONTRASTIVE_MARGIN', '0.2'))  # 关闭 CL 时使用

    # ==================== 流水线模块开关 (消融实验) ====================
    ENABLE_RW = _env_bool('ENABLE_RW', True)   # 随机游走子图选择
    ENABLE_GM = _env_bool('ENABLE_GM', True)   # 图间注意力组匹配
    ENABLE_CL = _env_bool('ENABLE_CL', True)   # Circle loss

    # ==================== 训练配置 ====================
    LEARNING_RATE = float(os.getenv('LEARNING_RATE', '1e-4'))
    EPOCHS = int(os.getenv('EPOCHS', '300'))
    BATCH_PAIRS = int(os.getenv('BATCH_PAIRS', '16'))     # 每步正样本对数量（负样本同数量）
    AFFINITY_LOSS_WEIGHT = float(os.getenv('AFFINITY_LOSS_WEIGHT', '1.0'))  # 双线性打分器的 BCE 权重

    # 梯度检查
    GRAD_CHECK_EPS = 1e-5
    GRAD_CHECK_TOLERANCE = 1e-4

    # ==================== 评估配置 ====================
    CMC_TOPK = _env_ints('CMC_TOPK', "1,5,10,20")
    RESULTS_TOP_N = 20           # 结果文件每行记录的 top-N 画廊 id
    MATCH_TOP_K = 5              # match 命令默认输出条数
    PROBE_CAMERA = os.getenv('PROBE_CAMERA', "A")
    GALLERY_CAMERA = os.getenv('GALLERY_CAMERA', "B")

    # ==================== 合成数据配置 ====================
    SYNTH_IDENTITIES = int(os.getenv('SYNTH_IDENTITIES', '200'))
    SYNTH_MEMBERS_MIN = int(os.getenv('SYNTH_MEMBERS_MIN', '3'))
    SYNTH_MEMBERS_MAX = int(os.getenv('SYNTH_MEMBERS_MAX', '5'))
    SYNTH_FEATURE_DIM = int(os.getenv('SYNTH_FEATURE_DIM', '32'))
    SYNTH_NOISE_SIGMA = float(os.getenv('SYNTH_NOISE_SIGMA', '0.05'))
    SYNTH_CHURN = int(os.getenv('SYNTH_CHURN', '1'))
    SYNTH_DISTRACTORS = int(os.getenv('SYNTH_DISTRACTORS', '2'))
    SYNTH_DEPTH_RANGE = (0.5, 20.0)

    # ==================== 数据持久化配置 ====================
    ENABLE_PERSISTENCE = _env_bool('ENABLE_PERSISTENCE', False)
    PERSIST_DB_PATH = os.getenv('PERSIST_DB_PATH', "data/runs.db")

"""
Pytest configuration and fixtures
"""

import numpy as np
import pytest
from loguru import logger

from src.analyzers.group_matching import MatchParams
from src.analyzers.random_walk import CosineScorer
from src.services.synth import SynthConfig, generate

from helpers import make_person


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def scorer():
    return CosineScorer()


@pytest.fixture
def basis_people():
    """四个正交单位向量的成员，深度 1..4"""
    eye = np.eye(4)
    return [make_person(f"p{k}", eye[k], k + 1.0) for k in range(4)]


@pytest.fixture
def small_params():
    return MatchParams(part_dim=2, part_count=2, rounds=2, seed=7)


@pytest.fixture
def tiny_manifest():
    """5 个身份、两个视图、无噪声、无成员变动"""
    return generate(SynthConfig(
        n_identities=5, members_min=2, members_max=3, feature_dim=8, noise_sigma=0.0,
        churn_count=0, distractor_count=0, seed=3, part_count=2,
    ))


@pytest.fixture
def write_feature_file(tmp_path):
    """把若干行写成特征文件，返回路径"""
    def _write(lines, name='features.tsv'):
        path = tmp_path / name
        path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
        return path
    return _write


@pytest.fixture
def log_messages():
    """收集 loguru 输出，便于断言 CLI 诊断信息"""
    messages = []
    handler_id = logger.add(lambda msg: messages.append(str(msg)), level='DEBUG')
    yield messages
    logger.remove(handler_id)
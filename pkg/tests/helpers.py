"""
测试用的小工具：手工构造成员、组和数据集
"""

import numpy as np

from src.models import DatasetManifest, GroupSample, PersonDescriptor
from src.processors.feature_store import sort_members


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def make_person(pid, feature, depth, part_count=1):
    return PersonDescriptor(person_id=pid, feature=unit(feature), depth_mean=float(depth), part_count=part_count)


def make_group(gid, cam, people):
    return GroupSample(group_id=gid, camera_id=cam, members=sort_members(list(people)))


def random_group(rng, gid, cam, n, dim, part_count=1):
    feats = rng.standard_normal((n, dim))
    depths = rng.uniform(0.5, 20.0, size=n)
    return make_group(gid, cam, [
        make_person(f"{gid}_{cam}_{k}", feats[k], depths[k], part_count) for k in range(n)
    ])


def manifest_from(groups, dim, part_count=1):
    return DatasetManifest(groups=list(groups), feature_dim=dim, part_count=part_count)

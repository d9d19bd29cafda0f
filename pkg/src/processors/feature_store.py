"""
特征存储 - 读取、校验、保存每个人的特征向量、深度均值与组/相机标注

文件格式（每行一人，TAB 分隔，# 开头为注释）:
    group_id <TAB> camera_id <TAB> person_id <TAB> depth_mean <TAB> v1,v2,...,vD
"""

import math
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from loguru import logger

from src.core.exceptions import (
    ConfigurationError,
    DatasetFormatError,
    DimensionMismatchError,
    DuplicatePersonError,
)
from src.models import DatasetManifest, GroupSample, PersonDescriptor, Violation

NORM_TOLERANCE = 1e-9
FIELD_COUNT = 5


def _parse_line(line: str, line_no: int) -> Tuple[str, str, str, float, np.ndarray]:
    fields = line.split('\t')
    if len(fields) != FIELD_COUNT:
        raise DatasetFormatError(f"expected {FIELD_COUNT} tab-separated fields, got {len(fields)}", line_no)

    group_id, camera_id, person_id, depth_raw, vec_raw = (f.strip() for f in fields)
    if not group_id or not camera_id or not person_id:
        raise DatasetFormatError("empty group_id, camera_id or person_id", line_no)

    try:
        depth = float(depth_raw)
    except ValueError:
        raise DatasetFormatError(f"depth_mean is not a real number: {depth_raw!r}", line_no) from None
    if not math.isfinite(depth) or depth < 0:
        raise DatasetFormatError(f"depth_mean must be a finite non-negative real, got {depth_raw}", line_no)

    try:
        values = np.array([float(v) for v in vec_raw.split(',')], dtype=np.float64)
    except ValueError:
        raise DatasetFormatError("feature vector contains a non-numeric value", line_no) from None

    return group_id, camera_id, person_id, depth, values


def normalize_feature(values: np.ndarray) -> np.ndarray:
    """L2 归一化；含 NaN/Inf 的向量原样保留，交给 validate_dataset 报告"""
    if not np.all(np.isfinite(values)):
        return values
    norm = float(np.linalg.norm(values))
    if norm == 0.0:
        raise ValueError("zero-norm feature")
    return values / norm


def sort_members(members: List[PersonDescriptor]) -> Tuple[PersonDescriptor, ...]:
    """按深度升序排列成员，深度相同时按 person_id 升序"""
    return tuple(sorted(members, key=lambda d: d.sort_key))


def load_dataset(path: Union[str, Path], part_count: int) -> DatasetManifest:
    """
    读取特征文件并构建 DatasetManifest

    Args:
        path: 特征文件路径
        part_count: 身体部件数 P，必须整除特征维度 D

    Returns:
        特征已归一化、成员已按深度排序的 DatasetManifest

    Raises:
        FileNotFoundError: 文件不存在
        DatasetFormatError: 记录格式错误（带行号）
        DimensionMismatchError: 特征维度不一致
        ConfigurationError: P 不能整除 D
        DuplicatePersonError: 同组内 person_id 重复
    """
    if part_count <= 0:
        raise ConfigurationError(f"part count must be positive, got {part_count}")

    path = Path(path)
    with path.open('r', encoding='utf-8') as fh:
        text = fh.read()

    feature_dim = None
    buckets: Dict[Tuple[str, str], Dict[str, PersonDescriptor]] = OrderedDict()

    for line_no, raw in enumerate(text.split('\n'), start=1):
        line = raw.rstrip('\r')
        if not line.strip() or line.lstrip().startswith('#'):
            continue

        group_id, camera_id, person_id, depth, values = _parse_line(line, line_no)

        if feature_dim is None:
            feature_dim = int(values.shape[0])
            if feature_dim % part_count != 0:
                raise ConfigurationError(
                    f"part count must divide dimension (D={feature_dim}, P={part_count})"
                )
        elif values.shape[0] != feature_dim:
            raise DimensionMismatchError(
                f"line {line_no}: feature dimension {values.shape[0]} differs from {feature_dim}"
            )

        try:
            feature = normalize_feature(values)
        except ValueError as e:
            raise DatasetFormatError(str(e), line_no) from None

        bucket = buckets.setdefault((group_id, camera_id), {})
        if person_id in bucket:
            raise DuplicatePersonError(
                f"line {line_no}: person {person_id} appears twice in group {group_id} camera {camera_id}"
            )
        bucket[person_id] = PersonDescriptor(
            person_id=person_id,
            feature=feature,
            depth_mean=depth,
            part_count=part_count,
        )

    if feature_dim is None:
        raise DatasetFormatError(f"no records found in {path}")

    groups = [
        GroupSample(group_id=gid, camera_id=cam, members=sort_members(list(bucket.values())))
        for (gid, cam), bucket in sorted(buckets.items())
    ]
    logger.info(f"📂 已加载 {path.name}: {len(groups)} 个组视图, D={feature_dim}, P={part_count}")
    return DatasetManifest(groups=groups, feature_dim=feature_dim, part_count=part_count)


def validate_dataset(manifest: DatasetManifest) -> List[Violation]:
    """
    检查 DatasetManifest 的全部不变量，违例作为数据返回而不是抛异常

    Returns:
        违例列表；为空表示数据集合法
    """
    report: List[Violation] = []
    D = manifest.feature_dim
    P = manifest.part_count

    if D <= 0 or P <= 0 or D % P != 0:
        report.append(Violation('', '', f"part count must divide dimension (D={D}, P={P})"))

    seen_keys = set()
    for group in manifest.groups:
        gid = group.group_id
        if group.key in seen_keys:
            report.append(Violation(gid, '', f"duplicate group view ({gid}, {group.camera_id})"))
        seen_keys.add(group.key)

        if not group.members:
            report.append(Violation(gid, '', "group has no members"))
            continue

        ids = [m.person_id for m in group.members]
        for pid in sorted({p for p in ids if ids.count(p) > 1}):
            report.append(Violation(gid, pid, "duplicate person_id within group"))

        if list(group.members) != list(sort_members(list(group.members))):
            report.append(Violation(gid, '', "members not sorted by depth_mean"))

        for m in group.members:
            if m.feature.ndim != 1 or m.feature.shape[0] != D:
                report.append(Violation(gid, m.person_id, f"feature dimension {m.feature.shape} differs from {D}"))
                continue
            if not np.all(np.isfinite(m.feature)):
                report.append(Violation(gid, m.person_id, "non-finite feature value"))
                continue
            if abs(float(np.linalg.norm(m.feature)) - 1.0) > NORM_TOLERANCE:
                report.append(Violation(gid, m.person_id, "feature not L2-normalized"))
            if m.part_count != P:
                report.append(Violation(gid, m.person_id, f"part count {m.part_count} differs from {P}"))
            if not math.isfinite(m.depth_mean) or m.depth_mean < 0:
                report.append(Violation(gid, m.person_id, "depth_mean must be finite and non-negative"))

    return report


def save_dataset(manifest: DatasetManifest, path: Union[str, Path]) -> None:
    """
    按特征文件格式写出 manifest，实数使用 repr 保证往返精确
    相同 manifest 写出的字节完全相同
    """
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)

    lines = [
        f"# group_id\tcamera_id\tperson_id\tdepth_mean\tfeature (D={manifest.feature_dim})"
    ]
    for group in sorted(manifest.groups, key=lambda g: g.key):
        for m in group.members:
            vec = ','.join(repr(float(v)) for v in m.feature)
            lines.append(f"{group.group_id}\t{group.camera_id}\t{m.person_id}\t{float(m.depth_mean)!r}\t{vec}")

    with path.open('w', encoding='utf-8', newline='\n') as fh:
        fh.write('\n'.join(lines) + '\n')
    logger.debug(f"已写出 {len(manifest.groups)} 个组视图到 {path}")

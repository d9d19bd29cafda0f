from dataclasses import dataclass, field
from typing import FrozenSet, List, Optional, Tuple

import numpy as np


@dataclass(frozen=True, eq=False)
class PersonDescriptor:
    person_id: str
    feature: np.ndarray          # (D,), L2-normalized at ingest
    depth_mean: float
    part_count: int = 1

    @property
    def dim(self) -> int:
        return int(self.feature.shape[0])

    @property
    def parts(self) -> np.ndarray:
        """(P, D/P) view of the feature; rows concatenate back to `feature`."""
        return self.feature.reshape(self.part_count, -1)

    @property
    def sort_key(self) -> Tuple[float, str]:
        return (self.depth_mean, self.person_id)


@dataclass(frozen=True)
class GroupSample:
    group_id: str
    camera_id: str
    members: Tuple[PersonDescriptor, ...]

    @property
    def key(self) -> Tuple[str, str]:
        return (self.group_id, self.camera_id)

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass
class DatasetManifest:
    groups: List[GroupSample]
    feature_dim: int
    part_count: int

    def view(self, camera_id: str) -> List[GroupSample]:
        return [g for g in self.groups if g.camera_id == camera_id]

    def identities(self) -> List[str]:
        return sorted({g.group_id for g in self.groups})

    def max_group_size(self) -> int:
        return max((g.size for g in self.groups), default=0)


@dataclass(frozen=True, eq=False)
class Node:
    descriptor: Optional[PersonDescriptor]
    part_features: np.ndarray    # (P, D_p); zeros for dummy nodes

    @property
    def is_dummy(self) -> bool:
        return self.descriptor is None


@dataclass(frozen=True, eq=False)
class ContextGraph:
    """
    Depth-ordered context graph of one group view.

    Real nodes come first in ascending depth order, followed by dummy padding
    up to `n_max`. Edges join every pair of real nodes.
    """
    nodes: Tuple[Node, ...]
    edges: FrozenSet[Tuple[int, int]]
    n_max: int
    group_id: str = ''
    camera_id: str = ''

    @property
    def real_nodes(self) -> Tuple[Node, ...]:
        return tuple(n for n in self.nodes if not n.is_dummy)

    @property
    def n_real(self) -> int:
        return sum(1 for n in self.nodes if not n.is_dummy)

    @property
    def descriptors(self) -> List[PersonDescriptor]:
        return [n.descriptor for n in self.nodes if n.descriptor is not None]

    @property
    def node_set(self) -> FrozenSet[str]:
        return frozenset(d.person_id for d in self.descriptors)

    @property
    def part_count(self) -> int:
        return int(self.nodes[0].part_features.shape[0])

    @property
    def part_dim(self) -> int:
        return int(self.nodes[0].part_features.shape[1])

    def part_tensor(self) -> np.ndarray:
        """(n_max, P, D_p) stacked node features."""
        return np.stack([n.part_features for n in self.nodes])

    def mask(self) -> np.ndarray:
        return np.array([not n.is_dummy for n in self.nodes], dtype=bool)

    def real_features(self) -> np.ndarray:
        """(n_real, D) full feature vectors of the real nodes."""
        return np.stack([d.feature for d in self.descriptors])


@dataclass(frozen=True)
class RankingResult:
    probe_id: str
    gallery_ids: Tuple[str, ...]
    scores: Tuple[float, ...]
    correct_rank: Optional[int]      # 1-based; None when the gallery has no true match


@dataclass(frozen=True)
class Violation:
    group_id: str
    person_id: str
    rule: str

    def __str__(self) -> str:
        who = f"{self.group_id}/{self.person_id}" if self.person_id else self.group_id
        return f"{who}: {self.rule}"


@dataclass
class PipelineFlags:
    rw: bool = True
    gm: bool = True
    cl: bool = True

    @property
    def label(self) -> str:
        parts = [name for name, on in (('RW', self.rw), ('GM', self.gm)) if on]
        return 'Base' if not parts else '+' + '+'.join(parts)


@dataclass
class ScorerConfig:
    kind: str = 'cosine'
    matrix: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass(frozen=True, eq=False)
class AffinityMatrix:
    raw: np.ndarray          # S, pairwise affinity scores
    normalized: np.ndarray   # W, row-softmax with zero diagonal

    @property
    def size(self) -> int:
        return int(self.normalized.shape[0])


@dataclass(frozen=True, eq=False)
class WalkState:
    scores: np.ndarray       # y^(t)
    iteration: int = 0


@dataclass(frozen=True, eq=False)
class GraphEmbedding:
    vector: np.ndarray

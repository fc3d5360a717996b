# -*- coding: utf-8 -*-
"""
房间几何
多边形房间、墙面镜像构造虚拟锚点（VA）、一阶反射路径的有效性与遮挡判断、
无噪声到达角（AoA）合成

约定：
- 顶点逆时针排列，墙 i 从顶点 i 指向顶点 i+1（首尾相接），房间内部在墙的左侧
- 角度为全局坐标系下的方位角（弧度），包裹到 (-π, π]
- 所有点在线段上/相交判断使用绝对容差 1e-9 m
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import shapely
from shapely.geometry import Point, Polygon

from .angle_utils import wrap_angle
from .environment_manager import get_environment_manager
from .error_manager import ClientOutsideRoomError, ScenarioError, SchemaError

logger = logging.getLogger(__name__)

GEOMETRY_TOL = 1e-9

PointLike = Union[Sequence[float], np.ndarray]


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """二维叉积（支持广播）"""
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


@dataclass(frozen=True)
class Wall:
    """有向墙段"""
    index: int
    start: Tuple[float, float]
    end: Tuple[float, float]

    @property
    def vector(self) -> np.ndarray:
        return np.subtract(self.end, self.start)

    @property
    def length(self) -> float:
        return float(np.hypot(*self.vector))


class Room:
    """逆时针简单多边形房间"""

    def __init__(self, vertices: Sequence[PointLike]):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2:
            raise ScenarioError("room vertices must be a list of [x, y] pairs")
        if len(v) < 3:
            raise ScenarioError(f"room needs at least 3 vertices, got {len(v)}")
        if not np.all(np.isfinite(v)):
            raise ScenarioError("room vertices must be finite")

        starts = v
        ends = np.roll(v, -1, axis=0)
        lengths = np.hypot(*(ends - starts).T)
        if np.any(lengths <= GEOMETRY_TOL):
            bad = int(np.argmin(lengths))
            raise ScenarioError(f"wall {bad} has zero length", wall=bad)

        signed_area = 0.5 * float(np.sum(_cross(starts, ends)))
        if abs(signed_area) <= GEOMETRY_TOL:
            raise ScenarioError("room polygon has zero area")
        if signed_area < 0:
            raise ScenarioError("room vertices must be ordered counter-clockwise")

        polygon = Polygon(v)
        if not polygon.exterior.is_simple or not polygon.is_valid:
            raise ScenarioError("room polygon is self-intersecting")

        self.vertices = v
        self.polygon = polygon
        shapely.prepare(self.polygon)
        self._starts = starts
        self._ends = ends
        self._vectors = ends - starts
        self._lengths = lengths
        self.area = signed_area

    @cached_property
    def walls(self) -> Tuple[Wall, ...]:
        return tuple(
            Wall(i, tuple(self._starts[i]), tuple(self._ends[i]))
            for i in range(len(self._starts))
        )

    @property
    def n_walls(self) -> int:
        return len(self._starts)

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        return self.polygon.bounds

    def contains(self, point: PointLike) -> bool:
        """点是否严格在房间内部（边界不算）"""
        p = np.asarray(point, dtype=float)
        return bool(shapely.contains_xy(self.polygon, p[0], p[1]))

    def contains_many(self, points: np.ndarray) -> np.ndarray:
        """批量判断点是否严格在房间内部"""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        return np.asarray(shapely.contains_xy(self.polygon, pts[:, 0], pts[:, 1]), dtype=bool)

    def sample_grid(self, pitch: float) -> np.ndarray:
        """以 pitch 为间距的内部采样网格（格心对齐）"""
        if pitch <= 0:
            raise ScenarioError(f"sample grid pitch must be positive, got {pitch}")
        minx, miny, maxx, maxy = self.bounds
        xs = np.arange(minx + pitch / 2.0, maxx, pitch)
        ys = np.arange(miny + pitch / 2.0, maxy, pitch)
        gx, gy = np.meshgrid(xs, ys)
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        return pts[self.contains_many(pts)]

    def sample_uniform(self, rng: np.random.Generator) -> np.ndarray:
        """在房间内部均匀采样一个点（拒绝采样）"""
        minx, miny, maxx, maxy = self.bounds
        while True:
            p = np.array([rng.uniform(minx, maxx), rng.uniform(miny, maxy)])
            if self.contains(p):
                return p

    @cached_property
    def interior_point(self) -> np.ndarray:
        """房间内部参考点：质心在内部时取质心"""
        c = self.polygon.centroid
        if self.contains((c.x, c.y)):
            return np.array([c.x, c.y])
        rp = self.polygon.representative_point()
        return np.array([rp.x, rp.y])

    def project_inside(self, point: PointLike, margin: float = 1e-7) -> np.ndarray:
        """将点投影到房间内部最近处（已在内部则原样返回）"""
        p = np.asarray(point, dtype=float)
        if self.contains(p):
            return p.copy()
        boundary = self.polygon.exterior
        nearest = boundary.interpolate(boundary.project(Point(p[0], p[1])))
        q = np.array([nearest.x, nearest.y])

        for target in (q - p, self.interior_point - q):
            norm = np.hypot(*target)
            if norm > 0:
                candidate = q + margin * target / norm
                if self.contains(candidate):
                    return candidate
        return q

    def segments_blocked(self, p: np.ndarray, q: np.ndarray,
                         ignore_wall: Optional[int] = None) -> np.ndarray:
        """
        批量判断开线段 pq 是否与墙真相交

        p, q 形状 (n, 2) 或 (2,)，可广播；端点恰好落在墙上不算遮挡
        """
        P = np.atleast_2d(np.asarray(p, dtype=float))
        Q = np.atleast_2d(np.asarray(q, dtype=float))
        P, Q = np.broadcast_arrays(P, Q)
        r = Q - P
        r_len = np.hypot(r[:, 0], r[:, 1])[:, None]

        A = self._starts[None, :, :]
        S = self._vectors[None, :, :]
        s_len = self._lengths[None, :]

        ap = A - P[:, None, :]
        denom = _cross(r[:, None, :], S)
        with np.errstate(divide='ignore', invalid='ignore'):
            t = _cross(ap, S) / denom
            u = _cross(ap, r[:, None, :]) / denom
            along_seg = t * r_len
            along_wall = u * s_len
            hit = (
                (np.abs(denom) > 1e-12 * r_len * s_len)
                & (along_seg > GEOMETRY_TOL)
                & (along_seg < r_len - GEOMETRY_TOL)
                & (along_wall >= -GEOMETRY_TOL)
                & (along_wall <= s_len + GEOMETRY_TOL)
            )
        if ignore_wall is not None:
            hit[:, ignore_wall] = False
        return hit.any(axis=1)


def mirror_point(p: PointLike, wall: Union[Wall, Sequence[PointLike]]) -> np.ndarray:
    """点 p 关于墙所在直线的镜像"""
    if isinstance(wall, Wall):
        a, b = np.asarray(wall.start, dtype=float), np.asarray(wall.end, dtype=float)
    else:
        a, b = (np.asarray(x, dtype=float) for x in wall)
    d = b - a
    length_sq = float(d @ d)
    if length_sq <= GEOMETRY_TOL ** 2:
        raise ScenarioError("cannot mirror across a zero-length wall")
    p = np.asarray(p, dtype=float)
    t = float((p - a) @ d) / length_sq
    foot = a + t * d
    return 2.0 * foot - p


def segment_blocked(p: PointLike, q: PointLike, room: Room,
                    ignore_wall: Optional[int] = None) -> bool:
    """开线段 pq 是否被 ignore_wall 以外的墙遮挡"""
    return bool(room.segments_blocked(np.asarray(p, dtype=float),
                                      np.asarray(q, dtype=float), ignore_wall)[0])


class AnchorKind(Enum):
    """锚点类型"""
    PHYSICAL = "physical"
    VIRTUAL = "virtual"


@dataclass(frozen=True)
class Anchor:
    """物理AP或虚拟锚点"""
    id: int
    kind: AnchorKind
    position: Tuple[float, float]
    source_ap: int
    generating_wall: Optional[int] = None

    @property
    def is_virtual(self) -> bool:
        return self.kind is AnchorKind.VIRTUAL

    def to_dict(self) -> Dict[str, Any]:
        return {
            'id': self.id,
            'kind': self.kind.value,
            'position': list(self.position),
            'source_ap': self.source_ap,
            'generating_wall': self.generating_wall,
        }


def exact_aoa_many(clients: np.ndarray, anchor: Anchor, room: Room,
                   check_inside: bool = True) -> np.ndarray:
    """
    批量计算无噪声到达角

    返回形状 (n,) 的数组，路径无效处为 NaN
    """
    C = np.atleast_2d(np.asarray(clients, dtype=float))
    if check_inside:
        inside = room.contains_many(C)
        if not inside.all():
            bad = C[int(np.argmin(inside))]
            raise ClientOutsideRoomError(
                f"client ({bad[0]:.6g}, {bad[1]:.6g}) is outside the room",
                client=tuple(bad))

    target = np.asarray(anchor.position, dtype=float)
    d = target - C
    angles = wrap_angle(np.arctan2(d[:, 1], d[:, 0]))
    angles = np.atleast_1d(angles)

    if not anchor.is_virtual:
        coincident = np.hypot(d[:, 0], d[:, 1]) <= GEOMETRY_TOL
        valid = ~coincident & ~room.segments_blocked(C, target)
        return np.where(valid, angles, np.nan)

    wall = room.walls[anchor.generating_wall]
    a = np.asarray(wall.start, dtype=float)
    s = wall.vector
    s_len = wall.length
    ap = mirror_point(target, wall)

    # 反射只发生在墙的内侧面：客户端和AP都必须位于墙线的内侧
    client_side = _cross(s, C - a) > GEOMETRY_TOL * s_len
    ap_side = float(_cross(s, ap - a)) > GEOMETRY_TOL * s_len
    if not ap_side:
        return np.full(len(C), np.nan)

    denom = _cross(d, s)
    with np.errstate(divide='ignore', invalid='ignore'):
        ac = a - C
        t = _cross(ac, s) / denom
        u = _cross(ac, d) / denom
        along_wall = u * s_len
        hit = (
            client_side
            & (np.abs(denom) > 0)
            & (t >= 0.0) & (t <= 1.0)
            & (along_wall >= -GEOMETRY_TOL)
            & (along_wall <= s_len + GEOMETRY_TOL)
        )
        R = C + t[:, None] * d

    valid = hit.copy()
    if valid.any():
        idx = np.flatnonzero(valid)
        first_leg = room.segments_blocked(C[idx], R[idx], ignore_wall=wall.index)
        second_leg = room.segments_blocked(R[idx], ap, ignore_wall=wall.index)
        valid[idx] = ~first_leg & ~second_leg
    return np.where(valid, angles, np.nan)


def exact_aoa(client: PointLike, anchor: Anchor, room: Room) -> Optional[float]:
    """单点无噪声到达角；路径被遮挡或反射点不在墙上时返回 None"""
    c = np.asarray(client, dtype=float)
    if not room.contains(c):
        raise ClientOutsideRoomError(
            f"client ({c[0]:.6g}, {c[1]:.6g}) is outside the room", client=tuple(c))
    value = exact_aoa_many(c[None, :], anchor, room, check_inside=False)[0]
    return None if np.isnan(value) else float(value)


def reflection_point(client: PointLike, anchor: Anchor, room: Room) -> Optional[np.ndarray]:
    """虚拟锚点路径在生成墙上的反射点（无效路径返回 None）"""
    if not anchor.is_virtual or exact_aoa(client, anchor, room) is None:
        return None
    wall = room.walls[anchor.generating_wall]
    c = np.asarray(client, dtype=float)
    d = np.asarray(anchor.position, dtype=float) - c
    a = np.asarray(wall.start, dtype=float)
    s = wall.vector
    t = float(_cross(a - c, s) / _cross(d, s))
    return c + t * d


@dataclass(frozen=True)
class AnchorRoster:
    """有序锚点表，ids 等于列表位置"""
    anchors: Tuple[Anchor, ...]
    coverage: Tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        for position, anchor in enumerate(self.anchors):
            if anchor.id != position:
                raise ScenarioError(f"anchor id {anchor.id} does not match roster position {position}")

    def __len__(self) -> int:
        return len(self.anchors)

    def __iter__(self) -> Iterator[Anchor]:
        return iter(self.anchors)

    def __getitem__(self, index: int) -> Anchor:
        return self.anchors[index]

    @property
    def n_anchors(self) -> int:
        return len(self.anchors)

    @cached_property
    def positions(self) -> np.ndarray:
        return np.array([a.position for a in self.anchors], dtype=float).reshape(-1, 2)

    @property
    def n_physical(self) -> int:
        return sum(1 for a in self.anchors if not a.is_virtual)

    def to_list(self) -> List[Dict[str, Any]]:
        return [a.to_dict() for a in self.anchors]


def va_coverage(anchor: Anchor, room: Room, grid_points: np.ndarray) -> float:
    """虚拟锚点路径在采样网格上有效的比例"""
    if len(grid_points) == 0:
        return 0.0
    values = exact_aoa_many(grid_points, anchor, room, check_inside=False)
    return float(np.mean(~np.isnan(values)))


@dataclass(frozen=True)
class Scenario:
    """场景：房间、AP位置与VA筛选参数"""
    name: str
    room: Room = field(compare=False)
    aps: Tuple[Tuple[float, float], ...]
    va_coverage_threshold: float = 0.5
    coverage_grid_m: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.va_coverage_threshold <= 1.0:
            raise ScenarioError(
                f"va_coverage_threshold must lie in [0, 1], got {self.va_coverage_threshold}")
        if self.coverage_grid_m <= 0:
            raise ScenarioError(f"coverage grid pitch must be positive, got {self.coverage_grid_m}")
        if not self.aps:
            raise ScenarioError("scenario needs at least one access point")
        for i, ap in enumerate(self.aps):
            if not self.room.contains(ap):
                raise ScenarioError(f"access point {i} at {tuple(ap)} is not strictly inside the room",
                                    ap=i)

    @cached_property
    def roster(self) -> AnchorRoster:
        return build_anchor_roster(self)

    @cached_property
    def fingerprint(self) -> str:
        """房间与锚点表的稳定哈希"""
        payload = {
            'vertices': [[f"{x:.17g}", f"{y:.17g}"] for x, y in self.room.vertices],
            'anchors': [
                [a.kind.value, a.source_ap, a.generating_wall,
                 f"{a.position[0]:.17g}", f"{a.position[1]:.17g}"]
                for a in self.roster
            ],
        }
        digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode('utf-8'))
        return digest.hexdigest()[:16]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'room': {'vertices': self.room.vertices.tolist()},
            'aps': [list(ap) for ap in self.aps],
            'va_coverage_threshold': self.va_coverage_threshold,
            'probe_grid_m': self.coverage_grid_m,
        }


def build_anchor_roster(scenario: Scenario) -> AnchorRoster:
    """
    构建锚点表

    每个AP后跟随其各墙面镜像；VA在采样网格上的有效比例不低于阈值（且大于0）时入表
    """
    room = scenario.room
    grid_points = room.sample_grid(scenario.coverage_grid_m)
    anchors: List[Anchor] = []
    coverage: List[float] = []

    for ap_index, ap in enumerate(scenario.aps):
        if not room.contains(ap):
            raise ScenarioError(f"access point {ap_index} is not strictly inside the room", ap=ap_index)
        anchors.append(Anchor(len(anchors), AnchorKind.PHYSICAL,
                              (float(ap[0]), float(ap[1])), ap_index))
        coverage.append(1.0)

        for wall in room.walls:
            va = mirror_point(ap, wall)
            candidate = Anchor(len(anchors), AnchorKind.VIRTUAL,
                               (float(va[0]), float(va[1])), ap_index, wall.index)
            fraction = va_coverage(candidate, room, grid_points)
            logger.debug(f"AP {ap_index} wall {wall.index}: VA coverage {fraction:.3f}")
            if fraction > 0.0 and fraction >= scenario.va_coverage_threshold:
                anchors.append(candidate)
                coverage.append(fraction)

    logger.info(f"Scenario {scenario.name}: {len(anchors)} anchors "
                f"({len(scenario.aps)} physical, {len(anchors) - len(scenario.aps)} virtual)")
    return AnchorRoster(tuple(anchors), tuple(coverage))


def scenario_from_dict(data: Dict[str, Any], name: str = "scenario") -> Scenario:
    """由字典构建并校验场景"""
    try:
        vertices = data['room']['vertices']
        aps = data['aps']
    except (KeyError, TypeError) as e:
        raise SchemaError(f"scenario is missing required field {e}") from e

    room = Room(vertices)
    try:
        ap_tuples = tuple((float(x), float(y)) for x, y in aps)
    except (TypeError, ValueError) as e:
        raise SchemaError("scenario 'aps' must be a list of [x, y] pairs") from e

    return Scenario(
        name=str(data.get('name', name)),
        room=room,
        aps=ap_tuples,
        va_coverage_threshold=float(data.get('va_coverage_threshold', 0.5)),
        coverage_grid_m=float(data.get('probe_grid_m', 0.25)),
    )


def load_scenario(name_or_path: str) -> Scenario:
    """加载场景文件（或内置场景名 rect3 / rect4 / lroom3）"""
    path = get_environment_manager().resolve_scenario(str(name_or_path))
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(f"scenario file {path} is not valid JSON: {e.msg}") from e

    scenario = scenario_from_dict(data, name=Path(path).stem)
    logger.info(f"Scenario loaded from {path}: {scenario.roster.n_anchors} anchors")
    return scenario

"""Procedural multi-room semantic worlds with planted co-occurrence structure.

Buildings are connected polyominoes of square rooms on a grid, one or two
floors, with doors between adjacent rooms and a stairwell bridging
floors. Each room type carries a fixed object template (stove, cup,
fridge, ... with declared proximity rules) instantiated at a random yaw
per room; the yaw is what creates contradictory relative observations of
the same semantic relation. Surfaces and objects emit points whose
embeddings are noised copies of per-concept prototype vectors, so the
worlds play the role of feature point clouds from a pretrained encoder
without any imagery.

Everything is a pure function of (seed, config); point clouds are
regenerated deterministically when a world file is loaded.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field as dc_field

import numpy as np

WORLD_SCHEMA = "relfield/world/1"
CHALLENGE_SCHEMA = "relfield/challenges/1"

STRUCTURE_CONCEPTS = ("wall", "floor")

# Object templates per room type: local offsets in meters from the room
# center (before yaw), mount heights, and declared proximity rules that
# generation re-validates after placement.
DEFAULT_GRAMMAR = {
    "kitchen": [
        {"concept": "stove", "local": [-0.7, -0.7], "height": 0.9},
        {"concept": "cup", "local": [-0.25, -0.7], "height": 1.0,
         "near": ["stove", 0.8]},
        {"concept": "fridge", "local": [0.7, -0.7], "height": 1.3,
         "near": ["stove", 2.0]},
        {"concept": "sink", "local": [0.7, 0.7], "height": 0.9},
        {"concept": "kettle", "local": [0.3, 0.7], "height": 1.0,
         "near": ["sink", 0.8]},
    ],
    "bathroom": [
        {"concept": "toilet", "local": [-0.7, 0.7], "height": 0.45},
        {"concept": "shower", "local": [0.7, 0.7], "height": 1.5},
        {"concept": "towel", "local": [0.7, -0.1], "height": 1.2,
         "near": ["shower", 1.2]},
        {"concept": "bathsink", "local": [-0.7, -0.5], "height": 0.9},
    ],
    "bedroom": [
        {"concept": "bed", "local": [0.0, -0.6], "height": 0.5},
        {"concept": "pillow", "local": [0.35, -0.6], "height": 0.7,
         "near": ["bed", 0.8]},
        {"concept": "wardrobe", "local": [-0.75, 0.7], "height": 1.6},
        {"concept": "lamp", "local": [0.7, 0.5], "height": 1.1},
    ],
    "living": [
        {"concept": "sofa", "local": [-0.65, 0.0], "height": 0.6},
        {"concept": "tv", "local": [0.75, 0.0], "height": 1.0,
         "near": ["sofa", 2.2]},
        {"concept": "table", "local": [0.1, 0.6], "height": 0.75},
        {"concept": "plant", "local": [-0.6, 0.8], "height": 1.1},
    ],
    "office": [
        {"concept": "desk", "local": [0.6, 0.6], "height": 0.75},
        {"concept": "laptop", "local": [0.6, 0.3], "height": 0.85,
         "near": ["desk", 0.8]},
        {"concept": "bookshelf", "local": [-0.7, 0.6], "height": 1.4},
        {"concept": "chair", "local": [0.3, -0.3], "height": 0.5,
         "near": ["desk", 1.2]},
    ],
    "hallway": [
        {"concept": "picture", "local": [0.0, 0.8], "height": 1.5},
        {"concept": "shoes", "local": [-0.5, -0.8], "height": 0.1},
    ],
    "stairwell": [
        {"concept": "stairs", "local": [0.0, 0.0], "height": 0.8},
    ],
}


class GenerationError(RuntimeError):
    """Layout could not be realized within the retry budget."""


class ChallengeError(ValueError):
    """Requested challenge cannot be built (e.g. concept absent)."""


@dataclass
class WorldConfig:
    embedding_dim: int = 32
    n_buildings: int = 10
    two_floor_fraction: float = 0.5
    rooms_per_floor_min: int = 3
    rooms_per_floor_max: int = 4
    layout: str = "blob"                # "blob" | "spine" (rooms off a hallway)
    layout_elongation: float = 0.0      # blob mode: 0 compact .. 1 corridor-like
    room_size: float = 2.5
    door_width: float = 1.4
    floor_height: float = 3.0
    eye_height: float = 1.4
    lattice_margin: float = 0.75
    lattice_pitch: float = 1.0
    view_range: float = 4.0             # max 2D distance a viewpoint observes
    surface_spacing: float = 0.6
    surface_margin: float = 0.35
    wall_point_height: float = 1.0
    object_points: int = 6
    object_jitter: float = 0.12
    placement_jitter: float = 0.05
    noise_sigma: float = 0.15           # total-norm scale of embedding noise
    noise_cos_floor: float = 0.9
    family_cos: float = 0.35            # within-room-family prototype cosine
    min_prototype_separation_deg: float = 25.0
    goal_radius: float = 1.5
    challenges_per_building: int = 5
    min_optimal_steps: int = 1
    challenge_excluded_concepts: tuple = ("stairs",)
    grammar: dict = dc_field(default_factory=lambda: DEFAULT_GRAMMAR)
    # room types per floor of two-floor buildings (ground, upper); keeps
    # cross-floor searches semantically real (no duplicate kitchen upstairs)
    floor_type_pools: tuple = (("kitchen", "living", "office", "hallway"),
                               ("bedroom", "bathroom", "office", "hallway"))
    single_viewpoint_rooms: bool = False  # non-hallway rooms get one center vp

    def to_dict(self):
        d = self.__dict__.copy()
        d["challenge_excluded_concepts"] = list(self.challenge_excluded_concepts)
        d["floor_type_pools"] = [list(p) for p in self.floor_type_pools]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["challenge_excluded_concepts"] = tuple(
            d.get("challenge_excluded_concepts", ("stairs",)))
        if "floor_type_pools" in d:
            d["floor_type_pools"] = tuple(tuple(p)
                                          for p in d["floor_type_pools"])
        return cls(**d)


@dataclass
class Vocabulary:
    names: list
    families: list
    prototypes: np.ndarray    # (M, E), unit rows

    def id_of(self, name: str) -> int:
        return self.names.index(name)

    @property
    def size(self) -> int:
        return len(self.names)

    def cosine_matrix(self) -> np.ndarray:
        return self.prototypes @ self.prototypes.T


@dataclass
class Room:
    id: int
    type: str
    cell: tuple
    floor: int
    yaw_deg: int
    center: np.ndarray        # (3,), z at floor level


@dataclass
class ObjectInstance:
    id: int
    concept_id: int
    room_id: int
    position: np.ndarray      # (3,)


@dataclass
class Viewpoint:
    id: int
    room_id: int
    floor: int
    position: np.ndarray      # (3,), at eye height


@dataclass
class PointCloud:
    positions: np.ndarray     # (N, 3)
    embeddings: np.ndarray    # (N, E), unit rows
    concept_ids: np.ndarray   # (N,)
    floors: np.ndarray        # (N,)

    def __len__(self):
        return self.positions.shape[0]


@dataclass
class RenderedView:
    viewpoint_id: int
    center: np.ndarray
    indices: np.ndarray       # global point ids within the building cloud
    positions: np.ndarray
    embeddings: np.ndarray
    concept_ids: np.ndarray


@dataclass
class Building:
    id: int
    world_seed: int
    floors: int
    rooms: list
    objects: list
    viewpoints: list
    edges: list               # sorted (a, b) tuples
    walls: dict               # floor -> (W, 4) segment array
    points: PointCloud
    config: "WorldConfig" = None

    def adjacency(self):
        adj = {vp.id: [] for vp in self.viewpoints}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        for k in adj:
            adj[k].sort()
        return adj

    def shortest_path(self, start: int, goal: int) -> list:
        """Fewest-hops path, deterministic via sorted neighbor expansion."""
        if start == goal:
            return [start]
        adj = self.adjacency()
        parent = {start: None}
        frontier = deque([start])
        while frontier:
            u = frontier.popleft()
            for w in adj[u]:
                if w in parent:
                    continue
                parent[w] = u
                if w == goal:
                    path = [w]
                    while parent[path[-1]] is not None:
                        path.append(parent[path[-1]])
                    return path[::-1]
                frontier.append(w)
        raise GenerationError(f"viewpoint {goal} unreachable from {start}")

    def graph_distance(self, start: int, goals: set) -> int | None:
        if start in goals:
            return 0
        adj = self.adjacency()
        seen = {start}
        frontier = deque([(start, 0)])
        while frontier:
            u, d = frontier.popleft()
            for w in adj[u]:
                if w in seen:
                    continue
                if w in goals:
                    return d + 1
                seen.add(w)
                frontier.append((w, d + 1))
        return None


@dataclass
class World:
    seed: int
    config: WorldConfig
    vocabulary: Vocabulary
    buildings: list

    def building(self, building_id: int) -> Building:
        return self.buildings[building_id]


@dataclass
class Challenge:
    id: str
    building: int
    start: int
    target_concept: str
    target_concept_id: int
    goal_viewpoints: list
    optimal_steps: int
    floor_class: str          # "single" | "multi"


# ---------------------------------------------------------------------------
# vocabulary

def generate_vocabulary(config: WorldConfig, rng: np.random.Generator) -> Vocabulary:
    """Concept prototypes: unit vectors correlated within a room family.

    When the embedding dimension allows, family directions and unique
    components come from one orthonormal basis, so within-family cosine
    is exactly family_cos and cross-family cosine exactly zero; otherwise
    random directions are rejection-sampled for the separation floor.
    """
    names, families = [], []
    for concept in STRUCTURE_CONCEPTS:
        names.append(concept)
        families.append("structure")
    for room_type, objects in config.grammar.items():
        for spec in objects:
            if spec["concept"] not in names:
                names.append(spec["concept"])
                families.append(room_type)
    dim = config.embedding_dim
    family_names = sorted(set(families))
    min_sep = np.cos(np.radians(config.min_prototype_separation_deg))
    alpha = np.sqrt(config.family_cos)
    beta = np.sqrt(1.0 - config.family_cos)
    need = len(family_names) + len(names)
    if need <= dim:
        basis, _ = np.linalg.qr(rng.normal(size=(dim, need)))
        basis = basis.T
        fam_dirs = {fam: basis[i] for i, fam in enumerate(family_names)}
        protos = np.empty((len(names), dim))
        for i, fam in enumerate(families):
            protos[i] = alpha * fam_dirs[fam] + beta * basis[len(family_names) + i]
            protos[i] /= np.linalg.norm(protos[i])
        sims = protos @ protos.T
        np.fill_diagonal(sims, -1.0)
        if np.max(sims) >= min_sep:
            raise GenerationError(
                "family_cos violates the prototype separation floor")
        return Vocabulary(names=names, families=families, prototypes=protos)
    for _ in range(200):
        fam_dirs = {}
        for fam in family_names:
            d = rng.normal(size=dim)
            fam_dirs[fam] = d / np.linalg.norm(d)
        protos = np.empty((len(names), dim))
        for i, fam in enumerate(families):
            u = rng.normal(size=dim)
            u /= np.linalg.norm(u)
            p = alpha * fam_dirs[fam] + beta * u
            protos[i] = p / np.linalg.norm(p)
        sims = protos @ protos.T
        np.fill_diagonal(sims, -1.0)
        if np.max(sims) < min_sep:
            return Vocabulary(names=names, families=families, prototypes=protos)
    raise GenerationError("could not satisfy prototype separation")


def noised_embedding(proto: np.ndarray, rng: np.random.Generator,
                     sigma: float, cos_floor: float) -> np.ndarray:
    if sigma <= 0:
        return proto.copy()
    per_axis = sigma / np.sqrt(proto.shape[0])
    for _ in range(50):
        e = proto + rng.normal(scale=per_axis, size=proto.shape[0])
        e /= np.linalg.norm(e)
        if float(e @ proto) >= cos_floor:
            return e
    raise GenerationError("embedding noise cannot satisfy the cosine floor")


# ---------------------------------------------------------------------------
# geometry helpers

def _polyomino(rng: np.random.Generator, n_cells: int,
               elongation: float = 0.0) -> list:
    cells = [(0, 0)]
    occupied = {(0, 0)}
    while len(cells) < n_cells:
        frontier = sorted({(cx + dx, cy + dy)
                           for cx, cy in cells
                           for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1))}
                          - occupied)
        if elongation > 0 and rng.random() < elongation:
            dists = [abs(cx) + abs(cy) for cx, cy in frontier]
            far = max(dists)
            pick = frontier[dists.index(far)]
        else:
            pick = frontier[int(rng.integers(len(frontier)))]
        cells.append(pick)
        occupied.add(pick)
    return cells


def _build_walls(cells: set, config: WorldConfig):
    """Wall segments with centered door gaps on shared sides.

    Returns (segments (W,4), doors) where each door is
    (cell_a, cell_b, x, y) at the gap center.
    """
    s = config.room_size
    w = config.door_width
    segments = []
    doors = []

    def add_side(x1, y1, x2, y2, gap_center):
        if gap_center is None:
            segments.append((x1, y1, x2, y2))
            return
        if x1 == x2:  # vertical wall
            lo, hi = sorted((y1, y2))
            mid = (lo + hi) / 2
            segments.append((x1, lo, x1, mid - w / 2))
            segments.append((x1, mid + w / 2, x1, hi))
        else:
            lo, hi = sorted((x1, x2))
            mid = (lo + hi) / 2
            segments.append((lo, y1, mid - w / 2, y1))
            segments.append((mid + w / 2, y1, hi, y1))

    for gx, gy in sorted(cells):
        x0, y0 = gx * s, gy * s
        sides = {
            (1, 0): (x0 + s, y0, x0 + s, y0 + s),
            (-1, 0): (x0, y0, x0, y0 + s),
            (0, 1): (x0, y0 + s, x0 + s, y0 + s),
            (0, -1): (x0, y0, x0 + s, y0),
        }
        for (dx, dy), seg in sides.items():
            nbr = (gx + dx, gy + dy)
            if nbr in cells:
                if nbr > (gx, gy):  # emit each shared wall once
                    cx = (seg[0] + seg[2]) / 2
                    cy = (seg[1] + seg[3]) / 2
                    doors.append(((gx, gy), nbr, cx, cy))
                    add_side(*seg, gap_center=(cx, cy))
            else:
                add_side(*seg, gap_center=None)
    return np.asarray(segments, dtype=np.float64), doors


def line_of_sight(walls: np.ndarray, origin, targets) -> np.ndarray:
    """True for each target the 2D segment origin->target misses every wall."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if walls.size == 0:
        return np.ones(targets.shape[0], dtype=bool)
    p = np.asarray(origin, dtype=np.float64)
    r = targets - p                                   # (N, 2)
    a = walls[:, 0:2]                                 # (W, 2)
    s = walls[:, 2:4] - a                             # (W, 2)
    qp = a - p                                        # (W, 2)
    rxs = r[:, None, 0] * s[None, :, 1] - r[:, None, 1] * s[None, :, 0]
    qpxs = qp[None, :, 0] * s[None, :, 1] - qp[None, :, 1] * s[None, :, 0]
    qpxr = qp[None, :, 0] * r[:, None, 1] - qp[None, :, 1] * r[:, None, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = qpxs / rxs
        u = qpxr / rxs
    eps = 1e-9
    hit = (np.abs(rxs) > 1e-15) & (t > eps) & (t < 1 - eps) & (u >= 0) & (u <= 1)
    return ~np.any(hit, axis=1)


# ---------------------------------------------------------------------------
# building assembly

def _floor_types(config: WorldConfig, floors: int, f: int, exclude=()):
    if floors > 1 and f < len(config.floor_type_pools):
        types = [t for t in config.floor_type_pools[f] if t in config.grammar]
    else:
        types = sorted(t for t in config.grammar if t != "stairwell")
    return [t for t in types if t not in exclude]


def _room_specs(rng: np.random.Generator, config: WorldConfig, floors: int):
    """[(cell, floor, type, yaw)] with a stairwell at (0,0) on every floor."""
    if config.layout == "spine":
        return _spine_specs(rng, config, floors)
    specs = []
    for f in range(floors):
        types = _floor_types(config, floors, f)
        n_rooms = int(rng.integers(config.rooms_per_floor_min,
                                   config.rooms_per_floor_max + 1))
        cells = _polyomino(rng, n_rooms, config.layout_elongation)
        pool = list(rng.permutation(types))
        slot = 0
        for cell in cells:
            if floors > 1 and cell == (0, 0):
                rtype = "stairwell"
            else:
                rtype = pool[slot % len(pool)]
                slot += 1
            yaw = int(rng.choice([0, 90, 180, 270]))
            specs.append((cell, f, rtype, yaw))
    return specs


def _spine_specs(rng: np.random.Generator, config: WorldConfig, floors: int):
    """Corridor layout: a hallway spine with rooms hanging off both sides.

    rooms_per_floor counts the attached rooms; traversal between rooms
    always runs along the hallway, so passing by shows only door slivers.
    """
    specs = []
    for f in range(floors):
        types = _floor_types(config, floors, f,
                             exclude=("hallway", "stairwell"))
        n_rooms = int(rng.integers(config.rooms_per_floor_min,
                                   config.rooms_per_floor_max + 1))
        spine_len = max(2, int(np.ceil(n_rooms / 2)))
        for i in range(spine_len):
            cell = (i, 0)
            rtype = ("stairwell" if floors > 1 and cell == (0, 0)
                     else "hallway")
            specs.append((cell, f, rtype, int(rng.choice([0, 90, 180, 270]))))
        pool = list(rng.permutation(types))
        for j in range(n_rooms):
            cell = (j // 2, 1 if j % 2 == 0 else -1)
            specs.append((cell, f, pool[j % len(pool)],
                          int(rng.choice([0, 90, 180, 270]))))
    return specs


def _yaw_matrix(yaw_deg: float) -> np.ndarray:
    th = np.radians(yaw_deg)
    return np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])


def assemble_building(building_id: int, world_seed: int, config: WorldConfig,
                      vocab: Vocabulary, specs: list,
                      geom_rng: np.random.Generator) -> Building:
    """Realize rooms/objects/viewpoints/edges from explicit room specs."""
    s = config.room_size
    half = s / 2
    floors = max(f for _, f, _, _ in specs) + 1
    rooms, objects, viewpoints = [], [], []
    cells_by_floor = {f: set() for f in range(floors)}
    for cell, f, rtype, yaw in specs:
        cells_by_floor[f].add(cell)
        center = np.array([(cell[0] + 0.5) * s, (cell[1] + 0.5) * s,
                           f * config.floor_height])
        rooms.append(Room(id=len(rooms), type=rtype, cell=cell, floor=f,
                          yaw_deg=yaw, center=center))

    built = {f: _build_walls(cells_by_floor[f], config)
             for f in range(floors)}
    walls = {f: built[f][0] for f in range(floors)}
    doors = {f: built[f][1] for f in range(floors)}

    for room in rooms:
        template = config.grammar[room.type]
        rot = _yaw_matrix(room.yaw_deg)
        placed = {}
        for attempt in range(8):
            trial = []
            ok = True
            for spec in template:
                local = np.asarray(spec["local"], dtype=np.float64)
                if config.placement_jitter > 0:
                    local = local + geom_rng.normal(
                        scale=config.placement_jitter, size=2)
                local = np.clip(local, -(half - 0.3), half - 0.3)
                xy = room.center[:2] + rot @ local
                pos = np.array([xy[0], xy[1],
                                room.center[2] + spec["height"]])
                trial.append((spec, pos))
            by_name = {spec["concept"]: pos for spec, pos in trial}
            for spec, pos in trial:
                near = spec.get("near")
                if near and np.linalg.norm(pos - by_name[near[0]]) > near[1]:
                    ok = False
                    break
            if ok:
                placed = trial
                break
        if not placed:
            raise GenerationError(
                f"placement rules unsatisfiable in room {room.id}")
        for spec, pos in placed:
            objects.append(ObjectInstance(
                id=len(objects), concept_id=vocab.id_of(spec["concept"]),
                room_id=room.id, position=pos))

    for room in rooms:
        x0 = room.cell[0] * s
        y0 = room.cell[1] * s
        z = room.floor * config.floor_height + config.eye_height
        if (config.single_viewpoint_rooms
                and room.type not in ("hallway", "stairwell")):
            viewpoints.append(Viewpoint(
                id=len(viewpoints), room_id=room.id, floor=room.floor,
                position=np.array([x0 + s / 2, y0 + s / 2, z])))
            continue
        coords = np.arange(config.lattice_margin, s - config.lattice_margin + 1e-9,
                           config.lattice_pitch)
        for yy in coords:
            for xx in coords:
                viewpoints.append(Viewpoint(
                    id=len(viewpoints), room_id=room.id, floor=room.floor,
                    position=np.array([x0 + xx, y0 + yy, z])))
    # doorway viewpoints keep narrow-door rooms connected to the lattice
    room_at = {(r.cell, r.floor): r.id for r in rooms}
    for f in range(floors):
        for cell_a, cell_b, dx, dy in doors[f]:
            rid = min(room_at[(cell_a, f)], room_at[(cell_b, f)])
            viewpoints.append(Viewpoint(
                id=len(viewpoints), room_id=rid, floor=f,
                position=np.array([dx, dy, f * config.floor_height
                                   + config.eye_height])))

    edges = set()
    max_dist = config.lattice_pitch * 1.5
    by_floor = {}
    for vp in viewpoints:
        by_floor.setdefault(vp.floor, []).append(vp)
    for f, vps in by_floor.items():
        for i, a in enumerate(vps):
            others = vps[i + 1:]
            if not others:
                continue
            dists = [np.linalg.norm(a.position[:2] - b.position[:2])
                     for b in others]
            cand = [b for b, d in zip(others, dists) if d <= max_dist]
            if not cand:
                continue
            vis = line_of_sight(walls[f], a.position[:2],
                                [b.position[:2] for b in cand])
            for b, v in zip(cand, vis):
                if v:
                    edges.add((a.id, b.id))
    # one stair edge per floor pair: the closest cross-floor stair pair
    stair_rooms = {r.id for r in rooms if r.type == "stairwell"}
    for f in range(floors - 1):
        lower = [vp for vp in viewpoints
                 if vp.floor == f and vp.room_id in stair_rooms]
        upper = [vp for vp in viewpoints
                 if vp.floor == f + 1 and vp.room_id in stair_rooms]
        if not lower or not upper:
            raise GenerationError("missing stairwell viewpoints")
        best = min(((np.linalg.norm(a.position[:2] - b.position[:2]), a.id, b.id)
                    for a in lower for b in upper))
        edges.add((best[1], best[2]))

    points = _build_point_cloud(
        rooms, walls, objects, vocab, config,
        np.random.default_rng([world_seed, building_id, 3]))

    return Building(id=building_id, world_seed=world_seed, floors=floors,
                    rooms=rooms, objects=objects, viewpoints=viewpoints,
                    edges=sorted(edges), walls=walls, points=points,
                    config=config)


def _build_point_cloud(rooms, walls, objects, vocab: Vocabulary,
                       config: WorldConfig,
                       rng: np.random.Generator) -> PointCloud:
    s = config.room_size
    positions, concept_ids, floors = [], [], []
    floor_cid = vocab.id_of("floor")
    wall_cid = vocab.id_of("wall")
    for room in rooms:
        x0, y0 = room.cell[0] * s, room.cell[1] * s
        coords = np.arange(config.surface_margin,
                           s - config.surface_margin + 1e-9,
                           config.surface_spacing)
        for yy in coords:
            for xx in coords:
                positions.append([x0 + xx, y0 + yy, room.center[2]])
                concept_ids.append(floor_cid)
                floors.append(room.floor)
    for f in sorted(walls):
        z = f * config.floor_height + config.wall_point_height
        for x1, y1, x2, y2 in walls[f]:
            length = float(np.hypot(x2 - x1, y2 - y1))
            n_pts = max(1, int(length / config.surface_spacing))
            for t in (np.arange(n_pts) + 0.5) / n_pts:
                positions.append([x1 + t * (x2 - x1), y1 + t * (y2 - y1), z])
                concept_ids.append(wall_cid)
                floors.append(f)
    room_by_id = {r.id: r for r in rooms}
    for obj in objects:
        room = room_by_id[obj.room_id]
        x0, y0 = room.cell[0] * s, room.cell[1] * s
        for _ in range(config.object_points):
            jitter = rng.normal(scale=config.object_jitter, size=3)
            p = obj.position + jitter
            p[0] = np.clip(p[0], x0 + 0.05, x0 + s - 0.05)
            p[1] = np.clip(p[1], y0 + 0.05, y0 + s - 0.05)
            positions.append(list(p))
            concept_ids.append(obj.concept_id)
            floors.append(room.floor)
    embeddings = np.empty((len(positions), config.embedding_dim))
    for i, cid in enumerate(concept_ids):
        embeddings[i] = noised_embedding(vocab.prototypes[cid], rng,
                                         config.noise_sigma,
                                         config.noise_cos_floor)
    return PointCloud(positions=np.asarray(positions, dtype=np.float64),
                      embeddings=embeddings,
                      concept_ids=np.asarray(concept_ids, dtype=np.int64),
                      floors=np.asarray(floors, dtype=np.int64))


def _is_connected(building: Building) -> bool:
    if not building.viewpoints:
        return False
    adj = building.adjacency()
    seen = {building.viewpoints[0].id}
    frontier = deque(seen)
    while frontier:
        u = frontier.popleft()
        for w in adj[u]:
            if w not in seen:
                seen.add(w)
                frontier.append(w)
    return len(seen) == len(building.viewpoints)


def _objects_visible(building: Building) -> bool:
    cloud = building.points
    room_floor = {r.id: r.floor for r in building.rooms}
    for obj in building.objects:
        floor = room_floor[obj.room_id]
        cand = np.where((cloud.concept_ids == obj.concept_id)
                        & (cloud.floors == floor))[0]
        near = cand[np.linalg.norm(cloud.positions[cand] - obj.position,
                                   axis=1) < 1.0]
        if near.size == 0:
            return False
        seen = False
        for vp in building.viewpoints:
            if vp.floor != floor:
                continue
            vis = line_of_sight(building.walls[floor], vp.position[:2],
                                cloud.positions[near][:, :2])
            if np.any(vis):
                seen = True
                break
        if not seen:
            return False
    return True


def _two_floor(index: int, fraction: float) -> bool:
    return int((index + 1) * fraction) > int(index * fraction)


def generate_building(world_seed: int, index: int, config: WorldConfig,
                      vocab: Vocabulary) -> Building:
    floors = 2 if _two_floor(index, config.two_floor_fraction) else 1
    last_error = None
    for attempt in range(10):
        rng = np.random.default_rng([world_seed, index, 100 + attempt])
        try:
            specs = _room_specs(rng, config, floors)
            building = assemble_building(index, world_seed, config, vocab,
                                         specs, rng)
        except GenerationError as exc:
            last_error = exc
            continue
        if _is_connected(building) and _objects_visible(building):
            return building
        last_error = GenerationError("layout validation failed")
    raise GenerationError(
        f"building {index} unsatisfiable after retries: {last_error}")


def generate_world(seed: int, config: WorldConfig) -> World:
    vocab = generate_vocabulary(config, np.random.default_rng([seed, 1]))
    buildings = [generate_building(seed, i, config, vocab)
                 for i in range(config.n_buildings)]
    return World(seed=seed, config=config, vocabulary=vocab,
                 buildings=buildings)


# ---------------------------------------------------------------------------
# rendering

def render_viewpoint(building: Building, viewpoint_id: int,
                     config: WorldConfig | None = None) -> RenderedView:
    """Points of the viewpoint's floor within view range and 2D line of
    sight to its center.

    Positions stay in the world frame; displacements are computed by
    subtracting the returned center.
    """
    vp = building.viewpoints[viewpoint_id]
    cloud = building.points
    view_range = (config or building.config).view_range
    on_floor = np.where(cloud.floors == vp.floor)[0]
    in_range = (np.linalg.norm(cloud.positions[on_floor][:, :2]
                               - vp.position[:2], axis=1) <= view_range)
    on_floor = on_floor[in_range]
    vis = line_of_sight(building.walls[vp.floor], vp.position[:2],
                        cloud.positions[on_floor][:, :2])
    idx = on_floor[vis]
    return RenderedView(viewpoint_id=viewpoint_id, center=vp.position.copy(),
                        indices=idx, positions=cloud.positions[idx],
                        embeddings=cloud.embeddings[idx],
                        concept_ids=cloud.concept_ids[idx])


# ---------------------------------------------------------------------------
# challenges

def make_challenges(world: World, per_building: int | None = None,
                    seed: int = 0) -> list:
    config = world.config
    per_building = per_building or config.challenges_per_building
    rng = np.random.default_rng([seed, 17])
    excluded = {world.vocabulary.id_of(n)
                for n in config.challenge_excluded_concepts
                if n in world.vocabulary.names}
    challenges = []
    for building in world.buildings:
        present = sorted({obj.concept_id for obj in building.objects}
                         - excluded)
        if len(present) < per_building:
            raise ChallengeError(
                f"building {building.id} offers {len(present)} concepts, "
                f"needs {per_building}")
        order = list(rng.permutation(present))
        room_floor = {r.id: r.floor for r in building.rooms}
        for k in range(per_building):
            cid = int(order[k])
            instances = [o for o in building.objects if o.concept_id == cid]
            goal = set()
            for o in instances:
                for vp in building.viewpoints:
                    if vp.room_id != o.room_id:
                        continue
                    if np.linalg.norm(vp.position[:2] - o.position[:2]) \
                            > config.goal_radius:
                        continue
                    goal.add(vp.id)
            goal = sorted(goal)
            if not goal:
                raise ChallengeError(
                    f"concept {world.vocabulary.names[cid]} has no goal "
                    f"viewpoints in building {building.id}")
            goal_floors = {building.viewpoints[g].floor for g in goal}
            starts = [vp.id for vp in building.viewpoints if vp.id not in goal]
            far = [v for v in starts
                   if (building.graph_distance(v, set(goal)) or 0)
                   >= config.min_optimal_steps]
            if far:
                starts = far
            if building.floors > 1 and k % 2 == 0:
                # bias alternate challenges toward cross-floor searches
                cross = [v for v in starts
                         if building.viewpoints[v].floor not in goal_floors]
                if cross:
                    starts = cross
            start = int(starts[int(rng.integers(len(starts)))])
            steps = building.graph_distance(start, set(goal))
            if steps is None:
                raise ChallengeError("goal unreachable")
            start_floor = building.viewpoints[start].floor
            floor_class = "multi" if start_floor not in goal_floors else "single"
            challenges.append(Challenge(
                id=f"b{building.id}-{k}", building=building.id, start=start,
                target_concept=world.vocabulary.names[cid],
                target_concept_id=cid, goal_viewpoints=goal,
                optimal_steps=int(steps), floor_class=floor_class))
    return challenges


# ---------------------------------------------------------------------------
# fixtures

def ambiguity_fixture_world(seed: int, embedding_dim: int = 32,
                            yaws=(0, 90), room_type: str = "kitchen",
                            noise_sigma: float = 0.1) -> World:
    """One building, two same-template rooms at the given yaws.

    Zero placement jitter, so the two rooms realize exactly rotated
    copies of the same object layout: the canonical contradictory
    training distribution for the alignment network.
    """
    config = WorldConfig(embedding_dim=embedding_dim, n_buildings=1,
                         two_floor_fraction=0.0, placement_jitter=0.0,
                         noise_sigma=noise_sigma)
    vocab = generate_vocabulary(config, np.random.default_rng([seed, 1]))
    specs = [((0, 0), 0, room_type, yaws[0]), ((1, 0), 0, room_type, yaws[1])]
    building = assemble_building(0, seed, config, vocab, specs,
                                 np.random.default_rng([seed, 0, 100]))
    if not _is_connected(building):
        raise GenerationError("fixture building is disconnected")
    return World(seed=seed, config=config, vocabulary=vocab,
                 buildings=[building])


# ---------------------------------------------------------------------------
# serialization

def world_to_dict(world: World) -> dict:
    return {
        "schema": WORLD_SCHEMA,
        "seed": world.seed,
        "config": world.config.to_dict(),
        "vocabulary": {
            "names": world.vocabulary.names,
            "families": world.vocabulary.families,
            "prototypes": world.vocabulary.prototypes.tolist(),
        },
        "buildings": [{
            "id": b.id,
            "floors": b.floors,
            "rooms": [{"id": r.id, "type": r.type, "cell": list(r.cell),
                       "floor": r.floor, "yaw_deg": r.yaw_deg,
                       "center": r.center.tolist()} for r in b.rooms],
            "objects": [{"id": o.id, "concept_id": int(o.concept_id),
                         "room_id": o.room_id,
                         "position": o.position.tolist()} for o in b.objects],
            "viewpoints": [{"id": v.id, "room_id": v.room_id,
                            "floor": v.floor,
                            "position": v.position.tolist()}
                           for v in b.viewpoints],
            "edges": [list(e) for e in b.edges],
        } for b in world.buildings],
    }


def world_from_dict(data: dict) -> World:
    if data.get("schema") != WORLD_SCHEMA:
        raise ValueError(f"unsupported world schema: {data.get('schema')}")
    config = WorldConfig.from_dict(data["config"])
    vocab = Vocabulary(
        names=list(data["vocabulary"]["names"]),
        families=list(data["vocabulary"]["families"]),
        prototypes=np.asarray(data["vocabulary"]["prototypes"],
                              dtype=np.float64))
    seed = data["seed"]
    buildings = []
    for bd in data["buildings"]:
        rooms = [Room(id=r["id"], type=r["type"], cell=tuple(r["cell"]),
                      floor=r["floor"], yaw_deg=r["yaw_deg"],
                      center=np.asarray(r["center"])) for r in bd["rooms"]]
        objects = [ObjectInstance(id=o["id"], concept_id=o["concept_id"],
                                  room_id=o["room_id"],
                                  position=np.asarray(o["position"]))
                   for o in bd["objects"]]
        viewpoints = [Viewpoint(id=v["id"], room_id=v["room_id"],
                                floor=v["floor"],
                                position=np.asarray(v["position"]))
                      for v in bd["viewpoints"]]
        cells_by_floor = {}
        for r in rooms:
            cells_by_floor.setdefault(r.floor, set()).add(r.cell)
        walls = {f: _build_walls(cells, config)[0]
                 for f, cells in cells_by_floor.items()}
        points = _build_point_cloud(
            rooms, walls, objects, vocab, config,
            np.random.default_rng([seed, bd["id"], 3]))
        buildings.append(Building(
            id=bd["id"], world_seed=seed, floors=bd["floors"], rooms=rooms,
            objects=objects, viewpoints=viewpoints,
            edges=[tuple(e) for e in bd["edges"]], walls=walls,
            points=points, config=config))
    return World(seed=seed, config=config, vocabulary=vocab,
                 buildings=buildings)


def save_world(path, world: World):
    with open(path, "w") as fh:
        json.dump(world_to_dict(world), fh, sort_keys=True)


def load_world(path) -> World:
    with open(path) as fh:
        return world_from_dict(json.load(fh))


def challenges_to_dict(challenges: list) -> dict:
    return {
        "schema": CHALLENGE_SCHEMA,
        "challenges": [{
            "id": c.id, "building": c.building, "start": c.start,
            "target_concept": c.target_concept,
            "target_concept_id": c.target_concept_id,
            "goal_viewpoints": list(c.goal_viewpoints),
            "optimal_steps": c.optimal_steps,
            "floor_class": c.floor_class,
        } for c in challenges],
    }


def challenges_from_dict(data: dict) -> list:
    if data.get("schema") != CHALLENGE_SCHEMA:
        raise ValueError(f"unsupported challenge schema: {data.get('schema')}")
    return [Challenge(**c) for c in data["challenges"]]


def save_challenges(path, challenges: list):
    with open(path, "w") as fh:
        json.dump(challenges_to_dict(challenges), fh, sort_keys=True)


def load_challenges(path) -> list:
    with open(path) as fh:
        return challenges_from_dict(json.load(fh))

"""Step-wise object-search agents over the shared viewpoint-graph episode.

One Episode implementation defines the simulator contract for every
agent (and for human sessions): arriving at a new viewpoint merges its
full panorama into the accumulated cloud, marks nearby points visited,
and checks the two success conditions (goal viewpoint, query similarity
above the stop threshold). Moving between viewpoints follows graph
shortest paths, one step per hop.

The field-guided agent first tries direct exploitation of a
sufficiently query-similar unvisited point; otherwise it clusters each
unvisited 3 m cell of the accumulated cloud and steers toward the cell
whose clustering best matches the field's predicted neighborhood of the
query, expanding the prediction radius level by level only when the
current level stops improving.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .cluster import Clustering, padded_match_cost, spherical_kmeans
from .models import FieldModel, field_forward
from .training import seed_of
from .worldgen import Building, Challenge, RenderedView, render_viewpoint


@dataclass
class AgentConfig:
    k_clusters: int = 10
    tau: float = 0.3                  # exploitation threshold
    epsilon: float = 0.05             # level-commit tolerance
    level_radii: tuple = (0.1, 1.0)
    sphere_samples: int = 256
    cell_size: float = 3.0
    cell_visited_fraction: float = 0.8


@dataclass
class EpisodeConfig:
    max_steps: int = 100              # T
    tau_stop: float = 0.55
    visited_radius: float = 1.5


@dataclass
class Outcome:
    success: bool
    reason: str                       # "goal" | "similarity" | "budget"


@dataclass
class Decision:
    target: int | None
    kind: str                         # "exploit" | "level-N" | "fallback" | agent name
    cell: tuple | None = None
    level_costs: list | None = None
    s_star: float | None = None


@dataclass
class EpisodeResult:
    challenge_id: str
    agent: str
    success: bool
    steps: int
    optimal_steps: int
    stop_reason: str
    floor_class: str

    def spl_contribution(self) -> float:
        if not self.success:
            return 0.0
        return self.optimal_steps / max(self.steps, self.optimal_steps)

    def to_dict(self):
        return {
            "challenge_id": self.challenge_id,
            "agent": self.agent,
            "success": int(self.success),
            "steps": self.steps,
            "optimal_steps": self.optimal_steps,
            "stop_reason": self.stop_reason,
            "floor_class": self.floor_class,
            "spl_contribution": self.spl_contribution(),
        }


class ViewCache:
    """Memoized panoramic renders, shared across episodes of one run."""

    def __init__(self):
        self._views = {}

    def render(self, building: Building, viewpoint_id: int) -> RenderedView:
        key = (building.id, viewpoint_id)
        if key not in self._views:
            self._views[key] = render_viewpoint(building, viewpoint_id)
        return self._views[key]


class Episode:
    """Shared simulator contract: observation, visitation, and success."""

    def __init__(self, building: Building, challenge: Challenge,
                 q_o: np.ndarray, config: EpisodeConfig,
                 cache: ViewCache | None = None):
        self.building = building
        self.challenge = challenge
        self.q_o = np.asarray(q_o, dtype=np.float64)
        self.config = config
        self.cache = cache or ViewCache()
        n = len(building.points)
        self.observed = np.zeros(n, dtype=bool)
        self.visited_points = np.zeros(n, dtype=bool)
        self.visited_viewpoints = set()
        self.visit_order = []
        self.goal_set = set(challenge.goal_viewpoints)
        self.current = challenge.start
        self.steps = 0
        self.outcome = None

    # -- observation & success ------------------------------------------------

    def start(self) -> Outcome | None:
        self.outcome = self._arrive(self.challenge.start)
        return self.outcome

    def _arrive(self, vp_id: int) -> Outcome | None:
        self.current = vp_id
        if vp_id in self.goal_set:
            return Outcome(True, "goal")
        if vp_id not in self.visited_viewpoints:
            view = self.cache.render(self.building, vp_id)
            self.observed[view.indices] = True
            self.visited_viewpoints.add(vp_id)
            self.visit_order.append(vp_id)
            self._mark_visited_around(vp_id)
            sims = view.embeddings @ self.q_o
            if sims.size and float(np.max(sims)) > self.config.tau_stop:
                return Outcome(True, "similarity")
        return None

    def _mark_visited_around(self, vp_id: int):
        vp = self.building.viewpoints[vp_id]
        cloud = self.building.points
        obs = np.where(self.observed & ~self.visited_points)[0]
        if obs.size == 0:
            return
        same_floor = cloud.floors[obs] == vp.floor
        d2 = np.linalg.norm(cloud.positions[obs][:, :2] - vp.position[:2],
                            axis=1)
        self.visited_points[obs[same_floor
                                & (d2 <= self.config.visited_radius)]] = True

    def mark_point_visited(self, point_index: int):
        self.visited_points[point_index] = True

    def move_to(self, target: int) -> Outcome | None:
        path = self.building.shortest_path(self.current, target)
        for hop in path[1:]:
            if self.steps >= self.config.max_steps:
                break
            self.steps += 1
            out = self._arrive(hop)
            if out is not None:
                self.outcome = out
                return out
        if self.steps >= self.config.max_steps:
            self.outcome = Outcome(False, "budget")
            return self.outcome
        return None

    # -- agent-facing views ----------------------------------------------------

    def unvisited_point_indices(self) -> np.ndarray:
        return np.where(self.observed & ~self.visited_points)[0]

    def unvisited_viewpoints(self) -> list:
        return [vp.id for vp in self.building.viewpoints
                if vp.id not in self.visited_viewpoints]

    def frontier_viewpoints(self) -> list:
        adj = self.building.adjacency()
        frontier = {w for v in self.visited_viewpoints for w in adj[v]
                    if w not in self.visited_viewpoints}
        return sorted(frontier)

    def nearest_unvisited_viewpoint(self, position: np.ndarray) -> int | None:
        best, best_d = None, np.inf
        for vp in self.building.viewpoints:
            if vp.id in self.visited_viewpoints:
                continue
            d = float(np.linalg.norm(vp.position - position))
            if d < best_d - 1e-12:
                best, best_d = vp.id, d
        return best


class Agent:
    name = "agent"

    def decide(self, ep: Episode) -> Decision:
        raise NotImplementedError

    def post_move(self, ep: Episode):
        pass


class RandomAgent(Agent):
    """Walks to a uniformly chosen unvisited viewpoint."""

    name = "random"

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def decide(self, ep: Episode) -> Decision:
        options = ep.unvisited_viewpoints()
        if not options:
            return Decision(target=None, kind=self.name)
        return Decision(target=int(self.rng.choice(options)), kind=self.name)


class BFSAgent(Agent):
    """Blind breadth-first traversal in discovery order."""

    name = "bfs"

    def __init__(self):
        self._queue = []
        self._seen = set()
        self._processed = 0

    def decide(self, ep: Episode) -> Decision:
        adj = ep.building.adjacency()
        if not self._seen:
            self._seen.add(ep.challenge.start)
        while self._processed < len(ep.visit_order):
            vp = ep.visit_order[self._processed]
            self._processed += 1
            for w in adj[vp]:
                if w not in self._seen:
                    self._seen.add(w)
                    self._queue.append(w)
        while self._queue:
            nxt = self._queue.pop(0)
            if nxt not in ep.visited_viewpoints:
                return Decision(target=nxt, kind=self.name)
        return Decision(target=None, kind=self.name)


class DFSAgent(Agent):
    """Blind depth-first traversal; backtracking falls out of shortest paths."""

    name = "dfs"

    def __init__(self):
        self._stack = []
        self._seen = set()
        self._processed = 0

    def decide(self, ep: Episode) -> Decision:
        adj = ep.building.adjacency()
        if not self._seen:
            self._seen.add(ep.challenge.start)
        while self._processed < len(ep.visit_order):
            vp = ep.visit_order[self._processed]
            self._processed += 1
            for w in reversed(adj[vp]):  # lowest index explored first
                if w not in self._seen:
                    self._seen.add(w)
                    self._stack.append(w)
        while self._stack:
            nxt = self._stack.pop()
            if nxt not in ep.visited_viewpoints:
                return Decision(target=nxt, kind=self.name)
        return Decision(target=None, kind=self.name)


def _attributed_scores(ep: Episode, viewpoint_ids: list) -> np.ndarray:
    """Best query similarity among observed points near each viewpoint.

    Viewpoints with no attributed observation score -1.
    """
    cloud = ep.building.points
    obs = np.where(ep.observed)[0]
    scores = np.full(len(viewpoint_ids), -1.0)
    if obs.size == 0:
        return scores
    sims = cloud.embeddings[obs] @ ep.q_o
    pos = cloud.positions[obs][:, :2]
    floors = cloud.floors[obs]
    for i, vid in enumerate(viewpoint_ids):
        vp = ep.building.viewpoints[vid]
        near = ((floors == vp.floor)
                & (np.linalg.norm(pos - vp.position[:2], axis=1)
                   <= ep.config.visited_radius))
        if np.any(near):
            scores[i] = float(np.max(sims[near]))
    return scores


class QueryFollowerAgent(Agent):
    """Greedily heads for the unvisited viewpoint with the most
    query-similar attributed observation."""

    name = "query_follower"

    def decide(self, ep: Episode) -> Decision:
        options = ep.unvisited_viewpoints()
        if not options:
            return Decision(target=None, kind=self.name)
        scores = _attributed_scores(ep, options)
        best = int(np.argmax(scores))
        return Decision(target=options[best], kind=self.name,
                        s_star=float(scores[best]))


class CowAgent(Agent):
    """Follows frontier similarity above a threshold, otherwise explores
    a random frontier viewpoint."""

    name = "cow"

    def __init__(self, rng: np.random.Generator, threshold: float):
        self.rng = rng
        self.threshold = threshold

    def decide(self, ep: Episode) -> Decision:
        frontier = ep.frontier_viewpoints()
        if not frontier:
            remaining = ep.unvisited_viewpoints()
            if not remaining:
                return Decision(target=None, kind=self.name)
            frontier = remaining
        scores = _attributed_scores(ep, frontier)
        best = int(np.argmax(scores))
        if scores[best] > self.threshold:
            return Decision(target=frontier[best], kind=self.name,
                            s_star=float(scores[best]))
        return Decision(target=int(self.rng.choice(frontier)), kind=self.name,
                        s_star=float(scores[best]))


def sample_sphere(rng: np.random.Generator, count: int,
                  radius: float) -> np.ndarray:
    """Uniform points on the sphere of the given radius."""
    d = rng.normal(size=(count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * radius


def field_clusterings(model: FieldModel, q_o: np.ndarray, config: AgentConfig,
                      seed: int) -> list:
    """One predicted-neighborhood clustering per context radius."""
    rng = np.random.default_rng([seed, 13])
    out = []
    for level, radius in enumerate(config.level_radii):
        samples = sample_sphere(rng, config.sphere_samples, radius)
        q = np.tile(q_o, (config.sphere_samples, 1))
        mu, _ = field_forward(model, q, samples)
        out.append(spherical_kmeans(mu.data, config.k_clusters,
                                    seed=seed_of(seed, 31, level)))
    return out


class FieldAgent(Agent):
    """Exploits direct similarity when available, otherwise steers toward
    the cell whose clustering best matches the predicted neighborhood."""

    name = "field"

    def __init__(self, model: FieldModel, config: AgentConfig, seed: int):
        self.model = model
        self.config = config
        self.seed = seed
        self._levels = None              # field clusterings, computed per episode
        self._running_costs = None
        self._cell_cache = {}
        self._pending_point = None

    def _ensure_levels(self, ep: Episode):
        if self._levels is None:
            self._levels = field_clusterings(self.model, ep.q_o, self.config,
                                             self.seed)
            self._running_costs = [np.inf] * len(self.config.level_radii)

    def _cells(self, ep: Episode) -> dict:
        """Unvisited cells -> point indices, cell key anchored at the origin."""
        obs = np.where(ep.observed)[0]
        keys = np.floor(ep.building.points.positions[obs]
                        / self.config.cell_size).astype(np.int64)
        cells = {}
        for idx, key in zip(obs, map(tuple, keys)):
            cells.setdefault(key, []).append(int(idx))
        out = {}
        for key in sorted(cells):
            idxs = np.asarray(cells[key])
            visited_frac = float(np.mean(ep.visited_points[idxs]))
            if visited_frac >= self.config.cell_visited_fraction:
                continue
            if not np.any(~ep.visited_points[idxs]):
                continue
            out[key] = idxs
        return out

    def _cell_clustering(self, ep: Episode, key: tuple,
                         idxs: np.ndarray) -> Clustering:
        cache_key = (key, len(idxs))
        if cache_key not in self._cell_cache:
            k = min(self.config.k_clusters, len(idxs))
            emb = ep.building.points.embeddings[idxs]
            seed = seed_of(self.seed, 97,
                           key[0] % 1009, key[1] % 1009, key[2] % 1009,
                           len(idxs))
            self._cell_cache[cache_key] = spherical_kmeans(emb, k, seed=seed)
        return self._cell_cache[cache_key]

    def decide(self, ep: Episode) -> Decision:
        self._ensure_levels(ep)
        unvisited = ep.unvisited_point_indices()
        if unvisited.size == 0:
            return self._frontier_fallback(ep)
        emb = ep.building.points.embeddings[unvisited]
        sims = emb @ ep.q_o
        s_star = float(np.max(sims))
        if s_star > self.config.tau:
            point = int(unvisited[int(np.argmax(sims))])
            target = ep.nearest_unvisited_viewpoint(
                ep.building.points.positions[point])
            if target is not None:
                self._pending_point = point
                return Decision(target=target, kind="exploit", s_star=s_star)
        cells = self._cells(ep)
        if not cells:
            return self._frontier_fallback(ep, s_star)
        costs = {}
        for key, idxs in cells.items():
            cc = self._cell_clustering(ep, key, idxs)
            costs[key] = [padded_match_cost(cc, level) for level in self._levels]
        level_best = [min(costs[key][l] for key in costs)
                      for l in range(len(self._levels))]
        chosen_level = None
        for l, best in enumerate(level_best):
            if best <= self._running_costs[l] + self.config.epsilon:
                chosen_level = l
                break
        if chosen_level is not None:
            kind = f"level-{chosen_level + 1}"
            cell = min(costs, key=lambda k: (costs[k][chosen_level], k))
        else:
            kind = "fallback"
            cell, chosen_level = min(
                ((k, l) for k in costs for l in range(len(self._levels))),
                key=lambda kl: (costs[kl[0]][kl[1]], kl[0], kl[1]))
        self._running_costs = [min(c, b) for c, b in
                               zip(self._running_costs, level_best)]
        cell_unvisited = [i for i in cells[cell] if not ep.visited_points[i]]
        here = ep.building.viewpoints[ep.current].position
        dists = np.linalg.norm(
            ep.building.points.positions[cell_unvisited] - here, axis=1)
        point = int(cell_unvisited[int(np.argmin(dists))])
        target = ep.nearest_unvisited_viewpoint(
            ep.building.points.positions[point])
        if target is None:
            return Decision(target=None, kind=kind)
        self._pending_point = point
        return Decision(target=target, kind=kind, cell=cell,
                        level_costs=[float(b) for b in level_best],
                        s_star=s_star)

    def _frontier_fallback(self, ep: Episode, s_star=None) -> Decision:
        frontier = ep.frontier_viewpoints()
        if not frontier:
            remaining = ep.unvisited_viewpoints()
            if not remaining:
                return Decision(target=None, kind="fallback", s_star=s_star)
            frontier = remaining
        return Decision(target=frontier[0], kind="fallback", s_star=s_star)

    def post_move(self, ep: Episode):
        # the selected point counts as investigated even if it sits just
        # outside the visited radius of the reached viewpoint
        if self._pending_point is not None:
            ep.mark_point_visited(self._pending_point)
            self._pending_point = None


class OracleCellAgent(FieldAgent):
    """Field agent with the scorer replaced by goal distance: the cell
    nearest the goal is always cheapest. Ceiling for sanity checks."""

    name = "oracle"

    def __init__(self, config: AgentConfig, goal_positions: np.ndarray,
                 seed: int):
        super().__init__(model=None, config=config, seed=seed)
        self.goal_positions = goal_positions

    def _ensure_levels(self, ep: Episode):
        if self._levels is None:
            self._levels = [None]
            self._running_costs = [np.inf]

    def _cell_clustering(self, ep, key, idxs):  # pragma: no cover
        raise RuntimeError("oracle does not cluster")

    def decide(self, ep: Episode) -> Decision:
        self._ensure_levels(ep)
        unvisited = ep.unvisited_point_indices()
        if unvisited.size == 0:
            return self._frontier_fallback(ep)
        cells = self._cells(ep)
        if not cells:
            return self._frontier_fallback(ep)
        costs = {}
        for key, idxs in cells.items():
            pts = ep.building.points.positions[idxs]
            d = np.min(np.linalg.norm(
                pts[:, None, :] - self.goal_positions[None, :, :], axis=2))
            costs[key] = float(d)
        cell = min(costs, key=lambda k: (costs[k], k))
        cell_unvisited = [i for i in cells[cell] if not ep.visited_points[i]]
        here = ep.building.viewpoints[ep.current].position
        dists = np.linalg.norm(
            ep.building.points.positions[cell_unvisited] - here, axis=1)
        point = int(cell_unvisited[int(np.argmin(dists))])
        target = ep.nearest_unvisited_viewpoint(
            ep.building.points.positions[point])
        if target is None:
            return Decision(target=None, kind="fallback")
        self._pending_point = point
        return Decision(target=target, kind="oracle", cell=cell)


# ---------------------------------------------------------------------------
# episode runner

def run_episode(building: Building, challenge: Challenge, agent: Agent,
                q_o: np.ndarray, config: EpisodeConfig,
                cache: ViewCache | None = None):
    """Returns (EpisodeResult, trace). The trace has one record per decision."""
    ep = Episode(building, challenge, q_o, config, cache)
    trace = []
    outcome = ep.start()
    while outcome is None:
        decision = agent.decide(ep)
        trace.append({
            "step": ep.steps,
            "viewpoint": ep.current,
            "decision": decision.kind,
            "cell": list(decision.cell) if decision.cell else None,
            "level_costs": decision.level_costs,
            "s_star": decision.s_star,
            "target": decision.target,
        })
        if decision.target is None:
            outcome = Outcome(False, "budget")
            break
        if (decision.target in ep.visited_viewpoints
                or decision.target == ep.current):
            raise RuntimeError(
                f"agent {agent.name} re-selected visited viewpoint "
                f"{decision.target}")
        outcome = ep.move_to(decision.target)
        agent.post_move(ep)
    result = EpisodeResult(
        challenge_id=challenge.id, agent=agent.name, success=outcome.success,
        steps=ep.steps, optimal_steps=challenge.optimal_steps,
        stop_reason=outcome.reason, floor_class=challenge.floor_class)
    return result, trace

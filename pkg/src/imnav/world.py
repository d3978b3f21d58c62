"""Procedural navigation-graph worlds with landmark-bearing panoramas.

A world is a small connected graph. Each node carries K single-view features:
a view either shows a landmark prototype (if a placement maps that view to a
landmark class) or the shared background vector, plus isotropic observation
noise. Edges are bound to views by heading angle, so "move through view v" is
the discrete action space.

The `forks` layout builds disambiguation chains: at each fork the two branches
are geometrically mirrored and differ only in which landmark class is shown,
so route choice is informative only through landmark identity.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, SamplingError

PROTOTYPE_SEED = 2026
PROTOTYPE_MAX_COS = 0.55

SPLITS = ("train", "val_seen", "val_unseen")


@dataclass(frozen=True)
class LandmarkClass:
    id: int
    phrase: tuple
    prototype: np.ndarray  # unit-norm, (d_v,)
    held_out: bool = False

    @property
    def text(self):
        return " ".join(self.phrase)


@dataclass(frozen=True)
class Library:
    classes: tuple
    background: np.ndarray
    d_v: int

    def by_id(self, cid):
        return self.classes[cid]

    def pool(self, split):
        """Class ids available to worlds of a split."""
        if split == "val_unseen":
            return [c.id for c in self.classes if c.held_out]
        return [c.id for c in self.classes if not c.held_out]

    def words(self):
        out = set()
        for c in self.classes:
            out.update(c.phrase)
        return out


def _sampled_unit(rng, d_v, existing, max_cos=PROTOTYPE_MAX_COS):
    for _ in range(10000):
        v = rng.normal(size=d_v)
        v = v / np.linalg.norm(v)
        if all(abs(float(v @ e)) < max_cos for e in existing):
            return v.astype(np.float32)
    raise SamplingError(f"could not separate {len(existing) + 1} prototypes in d_v={d_v}")


def build_library(phrases, held_out_flags, d_v, seed=PROTOTYPE_SEED):
    """Deterministic prototypes: unit-norm, pairwise |cos| < 0.55."""
    if d_v < 8:
        raise ConfigurationError(f"d_v must be >= 8, got {d_v}")
    if len(set(phrases)) != len(phrases):
        raise ConfigurationError("landmark phrases must be unique")
    rng = np.random.default_rng(np.random.SeedSequence([seed, d_v]))
    vecs = []
    for _ in range(len(phrases) + 1):  # +1 for the background vector
        vecs.append(_sampled_unit(rng, d_v, vecs))
    classes = tuple(
        LandmarkClass(i, tuple(p.split()), vecs[i], held)
        for i, (p, held) in enumerate(zip(phrases, held_out_flags))
    )
    return Library(classes=classes, background=vecs[-1], d_v=d_v)


def load_library(path, d_v, seed=PROTOTYPE_SEED):
    """Read 'phrase[\\t*]' lines; lines ending in a tab-star are held out."""
    phrases, flags = [], []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "\t" in line:
                phrase, marker = line.split("\t", 1)
                phrases.append(phrase.strip())
                flags.append(marker.strip() == "*")
            else:
                phrases.append(line)
                flags.append(False)
    return build_library(phrases, flags, d_v, seed)


@dataclass(frozen=True)
class WorldConfig:
    library: Library
    layout: str = "forks"        # forks | ring | random
    n_nodes: int = 12            # ring / random layouts
    k_views: int = 12
    sigma_obs: float = 0.05
    split: str = "train"
    n_forks: int = 2
    pre_len: int = 1
    extra_edges: int = 2         # random layout
    placement_rate: float = 0.5  # ring / random layouts


@dataclass
class World:
    k_views: int
    d_v: int
    sigma_obs: float
    split: str
    positions: np.ndarray              # (n, 2) float64
    edges: tuple                       # ((a, b) with a < b, ...)
    view_map: dict                     # node -> {view: neighbor}
    placements: dict                   # node -> ((class_id, view), ...)
    library: Library
    designated: tuple | None = None    # (start, goal) for fork worlds
    _adj: dict = field(default_factory=dict, repr=False)
    _base: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        adj = {i: [] for i in range(len(self.positions))}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        self._adj = {k: sorted(v) for k, v in adj.items()}

    @property
    def n_nodes(self):
        return len(self.positions)

    def neighbors(self, node):
        return self._adj[node]

    def base_panorama(self, node):
        """Noiseless (K, d_v) features for a node: prototypes over background."""
        if node not in self._base:
            pano = np.tile(self.library.background, (self.k_views, 1))
            for cid, view in self.placements.get(node, ()):
                pano[view] = self.library.by_id(cid).prototype
            self._base[node] = pano.astype(np.float32)
        return self._base[node]

    def edge_length(self, a, b):
        return float(np.linalg.norm(self.positions[a] - self.positions[b]))


def navigable(world, node):
    """Views bound to edges at `node`, as sorted (view, neighbor) pairs."""
    if node not in world.view_map:
        raise KeyError(f"unknown node {node}")
    return sorted(world.view_map[node].items())


def observation_at(world, node, rng):
    """Sample a (K, d_v) panorama: base features plus fresh isotropic noise."""
    if node not in world.view_map:
        raise KeyError(f"unknown node {node}")
    base = world.base_panorama(node)
    if world.sigma_obs == 0.0:
        return base.copy()
    noise = rng.normal(0.0, world.sigma_obs, size=base.shape).astype(np.float32)
    return base + noise


def shortest_path(world, a, b):
    """Minimal Euclidean-length path; ties resolved to the lexicographically
    smallest node sequence (i.e. smaller next-node id first)."""
    if a == b:
        return (a,), 0.0
    heap = [(0.0, (a,))]
    done = set()
    while heap:
        dist, path = heapq.heappop(heap)
        node = path[-1]
        if node == b:
            return path, dist
        if node in done:
            continue
        done.add(node)
        for nxt in world.neighbors(node):
            if nxt not in done:
                heapq.heappush(heap, (dist + world.edge_length(node, nxt), path + (nxt,)))
    raise SamplingError(f"no path from {a} to {b}")


@dataclass(frozen=True)
class Episode:
    world: World
    start: int
    goal: int
    teacher_path: tuple
    mode: str                       # fine | coarse
    target_landmark: int | None = None


def _assign_views(positions, adj, k_views):
    """Bind each edge to a heading-sector view per endpoint; collisions shift
    to the next free sector (K >= degree + 1 guarantees room)."""
    sector = 2.0 * math.pi / k_views
    view_map = {}
    for u in range(len(positions)):
        taken = {}
        for v in sorted(adj[u]):
            d = positions[v] - positions[u]
            ang = math.atan2(d[1], d[0]) % (2.0 * math.pi)
            view = int(round(ang / sector)) % k_views
            while view in taken:
                view = (view + 1) % k_views
            taken[view] = v
        view_map[u] = taken
    return view_map


def _free_view(view_map, placements, node, k_views, rng):
    used = set(view_map[node]) | {v for _, v in placements.get(node, ())}
    free = [v for v in range(k_views) if v not in used]
    if not free:
        raise ConfigurationError(f"no free view at node {node}")
    return int(free[int(rng.integers(len(free)))])


def _check_config(cfg, n_nodes, max_degree):
    if n_nodes < 8:
        raise ConfigurationError(f"world needs >= 8 nodes, got {n_nodes}")
    if not cfg.library.classes:
        raise ConfigurationError("landmark library is empty")
    if cfg.library.d_v < 8:
        raise ConfigurationError("d_v must be >= 8")
    if cfg.k_views < max_degree + 1:
        raise ConfigurationError(
            f"K={cfg.k_views} too small for max degree {max_degree} (need K >= degree + 1)")
    if cfg.split not in SPLITS:
        raise ConfigurationError(f"unknown split {cfg.split!r}")


def _build_forks(cfg, rng):
    """Chain of mirrored forks; wrong branches are dead ends marked by decoy
    landmarks, correct branches by instruction landmarks."""
    pre = cfg.pre_len
    n_forks = cfg.n_forks
    if n_forks < 1:
        raise ConfigurationError("forks layout needs n_forks >= 1")
    # pad the approach corridor until the world has >= 8 nodes
    while 2 + pre + 3 * n_forks < 8:
        pre += 1

    positions = [(0.0, 0.0)]
    nodes_pre = []
    for i in range(pre):
        positions.append((float(i + 1), 0.0))
        nodes_pre.append(len(positions) - 1)
    edges = []
    path = [0] + nodes_pre
    for a, b in zip(path[:-1], path[1:]):
        edges.append((a, b))

    placements = {}
    pool = cfg.library.pool(cfg.split)
    need = 2 * n_forks
    if len(pool) < need:
        raise ConfigurationError(f"split {cfg.split} pool has {len(pool)} classes, need {need}")
    classes = [pool[i] for i in rng.permutation(len(pool))[:need]]
    landmarks = classes[:n_forks]
    decoys = classes[n_forks:]

    x = float(pre)
    y = 0.0
    cur = path[-1]
    for k in range(n_forks):
        # fork node
        x += 1.0
        positions.append((x, y))
        fork = len(positions) - 1
        edges.append((cur, fork))
        side = 1.0 if rng.integers(2) == 0 else -1.0
        positions.append((x + 1.0, y + side))
        cont = len(positions) - 1
        positions.append((x + 1.0, y - side))
        dead = len(positions) - 1
        edges.append((fork, cont))
        edges.append((fork, dead))
        placements.setdefault(fork, []).append(("L", landmarks[k], cont))
        placements.setdefault(fork, []).append(("D", decoys[k], dead))
        placements.setdefault(dead, []).append(("F", decoys[k], None))
        path.extend([fork, cont])
        x += 1.0
        y += side
        cur = cont
    goal = cur
    placements.setdefault(goal, []).append(("F", landmarks[-1], None))

    positions = np.asarray(positions, dtype=np.float64)
    adj = {i: [] for i in range(len(positions))}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    view_map = _assign_views(positions, adj, cfg.k_views)

    resolved = {}
    for node, entries in placements.items():
        out = []
        for kind, cid, toward in entries:
            if toward is not None:
                view = next(v for v, nb in view_map[node].items() if nb == toward)
            else:
                view = _free_view(view_map, {node: tuple(out)}, node, cfg.k_views, rng)
            out.append((cid, view))
        resolved[node] = tuple(out)

    return positions, tuple(sorted(tuple(sorted(e)) for e in edges)), view_map, resolved, (0, goal)


def _build_ring(cfg, rng):
    n = cfg.n_nodes
    spacing = 1.5
    radius = n * spacing / (2.0 * math.pi)
    positions = np.asarray(
        [(radius * math.cos(2 * math.pi * i / n), radius * math.sin(2 * math.pi * i / n))
         for i in range(n)], dtype=np.float64)
    edges = tuple(sorted(tuple(sorted((i, (i + 1) % n))) for i in range(n)))
    return positions, edges, None, None, None


def _build_random(cfg, rng):
    n = cfg.n_nodes
    side = math.sqrt(n) * 1.6
    positions = rng.uniform(0.0, side, size=(n, 2))
    edges = set()
    degree = [0] * n
    for i in range(1, n):
        j = int(rng.integers(i))
        edges.add((j, i))
        degree[i] += 1
        degree[j] += 1
    cap = cfg.k_views - 2
    for _ in range(cfg.extra_edges):
        for _attempt in range(50):
            a, b = int(rng.integers(n)), int(rng.integers(n))
            if a == b:
                continue
            e = (min(a, b), max(a, b))
            if e in edges or degree[a] >= cap or degree[b] >= cap:
                continue
            edges.add(e)
            degree[a] += 1
            degree[b] += 1
            break
    return positions, tuple(sorted(edges)), None, None, None


def _scatter_placements(cfg, positions, view_map, rng):
    pool = cfg.library.pool(cfg.split)
    placements = {}
    for node in range(len(positions)):
        if rng.random() < cfg.placement_rate:
            cid = pool[int(rng.integers(len(pool)))]
            view = _free_view(view_map, placements, node, cfg.k_views, rng)
            placements[node] = ((cid, view),)
    return placements


def generate_world(config, seed):
    """Deterministic world construction; see WorldConfig for layouts."""
    rng = np.random.default_rng(np.random.SeedSequence([0xA11D, seed]))
    if config.layout == "forks":
        positions, edges, view_map, placements, designated = _build_forks(config, rng)
    elif config.layout == "ring":
        positions, edges, view_map, placements, designated = _build_ring(config, rng)
    elif config.layout == "random":
        positions, edges, view_map, placements, designated = _build_random(config, rng)
    else:
        raise ConfigurationError(f"unknown layout {config.layout!r}")

    adj = {i: [] for i in range(len(positions))}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    max_degree = max(len(v) for v in adj.values())
    _check_config(config, len(positions), max_degree)

    if view_map is None:
        view_map = _assign_views(positions, adj, config.k_views)
    if placements is None:
        placements = _scatter_placements(config, positions, view_map, rng)

    world = World(
        k_views=config.k_views,
        d_v=config.library.d_v,
        sigma_obs=config.sigma_obs,
        split=config.split,
        positions=positions,
        edges=edges,
        view_map=view_map,
        placements=placements,
        library=config.library,
        designated=designated,
    )
    # connectivity: BFS from node 0 must reach everything
    seen = {0}
    frontier = [0]
    while frontier:
        node = frontier.pop()
        for nb in world.neighbors(node):
            if nb not in seen:
                seen.add(nb)
                frontier.append(nb)
    if len(seen) != world.n_nodes:
        raise ConfigurationError("generated graph is not connected")
    return world


def hop_distances(world, start):
    """BFS hop counts from `start`."""
    dist = {start: 0}
    frontier = [start]
    while frontier:
        nxt = []
        for node in frontier:
            for nb in world.neighbors(node):
                if nb not in dist:
                    dist[nb] = dist[node] + 1
                    nxt.append(nb)
        frontier = nxt
    return dist


def sample_episode(world, mode, seed, min_hops=3, max_hops=7):
    """Deterministic episode draw. Fork worlds return their designated route;
    other layouts sample a (start, goal) pair whose shortest path has an edge
    count in [min_hops, max_hops]. Coarse episodes need a landmark at the goal."""
    if mode not in ("fine", "coarse"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(np.random.SeedSequence([0xEB15, seed]))

    if world.designated is not None:
        start, goal = world.designated
        path, _ = shortest_path(world, start, goal)
    else:
        pairs = []
        for a in range(world.n_nodes):
            hops = hop_distances(world, a)
            for b, h in sorted(hops.items()):
                if min_hops <= h <= max_hops:
                    if mode == "coarse" and not world.placements.get(b):
                        continue
                    pairs.append((a, b))
        if not pairs:
            raise SamplingError("no node pair at a valid graph distance")
        start, goal = pairs[int(rng.integers(len(pairs)))]
        path, _ = shortest_path(world, start, goal)

    if not (min_hops <= len(path) - 1 <= max_hops):
        raise SamplingError(f"teacher path has {len(path) - 1} edges, outside [{min_hops},{max_hops}]")

    target = None
    if mode == "coarse":
        goal_placements = sorted(world.placements.get(goal, ()))
        if not goal_placements:
            raise SamplingError(f"coarse episode goal {goal} has no landmark placement")
        target = goal_placements[0][0]
    return Episode(world=world, start=start, goal=goal, teacher_path=tuple(path),
                   mode=mode, target_landmark=target)

"""Line infrastructure model: stations, blocks, junction routes, control points.

The whole network is data-driven from a single structured config document
(YAML or JSON; YAML is a superset so one parser handles both).  Everything the
simulator and agents need -- signal placement, line geometry, reachability --
is derived from that document, so a different line is just a different file.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import yaml

UP = "up"
DOWN = "down"
DIRECTIONS = (UP, DOWN)


def opposite(direction: str) -> str:
    return DOWN if direction == UP else UP


class RouteConfigError(ValueError):
    """Raised when a route config fails to parse or validate.

    ``violations`` carries every recorded problem; the exception message is
    the first one.
    """

    def __init__(self, violations: List[str]):
        self.violations = violations
        super().__init__(violations[0] if violations else "invalid route config")


@dataclass
class Platform:
    id: str
    block: str
    capacity: int


@dataclass
class Station:
    id: str
    name: str
    platforms: List[Platform]
    can_turn_back: bool = False
    has_depot: bool = False

    @property
    def capacity(self) -> int:
        return sum(p.capacity for p in self.platforms)


@dataclass
class Block:
    id: str
    length_m: float
    vmax_mps: float
    succ_up: List[str] = field(default_factory=list)
    succ_down: List[str] = field(default_factory=list)
    platform: bool = False

    def succ(self, direction: str) -> List[str]:
        return self.succ_up if direction == UP else self.succ_down


@dataclass
class Route:
    """A locked path through a junction.

    ``blocks`` is the protected path only.  ``approach`` names the block a
    train stands on when requesting the route; it is not part of the path (or
    the "all route blocks unoccupied" grant condition could never hold) and it
    pins down which of possibly several edges into the first path block the
    entry signal actually governs.
    """

    id: str
    blocks: List[str]
    approach: str
    entry_signal: str
    conflicts: List[str] = field(default_factory=list)


@dataclass
class Junction:
    id: str
    routes: List[Route]

    def route(self, route_id: str) -> Route:
        for r in self.routes:
            if r.id == route_id:
                return r
        raise KeyError(route_id)


DEPARTURE = "departure"
JUNCTION = "junction"


@dataclass(frozen=True)
class ControlPoint:
    """A manipulable signal: either a platform departure signal (derived, one
    per servable direction of each platform) or a junction route entry signal
    (named in the config)."""

    id: str
    kind: str                       # DEPARTURE or JUNCTION
    station: str
    block: str                      # departure: platform block; junction: first route block
    direction: str                  # departure/travel direction through the point
    junction: Optional[str] = None
    route: Optional[str] = None


class RouteModel:
    """Validated, query-friendly view of one line's infrastructure."""

    def __init__(self, stations: List[Station], blocks: List[Block], junctions: List[Junction]):
        self.stations: Dict[str, Station] = {s.id: s for s in stations}
        self.blocks: Dict[str, Block] = {b.id: b for b in blocks}
        self.junctions: Dict[str, Junction] = {j.id: j for j in junctions}
        self._station_of_platform_block: Dict[str, Tuple[str, str]] = {}
        for s in stations:
            for p in s.platforms:
                self._station_of_platform_block[p.block] = (s.id, p.id)
        self._build_geometry()
        self._build_control_points()
        self._reach_cache: Dict[Tuple[str, str], Optional[int]] = {}

    # -- construction helpers -------------------------------------------------

    def _build_geometry(self) -> None:
        """Assign a line coordinate span (low, high) to every block.

        Coordinates grow in the up direction.  BFS over successor edges from
        the first platform block of the lowest-id station; an up edge b->n
        pins n.low to b.high, a down edge pins n.high to b.low.  First
        assignment wins, which keeps the walk deterministic on any config.
        """
        self.block_span: Dict[str, Tuple[float, float]] = {}
        if not self.blocks:
            return
        anchor = None
        for sid in sorted(self.stations):
            st = self.stations[sid]
            if st.platforms:
                anchor = st.platforms[0].block
                break
        if anchor is None:
            anchor = sorted(self.blocks)[0]
        self.block_span[anchor] = (0.0, self.blocks[anchor].length_m)
        frontier = [anchor]
        seen = {anchor}
        while frontier:
            nxt: List[str] = []
            for b in frontier:
                low, high = self.block_span[b]
                blk = self.blocks[b]
                # dangling successor ids are skipped here and reported by
                # validate_route; geometry must not crash first
                for n in blk.succ_up:
                    if n in self.blocks and n not in self.block_span:
                        self.block_span[n] = (high, high + self.blocks[n].length_m)
                for n in blk.succ_down:
                    if n in self.blocks and n not in self.block_span:
                        self.block_span[n] = (low - self.blocks[n].length_m, low)
                # predecessors, so disconnected-direction chains still get spans
                for other in self.blocks.values():
                    if other.id in self.block_span:
                        continue
                    if b in other.succ_up:
                        self.block_span[other.id] = (low - other.length_m, low)
                    elif b in other.succ_down:
                        self.block_span[other.id] = (high, high + other.length_m)
                for n in itertools.chain(blk.succ_up, blk.succ_down):
                    if n in self.block_span and n not in seen:
                        seen.add(n)
                        nxt.append(n)
                for other in self.blocks.values():
                    if other.id in self.block_span and other.id not in seen:
                        seen.add(other.id)
                        nxt.append(other.id)
            frontier = nxt
        for b in self.blocks.values():       # isolated blocks: park at origin
            self.block_span.setdefault(b.id, (0.0, b.length_m))
        self.station_pos: Dict[str, float] = {}
        for s in self.stations.values():
            lows = [self.block_span[p.block][0] for p in s.platforms]
            self.station_pos[s.id] = min(lows) if lows else 0.0
        self.line_low = min(lo for lo, _ in self.block_span.values())
        self.line_high = max(hi for _, hi in self.block_span.values())

    def _build_control_points(self) -> None:
        self.control_points: Dict[str, ControlPoint] = {}
        self._dep_cp: Dict[Tuple[str, str], ControlPoint] = {}
        self._entry_routes: Dict[str, List[Tuple[str, str]]] = {}
        pts: List[ControlPoint] = []
        for s in self.stations.values():
            for p in s.platforms:
                blk = self.blocks[p.block]
                for d in DIRECTIONS:
                    if blk.succ(d):
                        cp = ControlPoint(
                            id=f"dep:{s.id}:{p.id}:{d}", kind=DEPARTURE,
                            station=s.id, block=p.block, direction=d)
                        pts.append(cp)
                        self._dep_cp[(p.block, d)] = cp
        for j in self.junctions.values():
            for r in j.routes:
                first = r.blocks[0] if r.blocks else ""
                cp = ControlPoint(
                    id=r.entry_signal, kind=JUNCTION,
                    station=self._junction_station(j), block=first,
                    direction=self._route_direction(r),
                    junction=j.id, route=r.id)
                pts.append(cp)
                self._entry_routes.setdefault(first, []).append((j.id, r.id))
        dir_order = {UP: 0, DOWN: 1}
        kind_order = {DEPARTURE: 0, JUNCTION: 1}
        pts.sort(key=lambda cp: (self.station_pos.get(cp.station, 0.0),
                                 dir_order.get(cp.direction, 2),
                                 kind_order[cp.kind], cp.id))
        for cp in pts:
            self.control_points[cp.id] = cp

    def _junction_station(self, junction: Junction) -> str:
        """Station a junction belongs to: the one owning a platform block among
        the junction's route blocks or approaches."""
        for r in junction.routes:
            for b in itertools.chain(r.blocks, (a for a, _ in self.route_approaches(r))):
                hit = self._station_of_platform_block.get(b)
                if hit:
                    return hit[0]
        return ""

    def _route_direction(self, route: Route) -> str:
        for b, d in self.route_approaches(route):
            return d
        return UP

    # -- queries --------------------------------------------------------------

    def station_of_platform_block(self, block: str) -> Optional[Tuple[str, str]]:
        return self._station_of_platform_block.get(block)

    def departure_point(self, block: str, direction: str) -> Optional[ControlPoint]:
        return self._dep_cp.get((block, direction))

    def entry_routes(self, block: str) -> List[Tuple[str, str]]:
        """(junction, route) pairs whose protected path starts at ``block``."""
        return self._entry_routes.get(block, [])

    def route_approaches(self, route: Route) -> List[Tuple[str, str]]:
        """(approach block, travel direction) pairs for the route's declared
        approach; empty when the approach edge does not exist."""
        if not route.blocks or route.approach not in self.blocks:
            return []
        first = route.blocks[0]
        blk = self.blocks[route.approach]
        return [(route.approach, d) for d in DIRECTIONS if first in blk.succ(d)]

    def enumerate_control_points(self) -> List[ControlPoint]:
        return list(self.control_points.values())

    def line_position(self, block: str, offset: float, direction: str) -> float:
        """Line coordinate of a point ``offset`` metres past the entry of
        ``block`` when traversed in ``direction``."""
        low, high = self.block_span[block]
        return low + offset if direction == UP else high - offset

    def stop_position(self, block: str, direction: str) -> float:
        """Line coordinate of the far (stopping) end of a block in ``direction``."""
        low, high = self.block_span[block]
        return high if direction == UP else low

    def reach_blocks(self, origin_block: str, direction: str, dest_blocks: Iterable[str]) -> Optional[int]:
        """Hop count of the shortest ``direction``-respecting path from
        ``origin_block`` to any of ``dest_blocks``; None if unreachable."""
        targets = set(dest_blocks)
        if origin_block in targets:
            return 0
        frontier = [origin_block]
        seen = {origin_block}
        hops = 0
        while frontier:
            hops += 1
            nxt = []
            for b in frontier:
                for n in self.blocks[b].succ(direction):
                    if n in targets:
                        return hops
                    if n not in seen:
                        seen.add(n)
                        nxt.append(n)
            frontier = nxt
        return None

    def travel_direction(self, origin_station: str, dest_station: str) -> Optional[str]:
        """Direction of the shortest block path between two stations.

        This is what decides which queue a passenger group joins.  Cached.
        """
        key = (origin_station, dest_station)
        if key in self._reach_cache:
            hops = self._reach_cache[key]
            return hops if isinstance(hops, str) or hops is None else None
        best: Optional[str] = None
        best_hops: Optional[int] = None
        dest = [p.block for p in self.stations[dest_station].platforms]
        for d in DIRECTIONS:
            for p in self.stations[origin_station].platforms:
                hops = self.reach_blocks(p.block, d, dest)
                if hops is not None and (best_hops is None or hops < best_hops):
                    best, best_hops = d, hops
        self._reach_cache[key] = best  # type: ignore[assignment]
        return best

    def serves_direction(self, station: str, dest_station: str, direction: str) -> bool:
        return self.travel_direction(station, dest_station) == direction

    def ordered_stations(self) -> List[Station]:
        return sorted(self.stations.values(), key=lambda s: (self.station_pos[s.id], s.id))

    def arrival_platform(self, station: str, direction: str) -> Optional[Platform]:
        """Platform of ``station`` that receives trains travelling ``direction``
        (i.e. whose block has a predecessor edge in that direction)."""
        st = self.stations[station]
        for p in st.platforms:
            for b in self.blocks.values():
                if p.block in b.succ(direction):
                    return p
        return None

    def turnback_route_from(self, block: str, arrival_direction: str) -> Optional[Tuple[str, str]]:
        """(junction, route) approached from ``block`` opposite to
        ``arrival_direction``, if the station layout allows turning back there."""
        d = opposite(arrival_direction)
        for n in self.blocks[block].succ(d):
            for jid, rid in self.entry_routes(n):
                if self.junctions[jid].route(rid).approach == block:
                    return (jid, rid)
        return None


# ---------------------------------------------------------------------------
# parsing / validation / serialization


def _require(mapping: dict, key: str, ctx: str, violations: List[str]):
    if key not in mapping:
        violations.append(f"{ctx}: missing key '{key}'")
        return None
    return mapping[key]


def parse_route_config(text: str) -> RouteModel:
    """Parse a config document into a validated RouteModel.

    Raises RouteConfigError naming the first violation (syntax errors include
    the position yaml reports).
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise RouteConfigError([f"syntax error: {exc}"]) from exc
    if not isinstance(doc, dict):
        raise RouteConfigError(["top level must be a mapping with keys stations/blocks/junctions"])
    violations: List[str] = []
    stations: List[Station] = []
    blocks: List[Block] = []
    junctions: List[Junction] = []
    for sd in doc.get("stations", []) or []:
        sid = _require(sd, "id", "station", violations)
        plats = []
        for pd in sd.get("platforms", []) or []:
            pid = _require(pd, "id", f"station {sid} platform", violations)
            blk = _require(pd, "block", f"station {sid} platform {pid}", violations)
            plats.append(Platform(id=str(pid), block=str(blk),
                                  capacity=int(pd.get("capacity", 0))))
        stations.append(Station(id=str(sid), name=str(sd.get("name", sid)),
                                platforms=plats,
                                can_turn_back=bool(sd.get("can_turn_back", False)),
                                has_depot=bool(sd.get("has_depot", False))))
    for bd in doc.get("blocks", []) or []:
        bid = _require(bd, "id", "block", violations)
        length = _require(bd, "length_m", f"block {bid}", violations)
        vmax = _require(bd, "vmax_mps", f"block {bid}", violations)
        blocks.append(Block(id=str(bid),
                            length_m=float(length if length is not None else 0),
                            vmax_mps=float(vmax if vmax is not None else 0),
                            succ_up=[str(x) for x in bd.get("succ_up", []) or []],
                            succ_down=[str(x) for x in bd.get("succ_down", []) or []],
                            platform=bool(bd.get("platform", False))))
    for jd in doc.get("junctions", []) or []:
        jid = _require(jd, "id", "junction", violations)
        routes = []
        for rd in jd.get("routes", []) or []:
            rid = _require(rd, "id", f"junction {jid} route", violations)
            approach = _require(rd, "approach", f"junction {jid} route {rid}", violations)
            routes.append(Route(id=str(rid),
                                blocks=[str(x) for x in rd.get("blocks", []) or []],
                                approach=str(approach) if approach is not None else "",
                                entry_signal=str(rd.get("entry_signal", f"jct:{jid}:{rid}")),
                                conflicts=[str(x) for x in rd.get("conflicts", []) or []]))
        # conflicts are symmetric by definition; normalize declarations
        by_id = {r.id: r for r in routes}
        for r in routes:
            for c in r.conflicts:
                if c in by_id and r.id not in by_id[c].conflicts:
                    by_id[c].conflicts.append(r.id)
        junctions.append(Junction(id=str(jid), routes=routes))
    if violations:
        raise RouteConfigError(violations)
    model = RouteModel(stations, blocks, junctions)
    violations = validate_route(model)
    if violations:
        raise RouteConfigError(violations)
    return model


def validate_route(model: RouteModel) -> List[str]:
    """Structural invariant checks; returns a list of violations (empty = ok)."""
    v: List[str] = []
    seen_station = set()
    for s in model.stations.values():
        if s.id in seen_station:
            v.append(f"duplicate station id {s.id}")
        seen_station.add(s.id)
        if not s.platforms:
            v.append(f"station {s.id} has no platforms")
        for p in s.platforms:
            if p.block not in model.blocks:
                v.append(f"station {s.id} platform {p.id} references unknown block {p.block}")
            elif not model.blocks[p.block].platform:
                v.append(f"station {s.id} platform {p.id} block {p.block} not flagged platform")
            if p.capacity < 0:
                v.append(f"station {s.id} platform {p.id} negative capacity")
    claimed: Dict[str, str] = {}
    for s in model.stations.values():
        for p in s.platforms:
            if p.block in claimed and claimed[p.block] != s.id:
                v.append(f"platform block {p.block} claimed by stations {claimed[p.block]} and {s.id}")
            claimed[p.block] = s.id
    for b in model.blocks.values():
        if b.length_m <= 0:
            v.append(f"block {b.id} has non-positive length")
        if b.vmax_mps <= 0:
            v.append(f"block {b.id} has non-positive speed limit")
        if b.platform and b.id not in claimed:
            v.append(f"platform block {b.id} not listed by any station")
        for d in DIRECTIONS:
            for n in b.succ(d):
                if n not in model.blocks:
                    v.append(f"block {b.id} succ_{d} references unknown block {n}")
    sig_seen: Dict[str, str] = {}
    for j in model.junctions.values():
        route_ids = {r.id for r in j.routes}
        for r in j.routes:
            if not r.blocks:
                v.append(f"junction {j.id} route {r.id} has no blocks")
            for blk in r.blocks:
                if blk not in model.blocks:
                    v.append(f"junction {j.id} route {r.id} references unknown block {blk}")
            for a, b in zip(r.blocks, r.blocks[1:]):
                if a in model.blocks and b in model.blocks:
                    linked = any(b in model.blocks[a].succ(d) for d in DIRECTIONS)
                    if not linked:
                        v.append(f"junction {j.id} route {r.id} not contiguous at {a}->{b}")
            for c in r.conflicts:
                if c not in route_ids:
                    v.append(f"junction {j.id} route {r.id} conflict {c} not a route of this junction")
                elif c == r.id:
                    v.append(f"junction {j.id} route {r.id} conflicts with itself")
                elif r.id not in j.route(c).conflicts:
                    v.append(f"junction {j.id} conflict {r.id}/{c} not symmetric")
            if r.entry_signal in sig_seen:
                v.append(f"entry signal {r.entry_signal} reused by {sig_seen[r.entry_signal]} and {j.id}/{r.id}")
            sig_seen[r.entry_signal] = f"{j.id}/{r.id}"
            if r.approach not in model.blocks:
                v.append(f"junction {j.id} route {r.id} approach {r.approach} unknown")
            elif r.approach in r.blocks:
                v.append(f"junction {j.id} route {r.id} approach {r.approach} inside the route")
            elif r.blocks and all(blk in model.blocks for blk in r.blocks) \
                    and not model.route_approaches(r):
                v.append(f"junction {j.id} route {r.id}: no edge from approach {r.approach}")
    # every platform must reach an end-of-line sink in each direction it serves
    for s in model.stations.values():
        for p in s.platforms:
            if p.block not in model.blocks:
                continue
            for d in DIRECTIONS:
                if not model.blocks[p.block].succ(d):
                    continue
                if not _reaches_sink(model, p.block, d):
                    v.append(f"platform block {p.block} cannot reach a terminal in direction {d}")
    # turnaround stations need a route linking two of their platform blocks
    for s in model.stations.values():
        if not s.can_turn_back:
            continue
        plat_blocks = {p.block for p in s.platforms}
        ok = False
        for j in model.junctions.values():
            for r in j.routes:
                if any(b in model.blocks for b in r.blocks):
                    approaches = {a for a, _ in model.route_approaches(r)}
                    if (approaches & plat_blocks) and (set(r.blocks) & (plat_blocks - approaches)):
                        ok = True
        if not ok:
            v.append(f"station {s.id} marked can_turn_back but no junction route connects its platforms")
    # per-direction block graph must be acyclic once route-entry edges are removed
    entry_edges = set()
    for j in model.junctions.values():
        for r in j.routes:
            if r.blocks:
                for a, d in model.route_approaches(r):
                    entry_edges.add((a, r.blocks[0]))
    for d in DIRECTIONS:
        color: Dict[str, int] = {}

        def dfs(b: str) -> bool:
            color[b] = 1
            for n in model.blocks[b].succ(d):
                if (b, n) in entry_edges or n not in model.blocks:
                    continue
                c = color.get(n, 0)
                if c == 1 or (c == 0 and dfs(n)):
                    return True
            color[b] = 2
            return False

        for b in model.blocks:
            if color.get(b, 0) == 0 and dfs(b):
                v.append(f"block graph has a {d}-direction cycle outside junction routes (at {b})")
                break
    return v


def _reaches_sink(model: RouteModel, block: str, direction: str) -> bool:
    frontier = [block]
    seen = {block}
    while frontier:
        nxt = []
        for b in frontier:
            succ = [n for n in model.blocks[b].succ(direction) if n in model.blocks]
            if not succ:
                return True
            for n in succ:
                if n not in seen:
                    seen.add(n)
                    nxt.append(n)
        frontier = nxt
    return False


def serialize_route_config(model: RouteModel) -> str:
    """Canonical YAML round-trip of a model (parse(serialize(m)) == m)."""
    doc = {
        "stations": [
            {
                "id": s.id, "name": s.name,
                "platforms": [{"id": p.id, "block": p.block, "capacity": p.capacity}
                              for p in s.platforms],
                "can_turn_back": s.can_turn_back,
                "has_depot": s.has_depot,
            }
            for s in model.stations.values()
        ],
        "blocks": [
            {
                "id": b.id, "length_m": b.length_m, "vmax_mps": b.vmax_mps,
                "succ_up": list(b.succ_up), "succ_down": list(b.succ_down),
                "platform": b.platform,
            }
            for b in model.blocks.values()
        ],
        "junctions": [
            {
                "id": j.id,
                "routes": [{"id": r.id, "blocks": list(r.blocks),
                            "approach": r.approach,
                            "entry_signal": r.entry_signal,
                            "conflicts": sorted(r.conflicts)}
                           for r in j.routes],
            }
            for j in model.junctions.values()
        ],
    }
    return yaml.safe_dump(doc, sort_keys=False)


def load_route_model(path: str) -> RouteModel:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_route_config(fh.read())


def models_equal(a: RouteModel, b: RouteModel) -> bool:
    return (a.stations == b.stations and a.blocks == b.blocks
            and a.junctions == b.junctions)

"""Deterministic 2D closed-loop driving world.

Kinematic bicycle ego, scripted actors, polyline routes with per-segment
navigation commands, separating-axis collision detection, and infraction
logging. One World per episode; a (scenario kind, seed) pair fully
determines the episode given a policy.
"""

import math
from dataclasses import dataclass, field

import numpy as np

DT = 0.05                 # fixed simulation tick (20 Hz)
DELTA_MAX = 0.5236        # max front wheel angle, rad
A_MAX = 3.0               # max engine acceleration, m/s^2
B_MAX = 8.0               # max brake deceleration, m/s^2
C_DRAG = 0.002            # quadratic drag coefficient
BLOCKED_SECONDS = 90.0

COMMANDS = ("Straight", "Left", "Right", "LaneFollow",
            "ChangeLaneLeft", "ChangeLaneRight", "Void")

SCENARIO_KINDS = ("EmergencyBrake", "Overtaking", "GiveWay", "Merging", "StopSign")

PENALTY = {
    "collision_vehicle": 0.60,
    "collision_pedestrian": 0.50,
    "collision_static": 0.65,
    "stop_sign_violation": 0.80,
    "off_road": 0.85,
}
TERMINAL_INFRACTIONS = ("route_deviation", "timeout", "blocked")


def wrap_angle(a):
    """Normalize an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass
class EgoState:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    speed: float = 0.0
    wheelbase: float = 2.8
    length: float = 4.5
    width: float = 1.9


@dataclass
class ControlCommand:
    throttle: float = 0.0
    brake: float = 0.0
    steer: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.throttle <= 1.0):
            raise ValueError(f"throttle {self.throttle} outside [0, 1]")
        if not (0.0 <= self.brake <= 1.0):
            raise ValueError(f"brake {self.brake} outside [0, 1]")
        if not (-1.0 <= self.steer <= 1.0):
            raise ValueError(f"steer {self.steer} outside [-1, 1]")


@dataclass
class ActorState:
    x: float
    y: float
    heading: float
    speed: float
    length: float
    width: float
    kind: str = "vehicle"          # vehicle | pedestrian | static
    script: object = None
    actor_id: int = 0


@dataclass
class InfractionEvent:
    kind: str
    time: float
    penalty: float = 1.0


@dataclass
class ScenarioSpec:
    kind: str
    seed: int
    route_length: float = 120.0
    speed_limit: float = 8.0

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"scenario kind {self.kind!r} not one of {SCENARIO_KINDS}")
        if self.route_length <= 20.0:
            raise ValueError(f"route_length {self.route_length} too short (> 20 m required)")
        if self.speed_limit <= 0.0:
            raise ValueError(f"speed_limit {self.speed_limit} must be positive")


def step_kinematics(ego, cmd, dt=DT, c_drag=C_DRAG):
    """Advance the bicycle model one tick with RK4 (control held over the tick).

    Brake dominates: any brake input forces the executed throttle to zero.
    Speed never goes negative.
    """
    throttle = 0.0 if cmd.brake > 0.0 else cmd.throttle
    delta = DELTA_MAX * cmd.steer
    tan_delta = math.tan(delta)
    L = ego.wheelbase

    def deriv(state):
        x, y, psi, v = state
        v = max(v, 0.0)
        dv = A_MAX * throttle - B_MAX * cmd.brake - c_drag * v * v
        return np.array([v * math.cos(psi), v * math.sin(psi), v / L * tan_delta, dv])

    s0 = np.array([ego.x, ego.y, ego.heading, ego.speed])
    k1 = deriv(s0)
    k2 = deriv(s0 + 0.5 * dt * k1)
    k3 = deriv(s0 + 0.5 * dt * k2)
    k4 = deriv(s0 + dt * k3)
    s1 = s0 + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return EgoState(x=s1[0], y=s1[1], heading=wrap_angle(s1[2]), speed=max(s1[3], 0.0),
                    wheelbase=ego.wheelbase, length=ego.length, width=ego.width)


# -- oriented-rectangle collision (separating axis) -------------------------

def obb_corners(x, y, heading, length, width):
    hl, hw = length / 2.0, width / 2.0
    c, s = math.cos(heading), math.sin(heading)
    return [(x + dx * c - dy * s, y + dx * s + dy * c)
            for dx, dy in ((hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw))]


def _project(corners, ax):
    dots = [cx * ax[0] + cy * ax[1] for cx, cy in corners]
    return min(dots), max(dots)


def obb_overlap(c1, c2):
    """Separating-axis test for two convex quads given as corner lists."""
    for corners in (c1, c2):
        for i in range(4):
            x1, y1 = corners[i]
            x2, y2 = corners[(i + 1) % 4]
            ax = (y1 - y2, x2 - x1)
            n = math.hypot(*ax)
            if n == 0.0:
                continue
            ax = (ax[0] / n, ax[1] / n)
            lo1, hi1 = _project(c1, ax)
            lo2, hi2 = _project(c2, ax)
            if hi1 < lo2 or hi2 < lo1:
                return False
    return True


def rects_collide(x1, y1, h1, l1, w1, x2, y2, h2, l2, w2):
    # Cheap circle prefilter before the SAT test.
    r = 0.5 * (math.hypot(l1, w1) + math.hypot(l2, w2))
    if math.hypot(x2 - x1, y2 - y1) > r:
        return False
    return obb_overlap(obb_corners(x1, y1, h1, l1, w1),
                       obb_corners(x2, y2, h2, l2, w2))


# -- routes ------------------------------------------------------------------

class Route:
    """A polyline route with arc-length lookup and per-segment commands."""

    def __init__(self, waypoints, commands, lane_half_width=2.0, speed_limit=8.0,
                 stop_line_s=None):
        self.waypoints = np.asarray(waypoints, dtype=np.float64)
        if self.waypoints.ndim != 2 or self.waypoints.shape[1] != 2:
            raise ValueError("waypoints must be an (n, 2) array")
        seg = np.diff(self.waypoints, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len < 1e-9):
            raise ValueError("consecutive waypoints must be distinct")
        if len(commands) != len(seg_len):
            raise ValueError(
                f"command list length {len(commands)} != segment count {len(seg_len)}")
        for c in commands:
            if c not in COMMANDS:
                raise ValueError(f"unknown navigation command {c!r}")
        self.commands = list(commands)
        self.lane_half_width = lane_half_width
        self.speed_limit = speed_limit
        self.stop_line_s = stop_line_s
        self._seg = seg
        self._seg_len = seg_len
        self._cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.length = float(self._cum[-1])
        self.time_budget = self.length / 2.0 + 30.0

    def project(self, x, y):
        """Arc-length of the closest polyline point and signed lateral offset."""
        p = np.array([x, y])
        d = p - self.waypoints[:-1]
        t = np.clip((d * self._seg).sum(axis=1) / (self._seg_len ** 2), 0.0, 1.0)
        closest = self.waypoints[:-1] + t[:, None] * self._seg
        dist2 = ((p - closest) ** 2).sum(axis=1)
        i = int(np.argmin(dist2))
        s = self._cum[i] + t[i] * self._seg_len[i]
        tangent = self._seg[i] / self._seg_len[i]
        off = p - closest[i]
        lateral = tangent[0] * off[1] - tangent[1] * off[0]
        return float(s), float(lateral)

    def project_many(self, points):
        """Vectorized project() over an (m, 2) array of points.

        Returns (s, lateral) arrays of length m.
        """
        p = np.asarray(points, dtype=np.float64)
        d = p[:, None, :] - self.waypoints[None, :-1, :]
        t = np.clip((d * self._seg[None]).sum(axis=2) / (self._seg_len ** 2)[None],
                    0.0, 1.0)
        closest = self.waypoints[None, :-1, :] + t[:, :, None] * self._seg[None]
        dist2 = ((p[:, None, :] - closest) ** 2).sum(axis=2)
        i = np.argmin(dist2, axis=1)
        rows = np.arange(len(p))
        s = self._cum[i] + t[rows, i] * self._seg_len[i]
        tangent = self._seg[i] / self._seg_len[i][:, None]
        off = p - closest[rows, i]
        lateral = tangent[:, 0] * off[:, 1] - tangent[:, 1] * off[:, 0]
        return s, lateral

    def segment_index(self, s):
        i = int(np.searchsorted(self._cum, s, side="right")) - 1
        return min(max(i, 0), len(self._seg_len) - 1)

    def point_at(self, s):
        """(x, y, heading) at arc length s; clamps to the route ends."""
        s = min(max(s, 0.0), self.length)
        i = self.segment_index(s)
        t = (s - self._cum[i]) / self._seg_len[i]
        p = self.waypoints[i] + t * self._seg[i]
        heading = math.atan2(self._seg[i, 1], self._seg[i, 0])
        return float(p[0]), float(p[1]), heading

    def command_at(self, s):
        return self.commands[self.segment_index(s)]


# -- scripted actors ---------------------------------------------------------

class RouteFollower:
    """Actor that rides the route profile: cruise, optional brake/stop/resume,
    optional lateral merge from an adjacent lane."""

    def __init__(self, route, s0, cruise, brake_at_s=None, stop_duration=0.0,
                 resume_speed=None, lateral0=0.0, merge_trigger_gap=None,
                 merge_duration=4.0, slow_speed=None, slow_duration=0.0):
        self.route = route
        self.s = s0
        self.speed = cruise
        self.cruise = cruise
        self.brake_at_s = brake_at_s
        self.stop_duration = stop_duration
        self.resume_speed = cruise if resume_speed is None else resume_speed
        self.lateral = lateral0
        self.lateral0 = lateral0
        self.merge_trigger_gap = merge_trigger_gap
        self.merge_duration = merge_duration
        self.slow_speed = slow_speed
        self.slow_duration = slow_duration
        self._phase = "cruise"
        self._phase_t = 0.0

    def step(self, world, actor, dt):
        self._phase_t += dt
        if self._phase == "cruise":
            if self.brake_at_s is not None and self.s >= self.brake_at_s:
                self._phase, self._phase_t = "stopping", 0.0
            if self.merge_trigger_gap is not None:
                ego_s, _ = world.route.project(world.ego.x, world.ego.y)
                if self.s - ego_s <= self.merge_trigger_gap:
                    self._phase, self._phase_t = "merging", 0.0
        elif self._phase == "stopping":
            self.speed = max(0.0, self.speed - 8.0 * dt)
            if self.speed == 0.0:
                self._phase, self._phase_t = "stopped", 0.0
        elif self._phase == "stopped":
            if self._phase_t >= self.stop_duration:
                self._phase, self._phase_t = "resuming", 0.0
        elif self._phase == "resuming":
            self.speed = min(self.resume_speed, self.speed + 2.0 * dt)
        elif self._phase == "merging":
            frac = min(1.0, self._phase_t / self.merge_duration)
            self.lateral = self.lateral0 * 0.5 * (1.0 + math.cos(math.pi * frac))
            if self.slow_speed is not None:
                self.speed = self.slow_speed
            if frac >= 1.0:
                self.lateral = 0.0
                self._phase, self._phase_t = "merged_slow", 0.0
        elif self._phase == "merged_slow":
            if self._phase_t >= self.slow_duration:
                self._phase, self._phase_t = "speedup", 0.0
        elif self._phase == "speedup":
            self.speed = min(self.resume_speed, self.speed + 1.5 * dt)

        self.s += self.speed * dt
        x, y, heading = self.route.point_at(self.s)
        if self.lateral != 0.0:
            x += -math.sin(heading) * self.lateral
            y += math.cos(heading) * self.lateral
        actor.x, actor.y, actor.heading, actor.speed = x, y, heading, self.speed
        # Past the route end the actor keeps going straight and leaves the scene.
        if self.s > self.route.length:
            over = self.s - self.route.length
            actor.x += math.cos(heading) * over
            actor.y += math.sin(heading) * over


class CrossingWalker:
    """Pedestrian crossing the route at a fixed arc position, triggered when
    the ego closes within a gap."""

    def __init__(self, route, cross_s, start_offset, walk_speed, trigger_gap):
        self.route = route
        self.cross_s = cross_s
        self.offset = start_offset
        self.end_offset = -start_offset
        self.walk_speed = walk_speed
        self.trigger_gap = trigger_gap
        self.walking = False

    def step(self, world, actor, dt):
        if not self.walking:
            ego_s, _ = world.route.project(world.ego.x, world.ego.y)
            if self.cross_s - ego_s <= self.trigger_gap:
                self.walking = True
        if self.walking and self.offset > self.end_offset:
            self.offset -= self.walk_speed * dt
            actor.speed = self.walk_speed
        else:
            actor.speed = 0.0
        x, y, heading = self.route.point_at(self.cross_s)
        actor.x = x - math.sin(heading) * self.offset
        actor.y = y + math.cos(heading) * self.offset
        # Walks from +offset toward -offset, i.e. along -normal.
        actor.heading = wrap_angle(heading - math.pi / 2.0)


class StaticScript:
    def step(self, world, actor, dt):
        actor.speed = 0.0


# -- world -------------------------------------------------------------------

@dataclass
class Frame:
    time: float
    ego: tuple          # (x, y, heading, speed)
    command: tuple      # executed (throttle, brake, steer)
    actors: list        # [(x, y, heading, speed), ...]
    infractions: list   # kinds logged this tick
    progress: float


class World:
    def __init__(self, spec, route, ego, actors):
        self.spec = spec
        self.route = route
        self.ego = ego
        self.actors = actors
        self.time = 0.0
        self.tick = 0
        self.infractions = []
        self.progress = 0.0
        self.done = False
        self.termination = None
        self.trace = []
        self.stop_line_served = False
        self.stop_line_scored = False
        self._contacts = set()
        self._off_road_active = False
        self._blocked_ticks = 0
        self._prev_s = 0.0

    def leading_gap(self, max_gap=20.0, half_corridor=None):
        """Distance along the route to the nearest actor ahead inside the
        forward lane corridor, or None."""
        if half_corridor is None:
            half_corridor = self.route.lane_half_width
        ego_s, _ = self.route.project(self.ego.x, self.ego.y)
        best = None
        for a in self.actors:
            s_a, lat_a = self.route.project(a.x, a.y)
            if s_a >= self.route.length - 0.1:
                continue    # past the route end: exited the scene
            if abs(lat_a) > half_corridor + a.width / 2.0:
                continue
            gap = s_a - ego_s - (self.ego.length + a.length) / 2.0
            if -1.0 < gap < max_gap and s_a > ego_s:
                if best is None or gap < best:
                    best = gap
        return best

    def _log(self, kind, tick_kinds):
        penalty = PENALTY.get(kind, 1.0)
        self.infractions.append(InfractionEvent(kind=kind, time=self.time, penalty=penalty))
        tick_kinds.append(kind)
        if kind in TERMINAL_INFRACTIONS:
            self.done = True
            self.termination = kind


def detect_collisions(world):
    """SAT overlap between ego and every actor, debounced per contact episode."""
    events = []
    e = world.ego
    still_touching = set()
    for a in world.actors:
        if rects_collide(e.x, e.y, e.heading, e.length, e.width,
                         a.x, a.y, a.heading, a.length, a.width):
            still_touching.add(a.actor_id)
            if a.actor_id not in world._contacts:
                kind = {"vehicle": "collision_vehicle",
                        "pedestrian": "collision_pedestrian",
                        "static": "collision_static"}[a.kind]
                events.append(InfractionEvent(kind=kind, time=world.time,
                                              penalty=PENALTY[kind]))
    world._contacts = still_touching
    return events


def advance_world(world, cmd):
    """Step ego + scripted actors one tick; log infractions. Returns the new
    InfractionEvents for this tick."""
    if world.done:
        return []
    executed_throttle = 0.0 if cmd.brake > 0.0 else cmd.throttle
    world.ego = step_kinematics(world.ego, cmd)
    for a in world.actors:
        if a.script is not None:
            a.script.step(world, a, DT)
    world.time += DT
    world.tick += 1

    tick_kinds = []
    new_events = detect_collisions(world)
    for ev in new_events:
        world.infractions.append(ev)
        tick_kinds.append(ev.kind)

    s, lateral = world.route.project(world.ego.x, world.ego.y)
    world.progress = max(world.progress, s)

    if abs(lateral) > 8.0:
        world._log("route_deviation", tick_kinds)
    elif abs(lateral) > world.route.lane_half_width + 0.5:
        if not world._off_road_active:
            world._log("off_road", tick_kinds)
            world._off_road_active = True
    else:
        world._off_road_active = False

    stop_s = world.route.stop_line_s
    if stop_s is not None and not world.stop_line_scored:
        if not world.stop_line_served and abs(s - stop_s) < 2.0 and world.ego.speed < 0.1:
            world.stop_line_served = True
        if s > stop_s and world._prev_s <= stop_s:
            if world.stop_line_served:
                world.stop_line_scored = True
            elif world.ego.speed > 0.1:
                world._log("stop_sign_violation", tick_kinds)
                world.stop_line_scored = True
    world._prev_s = s

    if world.ego.speed < 0.1:
        world._blocked_ticks += 1
    else:
        world._blocked_ticks = 0

    if not world.done:
        if world.progress >= world.route.length - 0.5:
            world.done = True
            world.termination = "completed"
        elif world.time > world.route.time_budget:
            world._log("timeout", tick_kinds)
        elif world._blocked_ticks * DT >= BLOCKED_SECONDS:
            world._log("blocked", tick_kinds)

    world.trace.append(Frame(
        time=world.time,
        ego=(world.ego.x, world.ego.y, world.ego.heading, world.ego.speed),
        command=(executed_throttle, cmd.brake, cmd.steer),
        actors=[(a.x, a.y, a.heading, a.speed) for a in world.actors],
        infractions=tick_kinds,
        progress=world.progress,
    ))
    new_events = list(new_events)
    return new_events


# -- scenario construction ----------------------------------------------------

def _make_route(rng, spec, lateral_bump=None, stop_line_s=None,
                bump_commands=("ChangeLaneLeft", "ChangeLaneRight"),
                curvature=None):
    """Gently curved route of the requested length, with an optional lateral
    detour bump (for overtaking) and per-segment commands."""
    spacing = 3.0
    n = int(spec.route_length / spacing) + 1
    if curvature is None:
        curvature = rng.uniform(-0.003, 0.003)
    pts = np.zeros((n, 2))
    heading = 0.0
    for i in range(1, n):
        heading += curvature * spacing
        pts[i] = pts[i - 1] + spacing * np.array([math.cos(heading), math.sin(heading)])
    s_grid = np.arange(n) * spacing
    commands = ["LaneFollow"] * (n - 1)

    if lateral_bump is not None:
        center, half_span, offset = lateral_bump
        normal_heads = np.concatenate([[0.0], np.cumsum(np.full(n - 1, curvature * spacing))])
        for i in range(n):
            u = (s_grid[i] - center) / half_span
            if abs(u) < 1.0:
                off = offset * 0.5 * (1.0 + math.cos(math.pi * u))
                h = normal_heads[i]
                pts[i] += off * np.array([-math.sin(h), math.cos(h)])
        for i in range(n - 1):
            mid = (s_grid[i] + s_grid[i + 1]) / 2.0
            if center - half_span < mid < center:
                commands[i] = bump_commands[0]
            elif center < mid < center + half_span:
                commands[i] = bump_commands[1]

    return Route(pts, commands, lane_half_width=2.0, speed_limit=spec.speed_limit,
                 stop_line_s=stop_line_s)


def reset(spec):
    """Build the initial world for a scenario spec. Identical spec + seed give
    a bit-identical world."""
    if not isinstance(spec, ScenarioSpec):
        spec = ScenarioSpec(**spec)
    rng = np.random.default_rng(spec.seed)
    actors = []
    kind = spec.kind

    if kind == "EmergencyBrake":
        route = _make_route(rng, spec)
        s0 = 28.0 + rng.uniform(-4.0, 4.0)
        brake_at = 52.0 + rng.uniform(-6.0, 6.0)
        cruise = 5.5 + rng.uniform(-0.5, 0.5)
        stop_for = 3.0 + rng.uniform(0.0, 1.5)
        script = RouteFollower(route, s0, cruise, brake_at_s=brake_at,
                               stop_duration=stop_for, resume_speed=7.5)
        x, y, h = route.point_at(s0)
        actors.append(ActorState(x, y, h, cruise, 4.5, 1.9, "vehicle", script, 1))
    elif kind == "Overtaking":
        curvature = rng.uniform(-0.003, 0.003)
        park_s = 60.0 + rng.uniform(-8.0, 8.0)
        route = _make_route(rng, spec, lateral_bump=(park_s, 18.0, 4.0),
                            curvature=curvature)
        # Parked car sits on the original lane centerline (route swerves around it).
        base = _make_route(rng, spec, curvature=curvature)
        x, y, h = base.point_at(park_s)
        actors.append(ActorState(x, y, h, 0.0, 4.5, 1.9, "static", StaticScript(), 1))
    elif kind == "GiveWay":
        route = _make_route(rng, spec)
        cross_s = 60.0 + rng.uniform(-8.0, 8.0)
        walk = 1.4 + rng.uniform(-0.2, 0.3)
        trigger = 26.0 + rng.uniform(-3.0, 3.0)
        script = CrossingWalker(route, cross_s, start_offset=5.0,
                                walk_speed=walk, trigger_gap=trigger)
        x, y, h = route.point_at(cross_s)
        actors.append(ActorState(x - math.sin(h) * 5.0, y + math.cos(h) * 5.0,
                                 wrap_angle(h + math.pi / 2.0), 0.0,
                                 0.6, 0.6, "pedestrian", script, 1))
    elif kind == "Merging":
        route = _make_route(rng, spec)
        s0 = 35.0 + rng.uniform(-5.0, 5.0)
        trigger = 22.0 + rng.uniform(-3.0, 3.0)
        slow = 4.5 + rng.uniform(-0.5, 0.5)
        script = RouteFollower(route, s0, slow, lateral0=3.5,
                               merge_trigger_gap=trigger, merge_duration=4.0,
                               slow_speed=slow, slow_duration=5.0, resume_speed=7.5)
        x, y, h = route.point_at(s0)
        actors.append(ActorState(x - math.sin(h) * 3.5, y + math.cos(h) * 3.5,
                                 h, slow, 4.5, 1.9, "vehicle", script, 1))
    elif kind == "StopSign":
        stop_s = 60.0 + rng.uniform(-8.0, 8.0)
        route = _make_route(rng, spec, stop_line_s=stop_s)

    ego = EgoState(x=route.waypoints[0, 0], y=route.waypoints[0, 1],
                   heading=math.atan2(*(route.waypoints[1] - route.waypoints[0])[::-1]),
                   speed=0.0)
    return World(spec, route, ego, actors)


def export_trace(world, fh):
    """Write the per-frame trace as line-delimited JSON to an open text file."""
    import json
    for fr in world.trace:
        fh.write(json.dumps({
            "t": round(fr.time, 4),
            "ego": list(fr.ego),
            "cmd": list(fr.command),
            "actors": [list(a) for a in fr.actors],
            "infractions": fr.infractions,
            "progress": fr.progress,
        }) + "\n")

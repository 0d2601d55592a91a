"""End-to-end driving policy.

Privileged scene features embedded into agent/map tokens, a trajectory
branch scoring a k-means vocabulary, a reactive control branch over
discrete throttle/brake/steer actions, PID tracking of the planned
trajectory, an output ensemble, and the safety-creeping override.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import world as sim
from .autodiff import Tensor, concat, scaled_dot_attention
from .vocab import ControlVocabulary, TrajectoryVocabulary, WAYPOINT_DT

AGENT_FEATURES = 7      # rel x, rel y, sin/cos rel heading, speed, length, width
MAP_FEATURES = 12       # midpoint x/y, sin/cos direction, distance, 7 command one-hot
POS_FREQS = (0.05, 0.2, 0.8, 3.2)

GROUP_SLICES = {"throttle": (0, 5), "brake": (5, 2), "steer": (7, 9)}


@dataclass
class PolicyConfig:
    feature_dim: int = 64      # C
    k: int = 64                # trajectory vocabulary size
    n_agents: int = 8          # agent token slots (N_a)
    n_map: int = 16            # map token slots (N_m)
    init_seed: int = 0


@dataclass
class SceneSnapshot:
    """Raw privileged inputs to the scene encoder (pre-embedding)."""
    agent_feats: np.ndarray    # (n_valid_agents, AGENT_FEATURES), n_valid <= N_a
    map_feats: np.ndarray      # (n_valid_map, MAP_FEATURES)
    cmd_onehot: np.ndarray     # (7,)


@dataclass
class PolicyOutput:
    traj_scores: np.ndarray        # k sigmoid scores in (0, 1)
    d_traj: np.ndarray             # normalized trajectory distribution
    d_ctrl: tuple                  # (throttle dist, brake dist, steer dist)
    traj_index: int
    ctrl_indices: tuple
    tau_plan: np.ndarray           # (6, 2) vocabulary trajectory
    c_ctrl: sim.ControlCommand


def command_onehot(command):
    vec = np.zeros(len(sim.COMMANDS))
    vec[sim.COMMANDS.index(command)] = 1.0
    return vec


def encode_scene(world, cfg):
    """Extract the raw privileged features the policy consumes.

    Agent slots are ordered by distance to the ego (nearest first) and
    truncated to N_a; empty slots are simply absent (masked). Map slots
    cover the next N_m route segments from the ego's position.
    """
    ego = world.ego
    cos_h, sin_h = math.cos(ego.heading), math.sin(ego.heading)

    def to_ego(x, y):
        dx, dy = x - ego.x, y - ego.y
        return cos_h * dx + sin_h * dy, -sin_h * dx + cos_h * dy

    ranked = sorted(world.actors,
                    key=lambda a: (math.hypot(a.x - ego.x, a.y - ego.y), a.actor_id))
    agent_rows = []
    for a in ranked[:cfg.n_agents]:
        rx, ry = to_ego(a.x, a.y)
        rh = sim.wrap_angle(a.heading - ego.heading)
        agent_rows.append([rx, ry, math.sin(rh), math.cos(rh), a.speed, a.length, a.width])
    agent_feats = np.array(agent_rows) if agent_rows else np.zeros((0, AGENT_FEATURES))

    route = world.route
    ego_s, _ = route.project(ego.x, ego.y)
    first_seg = route.segment_index(ego_s)
    map_rows = []
    for j in range(first_seg, min(first_seg + cfg.n_map, len(route.commands))):
        a, b = route.waypoints[j], route.waypoints[j + 1]
        mid = (a + b) / 2.0
        mx, my = to_ego(mid[0], mid[1])
        seg_h = math.atan2(b[1] - a[1], b[0] - a[0])
        rh = sim.wrap_angle(seg_h - ego.heading)
        row = [mx, my, math.sin(rh), math.cos(rh), math.hypot(mx, my)]
        row.extend(command_onehot(route.commands[j]))
        map_rows.append(row)
    map_feats = np.array(map_rows) if map_rows else np.zeros((0, MAP_FEATURES))

    return SceneSnapshot(agent_feats=agent_feats, map_feats=map_feats,
                         cmd_onehot=command_onehot(route.command_at(ego_s)))


def positional_encoding(centers_flat):
    """Sinusoidal encoding of candidate waypoint coordinates: (k, 12*2*|freqs|)."""
    cols = []
    for f in POS_FREQS:
        cols.append(np.sin(centers_flat * f))
        cols.append(np.cos(centers_flat * f))
    return np.concatenate(cols, axis=1)


def _mlp2(params, prefix, x):
    h = ad.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]).relu()
    return ad.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _cross_attention(params, prefix, queries, keys):
    """Residual single-head cross-attention; with no keys the attention term
    is zero (masked slots contribute nothing)."""
    if keys is None or keys.shape[0] == 0:
        return queries
    q = queries @ params[f"{prefix}.wq"]
    k = keys @ params[f"{prefix}.wk"]
    v = keys @ params[f"{prefix}.wv"]
    return queries + scaled_dot_attention(q, k, v)


class Policy:
    """Trajectory + control policy over a frozen vocabulary pair."""

    # Parameter groups, used for staged pre-training freezes.
    ENCODER_PREFIXES = ("agent_mlp", "map_mlp")
    TRAJ_PREFIXES = ("cmd_mlp", "pos_mlp", "traj_base", "traj_attn_agent",
                     "traj_attn_map", "traj_head")
    CTRL_PREFIXES = ("ctrl_base", "ctrl_attn_agent", "ctrl_attn_map", "ctrl_head")

    def __init__(self, cfg, traj_vocab, ctrl_vocab=None):
        if traj_vocab.k != cfg.k:
            raise ValueError(f"vocabulary size {traj_vocab.k} != config k {cfg.k}")
        self.cfg = cfg
        self.traj_vocab = traj_vocab
        self.ctrl_vocab = ctrl_vocab or ControlVocabulary()
        self.params = ad.ParameterStore()
        self._posenc = Tensor(positional_encoding(traj_vocab.flat()))
        self._init_params()

    def _init_params(self):
        C = self.cfg.feature_dim
        rng = np.random.default_rng(self.cfg.init_seed)

        def dense(name, fan_in, fan_out):
            self.params.add(f"{name}.w1", rng.normal(0, 1 / math.sqrt(fan_in), (fan_in, C)))
            self.params.add(f"{name}.b1", np.zeros(C))
            self.params.add(f"{name}.w2", rng.normal(0, 1 / math.sqrt(C), (C, fan_out)))
            self.params.add(f"{name}.b2", np.zeros(fan_out))

        def attn(name):
            for w in ("wq", "wk", "wv"):
                self.params.add(f"{name}.{w}", rng.normal(0, 1 / math.sqrt(C), (C, C)))

        dense("agent_mlp", AGENT_FEATURES, C)
        dense("map_mlp", MAP_FEATURES, C)
        dense("cmd_mlp", len(sim.COMMANDS), C)
        dense("pos_mlp", self._posenc.shape[1], C)
        self.params.add("traj_base", rng.normal(0, 0.1, (self.cfg.k, C)))
        attn("traj_attn_agent")
        attn("traj_attn_map")
        dense("traj_head", 2 * C, 1)
        self.params.add("ctrl_base", rng.normal(0, 0.1, (self.ctrl_vocab.total, C)))
        attn("ctrl_attn_agent")
        attn("ctrl_attn_map")
        dense("ctrl_head", 2 * C, 1)

    def param_names(self, prefixes):
        return [n for n in self.params.names()
                if any(n == p or n.startswith(p + ".") for p in prefixes)]

    # -- forward ----------------------------------------------------------

    def embed_scene(self, snapshot):
        agents = None
        if snapshot.agent_feats.shape[0] > 0:
            agents = _mlp2(self.params, "agent_mlp", Tensor(snapshot.agent_feats))
        maps = None
        if snapshot.map_feats.shape[0] > 0:
            maps = _mlp2(self.params, "map_mlp", Tensor(snapshot.map_feats))
        return agents, maps

    def trajectory_branch(self, tokens, cmd_onehot):
        """Per-candidate sigmoid scores and the normalized distribution."""
        cmd = np.asarray(cmd_onehot, dtype=np.float64)
        if cmd.shape != (len(sim.COMMANDS),) or not (
                np.all((cmd == 0.0) | (cmd == 1.0)) and cmd.sum() == 1.0):
            raise ValueError(f"cmd must be one-hot over {len(sim.COMMANDS)} categories")
        agents, maps = tokens
        e = self.params["traj_base"] \
            + _mlp2(self.params, "cmd_mlp", Tensor(cmd.reshape(1, -1))) \
            + _mlp2(self.params, "pos_mlp", self._posenc)
        e_agt = _cross_attention(self.params, "traj_attn_agent", e, agents)
        e_map = _cross_attention(self.params, "traj_attn_map", e_agt, maps)
        logits = _mlp2(self.params, "traj_head", concat([e_agt, e_map]))
        scores = logits.reshape(self.cfg.k).sigmoid()
        norm = scores * _reciprocal(scores.sum())
        return scores, norm

    def control_branch(self, tokens):
        """Group-wise softmax distributions (throttle, brake, steer)."""
        agents, maps = tokens
        e = self.params["ctrl_base"]
        e_agt = _cross_attention(self.params, "ctrl_attn_agent", e, agents)
        e_map = _cross_attention(self.params, "ctrl_attn_map", e_agt, maps)
        logits = _mlp2(self.params, "ctrl_head", concat([e_agt, e_map]))
        flat = logits.reshape(self.ctrl_vocab.total)
        dists = []
        for start, length in GROUP_SLICES.values():
            dists.append(flat.narrow(start, length).softmax())
        return tuple(dists)

    def forward(self, snapshot):
        """Full differentiable forward pass; returns Tensors for training."""
        tokens = self.embed_scene(snapshot)
        scores, d_traj = self.trajectory_branch(tokens, snapshot.cmd_onehot)
        d_ctrl = self.control_branch(tokens)
        return {"traj_scores": scores, "d_traj": d_traj, "d_ctrl": d_ctrl}

    def infer(self, snapshot):
        out = self.forward(snapshot)
        d_traj = out["d_traj"].data
        d_ctrl = tuple(d.data for d in out["d_ctrl"])
        traj_idx, ctrl_idx = sample_top1(d_traj, d_ctrl)
        throttle, brake, steer = self.ctrl_vocab.values(*ctrl_idx)
        return PolicyOutput(
            traj_scores=out["traj_scores"].data, d_traj=d_traj, d_ctrl=d_ctrl,
            traj_index=traj_idx, ctrl_indices=ctrl_idx,
            tau_plan=self.traj_vocab.centers[traj_idx],
            c_ctrl=sim.ControlCommand(throttle=throttle, brake=brake, steer=steer))

    # -- persistence --------------------------------------------------------

    def save(self, path, extra_meta=None):
        meta = {"vocab_hash": self.traj_vocab.hash(),
                "feature_dim": self.cfg.feature_dim, "k": self.cfg.k,
                "n_agents": self.cfg.n_agents, "n_map": self.cfg.n_map}
        meta.update(extra_meta or {})
        ad.save_checkpoint(path, self.params, meta=meta)

    def load(self, path, expect_vocab=True):
        values, meta = ad.load_checkpoint(path)
        if expect_vocab and meta.get("vocab_hash") != self.traj_vocab.hash():
            raise ValueError(
                f"{path}: checkpoint vocabulary hash {meta.get('vocab_hash')} does not "
                f"match the loaded vocabulary {self.traj_vocab.hash()}")
        self.params.load_values(values)
        return meta


def _reciprocal(t):
    """1/t for a positive scalar tensor."""
    def backward(out):
        t._accum(-out.grad / (t.data * t.data))
    return Tensor(1.0 / t.data, parents=(t,), backward=backward)


def sample_top1(d_traj, d_ctrl):
    """Argmax per distribution; exact ties resolve to the lowest index."""
    traj_idx = int(np.argmax(d_traj))
    ctrl_idx = tuple(int(np.argmax(d)) for d in d_ctrl)
    return traj_idx, ctrl_idx


class PidTracker:
    """Converts a planned trajectory into a control command.

    Pure-pursuit steering toward the waypoint nearest a 4 m lookahead arc;
    PI speed control against the trajectory-implied target speed.
    """

    KP = 0.5
    KI = 0.05
    LOOKAHEAD = 4.0
    INTEGRAL_CLAMP = 10.0

    def __init__(self):
        self.integral = 0.0

    def track(self, tau_plan, ego):
        wps = np.asarray(tau_plan, dtype=np.float64)
        dists = np.hypot(wps[:, 0], wps[:, 1])
        if np.max(dists) < 1e-6:
            return sim.ControlCommand(throttle=0.0, brake=1.0, steer=0.0)

        i = int(np.argmin(np.abs(dists - self.LOOKAHEAD)))
        ld = max(dists[i], 1e-6)
        alpha = math.atan2(wps[i, 1], wps[i, 0])
        curvature = 2.0 * math.sin(alpha) / ld
        steer = float(np.clip(math.atan(ego.wheelbase * curvature) / sim.DELTA_MAX,
                              -1.0, 1.0))

        seg = np.diff(np.vstack([[0.0, 0.0], wps]), axis=0)
        target_speed = float(np.hypot(seg[:, 0], seg[:, 1]).mean() / WAYPOINT_DT)
        err = target_speed - ego.speed
        self.integral = float(np.clip(self.integral + err * sim.DT,
                                      -self.INTEGRAL_CLAMP, self.INTEGRAL_CLAMP))
        u = self.KP * err + self.KI * self.integral
        if u >= 0.0:
            return sim.ControlCommand(throttle=min(u, 1.0), brake=0.0, steer=steer)
        return sim.ControlCommand(throttle=0.0, brake=min(-u, 1.0), steer=steer)


def ensemble(c_ctrl, c_traj):
    """Combine branch commands: mean throttle, mean steer, max brake."""
    return sim.ControlCommand(
        throttle=(c_ctrl.throttle + c_traj.throttle) / 2.0,
        brake=max(c_ctrl.brake, c_traj.brake),
        steer=(c_ctrl.steer + c_traj.steer) / 2.0)


class SafetyCreep:
    """Fixed throttle pulse when the ego is stuck on a clear road.

    After 2.5 s continuously below 0.1 m/s with no leading actor within 20 m
    in the forward half-lane corridor, applies throttle 0.7 (brake 0, steer
    from the policy) for exactly 1.0 s, then restarts the stillness timer.
    """

    STILL_SECONDS = 2.5
    PULSE_SECONDS = 1.0
    PULSE_THROTTLE = 0.7
    CLEAR_GAP = 20.0

    def __init__(self, enabled=True):
        self.enabled = enabled
        self.still_ticks = 0
        self.pulse_ticks_left = 0

    def update(self, world, policy_steer):
        """Returns the override ControlCommand, or None."""
        if not self.enabled:
            return None
        if self.pulse_ticks_left > 0:
            self.pulse_ticks_left -= 1
            return sim.ControlCommand(throttle=self.PULSE_THROTTLE, brake=0.0,
                                      steer=policy_steer)
        if world.ego.speed < 0.1:
            self.still_ticks += 1
        else:
            self.still_ticks = 0
        if self.still_ticks * sim.DT >= self.STILL_SECONDS:
            if world.leading_gap(max_gap=self.CLEAR_GAP) is None:
                self.still_ticks = 0
                self.pulse_ticks_left = int(round(self.PULSE_SECONDS / sim.DT)) - 1
                return sim.ControlCommand(throttle=self.PULSE_THROTTLE, brake=0.0,
                                          steer=policy_steer)
        return None

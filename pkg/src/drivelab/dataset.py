"""Demonstration collection, the shadow-mode takeover pipeline, dataset
merging, and line-delimited JSON persistence."""

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import expert as xp
from . import world as sim
from .policy import SceneSnapshot, PidTracker, SafetyCreep, encode_scene, ensemble

EPS_STEER = 0.2                  # threshold-trigger steering gap
TAKEOVER_TICKS = 40              # 2 s at dt = 0.05
SUPPRESS_TICKS = 20              # 1 s re-trigger suppression after handback
MAX_EPISODE_TICKS = 4000


@dataclass
class DemoSample:
    agent_feats: np.ndarray
    map_feats: np.ndarray
    cmd_onehot: np.ndarray
    traj_waypoints: np.ndarray      # expert planned trajectory, (6, 2)
    ctrl_indices: tuple             # (throttle_idx, brake_idx, steer_idx)
    scenario_id: str
    time: float

    def snapshot(self):
        return SceneSnapshot(agent_feats=self.agent_feats, map_feats=self.map_feats,
                             cmd_onehot=self.cmd_onehot)


@dataclass
class TakeoverSample(DemoSample):
    trigger: str = "collision"       # collision | threshold (segment-level, first frame)
    steer_gap: float = 0.0
    policy_traj_index: int = -1      # diagnostic only; preference pairs are rebuilt live
    policy_ctrl_indices: tuple = (-1, -1, -1)
    segment_id: str = ""
    round_index: int = 0
    ego_speed: float = 0.0
    infraction_kinds: tuple = ()     # infractions logged on this tick
    truncated: bool = False


class Dataset:
    """Samples plus a manifest describing provenance and filtering."""

    def __init__(self, samples, kind="demo", vocab_hash=None, manifest=None):
        self.samples = list(samples)
        self.manifest = dict(manifest or {})
        self.manifest.setdefault("kind", kind)
        self.manifest["count"] = len(self.samples)
        if vocab_hash is not None:
            self.manifest["vocab_hash"] = vocab_hash

    def __len__(self):
        return len(self.samples)

    @property
    def vocab_hash(self):
        return self.manifest.get("vocab_hash")


def _sample_to_record(s):
    rec = {
        "agent_feats": s.agent_feats.tolist(),
        "map_feats": s.map_feats.tolist(),
        "cmd_onehot": s.cmd_onehot.tolist(),
        "traj_waypoints": s.traj_waypoints.tolist(),
        "ctrl_indices": list(s.ctrl_indices),
        "scenario_id": s.scenario_id,
        "time": s.time,
    }
    if isinstance(s, TakeoverSample):
        rec.update(trigger=s.trigger, steer_gap=s.steer_gap,
                   policy_traj_index=s.policy_traj_index,
                   policy_ctrl_indices=list(s.policy_ctrl_indices),
                   segment_id=s.segment_id, round_index=s.round_index,
                   ego_speed=s.ego_speed,
                   infraction_kinds=list(s.infraction_kinds), truncated=s.truncated)
    return rec


def _record_to_sample(rec):
    base = dict(
        agent_feats=np.array(rec["agent_feats"], dtype=np.float64).reshape(-1, 7),
        map_feats=np.array(rec["map_feats"], dtype=np.float64).reshape(-1, 12),
        cmd_onehot=np.array(rec["cmd_onehot"], dtype=np.float64),
        traj_waypoints=np.array(rec["traj_waypoints"], dtype=np.float64),
        ctrl_indices=tuple(rec["ctrl_indices"]),
        scenario_id=rec["scenario_id"],
        time=rec["time"],
    )
    if "segment_id" in rec:
        return TakeoverSample(**base, trigger=rec["trigger"], steer_gap=rec["steer_gap"],
                              policy_traj_index=rec["policy_traj_index"],
                              policy_ctrl_indices=tuple(rec["policy_ctrl_indices"]),
                              segment_id=rec["segment_id"],
                              round_index=rec["round_index"],
                              ego_speed=rec["ego_speed"],
                              infraction_kinds=tuple(rec["infraction_kinds"]),
                              truncated=rec["truncated"])
    return DemoSample(**base)


def persist(dataset, path):
    """Write a dataset as a manifest line followed by one JSON record per sample."""
    with open(path, "w") as f:
        f.write(json.dumps(dataset.manifest) + "\n")
        for s in dataset.samples:
            f.write(json.dumps(_sample_to_record(s)) + "\n")


def load(path, expect_vocab_hash=None):
    """Read a dataset; malformed lines are rejected with their line number."""
    samples = []
    with open(path) as f:
        first = f.readline()
        if not first:
            raise ValueError(f"{path}:1: empty dataset file (missing manifest)")
        try:
            manifest = json.loads(first)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}:1: malformed manifest ({e})")
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                samples.append(_record_to_sample(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: malformed sample record ({e})")
    if manifest.get("count") != len(samples):
        raise ValueError(
            f"{path}: manifest count {manifest.get('count')} != {len(samples)} records "
            "(truncated file?)")
    if expect_vocab_hash is not None and manifest.get("vocab_hash") not in (None, expect_vocab_hash):
        raise ValueError(f"{path}: vocabulary hash {manifest.get('vocab_hash')} does not "
                         f"match expected {expect_vocab_hash}")
    return Dataset(samples, manifest=manifest)


def scenario_id(spec):
    return f"{spec.kind}:{spec.seed}"


def collect_demos(suite, expert_cfg, policy_cfg, control_vocab,
                  max_infraction_rate=0.2):
    """Drive every route with the expert, one DemoSample per tick.

    Episodes with any infraction are discarded whole; if more than
    max_infraction_rate of the episodes misbehave the expert is considered
    misconfigured and collection aborts.
    """
    kept, discarded = [], 0
    for spec in suite:
        w = sim.reset(spec)
        episode = []
        while not w.done and w.tick < MAX_EPISODE_TICKS:
            snap = encode_scene(w, policy_cfg)
            label = xp.expert_act(w, expert_cfg, control_vocab)
            episode.append(DemoSample(
                agent_feats=snap.agent_feats, map_feats=snap.map_feats,
                cmd_onehot=snap.cmd_onehot, traj_waypoints=label.waypoints,
                ctrl_indices=(label.throttle_idx, label.brake_idx, label.steer_idx),
                scenario_id=scenario_id(spec), time=w.time))
            sim.advance_world(w, label.command)
        if w.infractions:
            discarded += 1
        else:
            kept.extend(episode)
    if discarded > max_infraction_rate * len(suite):
        raise RuntimeError(
            f"expert misconfigured: {discarded}/{len(suite)} episodes had infractions "
            f"(limit {max_infraction_rate:.0%})")
    return Dataset(kept, kind="demo",
                   manifest={"episodes": len(suite), "episodes_discarded": discarded})


def run_shadow_collection(policy, suite, expert_cfg, round_index,
                          eps_steer=EPS_STEER, creep_enabled=True):
    """Run the policy closed-loop with the expert shadowing it.

    A takeover starts when the 2 s collision forecast hits or when the
    post-ensemble policy steer differs from the expert steer by more than
    eps_steer; the expert then drives for exactly 2 s (40 ticks), one
    TakeoverSample per tick. Re-triggering is suppressed for 1 s after
    handback. Returns the raw (unfiltered) takeover dataset.
    """
    samples = []
    trigger_counts = {"collision": 0, "threshold": 0}
    for spec in suite:
        w = sim.reset(spec)
        pid = PidTracker()
        creep = SafetyCreep(enabled=creep_enabled)
        takeover_left = 0
        suppress_left = 0
        segment = None
        seg_counter = 0
        while not w.done and w.tick < MAX_EPISODE_TICKS:
            snap = encode_scene(w, policy.cfg)
            out = policy.infer(snap)
            c_traj = pid.track(out.tau_plan, w.ego)
            final = ensemble(out.c_ctrl, c_traj)
            override = creep.update(w, final.steer)
            if override is not None:
                final = override
            expert_cmd = xp.expert_command(w, expert_cfg)

            if takeover_left == 0 and suppress_left == 0:
                gap = abs(final.steer - expert_cmd.steer)
                trigger = None
                if xp.forecast_collision(w, expert_cfg.forecast_horizon) is not None:
                    trigger = "collision"
                elif gap > eps_steer:
                    trigger = "threshold"
                if trigger is not None:
                    takeover_left = TAKEOVER_TICKS
                    seg_counter += 1
                    segment = (f"{scenario_id(spec)}/r{round_index}/s{seg_counter}",
                               trigger, gap)
                    trigger_counts[trigger] += 1

            if takeover_left > 0:
                label = xp.expert_act(w, expert_cfg, policy.ctrl_vocab)
                n_before = len(w.infractions)
                sim.advance_world(w, label.command)
                tick_kinds = tuple(e.kind for e in w.infractions[n_before:])
                seg_id, trig, gap = segment
                samples.append(TakeoverSample(
                    agent_feats=snap.agent_feats, map_feats=snap.map_feats,
                    cmd_onehot=snap.cmd_onehot, traj_waypoints=label.waypoints,
                    ctrl_indices=(label.throttle_idx, label.brake_idx, label.steer_idx),
                    scenario_id=scenario_id(spec), time=w.time,
                    trigger=trig, steer_gap=gap,
                    policy_traj_index=out.traj_index,
                    policy_ctrl_indices=out.ctrl_indices,
                    segment_id=seg_id, round_index=round_index,
                    ego_speed=w.ego.speed, infraction_kinds=tick_kinds,
                    truncated=False))
                takeover_left -= 1
                if takeover_left == 0:
                    suppress_left = SUPPRESS_TICKS
            else:
                if suppress_left > 0:
                    suppress_left -= 1
                sim.advance_world(w, final)
        if takeover_left > 0:
            # Episode ended mid-segment: mark the partial segment.
            seg_id = segment[0]
            for s in samples:
                if isinstance(s, TakeoverSample) and s.segment_id == seg_id:
                    s.truncated = True
    return Dataset(samples, kind="takeover",
                   vocab_hash=policy.traj_vocab.hash(),
                   manifest={"round": round_index, "triggers": trigger_counts})


def filter_takeovers(dataset):
    """Drop segments where the expert itself misbehaved.

    Discards segments containing an expert-attributed collision/off-road
    event, segments with route deviation, and stuck segments (mean expert
    speed < 0.1 m/s). Idempotent; discard statistics land in the manifest.
    """
    segments = {}
    for s in dataset.samples:
        segments.setdefault(s.segment_id, []).append(s)
    kept = []
    stats = {"segments": len(segments), "discard_infraction": 0,
             "discard_deviation": 0, "discard_stuck": 0, "kept": 0}
    for seg_id in sorted(segments):
        seg = segments[seg_id]
        kinds = {k for s in seg for k in s.infraction_kinds}
        if any(k.startswith("collision") or k == "off_road" for k in kinds):
            stats["discard_infraction"] += 1
        elif "route_deviation" in kinds:
            stats["discard_deviation"] += 1
        elif np.mean([s.ego_speed for s in seg]) < 0.1:
            stats["discard_stuck"] += 1
        else:
            kept.extend(seg)
            stats["kept"] += 1
    manifest = dict(dataset.manifest)
    manifest["filter_stats"] = stats
    return Dataset(kept, manifest=manifest)


class MergedDataset:
    """Demonstrations plus takeover rounds, with takeover samples oversampled
    in the sampling distribution."""

    def __init__(self, demo, takeover_rounds, takeover_weight=4.0):
        hashes = {d.vocab_hash for d in takeover_rounds if d.vocab_hash is not None}
        if demo.vocab_hash is not None:
            hashes.add(demo.vocab_hash)
        if len(hashes) > 1:
            raise ValueError(f"vocabulary hash mismatch across datasets: {sorted(hashes)}")
        self.samples = list(demo.samples)
        self.weights = [1.0] * len(demo.samples)
        for d in takeover_rounds:
            self.samples.extend(d.samples)
            self.weights.extend([takeover_weight] * len(d.samples))
        self.weights = np.asarray(self.weights)
        self.takeover_weight = takeover_weight
        self.manifest = {
            "kind": "merged",
            "demo_count": len(demo.samples),
            "takeover_counts": [len(d) for d in takeover_rounds],
            "takeover_weight": takeover_weight,
            "count": len(self.samples),
        }

    def __len__(self):
        return len(self.samples)

    def sample_indices(self, n, rng):
        """Weighted draws with replacement (the DAgger sampling distribution)."""
        p = self.weights / self.weights.sum()
        return rng.choice(len(self.samples), size=n, p=p)

    def epoch_indices(self, rng):
        """One deterministic epoch: each demo sample once, each takeover
        sample round(weight) times, shuffled."""
        reps = np.rint(self.weights).astype(int)
        idx = np.repeat(np.arange(len(self.samples)), reps)
        rng.shuffle(idx)
        return idx

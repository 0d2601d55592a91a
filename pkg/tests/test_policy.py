import math

import numpy as np
import pytest

from drivelab import policy as pol
from drivelab import world as sim
from drivelab.vocab import ControlVocabulary, TrajectoryVocabulary


def tiny_policy(seed=0, k=8, dim=16):
    rng = np.random.default_rng(99)
    centers = rng.normal(0, 3.0, size=(k, 6, 2))
    cfg = pol.PolicyConfig(feature_dim=dim, k=k, init_seed=seed)
    return pol.Policy(cfg, TrajectoryVocabulary(centers), ControlVocabulary())


def snapshot_from(kind="EmergencyBrake", seed=0, cfg=None):
    w = sim.reset(sim.ScenarioSpec(kind, seed))
    return pol.encode_scene(w, cfg or pol.PolicyConfig(feature_dim=16, k=8))


class TestEncodeScene:
    def test_shapes(self):
        cfg = pol.PolicyConfig(feature_dim=16, k=8)
        snap = snapshot_from("EmergencyBrake", 0, cfg)
        assert snap.agent_feats.shape == (1, pol.AGENT_FEATURES)
        assert snap.map_feats.shape[1] == pol.MAP_FEATURES
        assert snap.map_feats.shape[0] <= cfg.n_map
        assert snap.cmd_onehot.shape == (7,)
        assert snap.cmd_onehot.sum() == 1.0

    def test_empty_scene_has_zero_agents(self):
        snap = snapshot_from("StopSign", 0)
        assert snap.agent_feats.shape[0] == 0

    def test_agents_sorted_by_distance(self):
        w = sim.reset(sim.ScenarioSpec("EmergencyBrake", 0))
        far = sim.ActorState(90.0, 0.0, 0.0, 0.0, 4.5, 1.9, "vehicle", None, 2)
        w.actors.append(far)
        snap = pol.encode_scene(w, pol.PolicyConfig(feature_dim=16, k=8))
        dists = np.hypot(snap.agent_feats[:, 0], snap.agent_feats[:, 1])
        assert np.all(np.diff(dists) >= 0)

    def test_relative_frame(self):
        w = sim.reset(sim.ScenarioSpec("EmergencyBrake", 0))
        snap = pol.encode_scene(w, pol.PolicyConfig(feature_dim=16, k=8))
        a = w.actors[0]
        expect = math.hypot(a.x - w.ego.x, a.y - w.ego.y)
        assert math.hypot(*snap.agent_feats[0, :2]) == pytest.approx(expect)


class TestForward:
    def test_distributions_are_valid(self):
        p = tiny_policy()
        out = p.forward(snapshot_from())
        scores = out["traj_scores"].data
        assert np.all((scores > 0) & (scores < 1))
        assert out["d_traj"].data.sum() == pytest.approx(1.0, abs=1e-12)
        for d in out["d_ctrl"]:
            assert d.data.sum() == pytest.approx(1.0, abs=1e-12)
            assert np.all(d.data > 0)
        assert tuple(len(d.data) for d in out["d_ctrl"]) == (5, 2, 9)

    def test_forward_deterministic(self):
        p = tiny_policy()
        snap = snapshot_from()
        a = p.forward(snap)["d_traj"].data
        b = p.forward(snap)["d_traj"].data
        assert np.array_equal(a, b)

    def test_rejects_bad_command_vector(self):
        p = tiny_policy()
        snap = snapshot_from()
        snap.cmd_onehot = np.full(7, 1.0 / 7.0)
        with pytest.raises(ValueError, match="one-hot"):
            p.forward(snap)

    def test_infer_picks_argmax_and_vocab_entry(self):
        p = tiny_policy()
        out = p.infer(snapshot_from())
        assert out.traj_index == int(np.argmax(out.d_traj))
        assert np.array_equal(out.tau_plan, p.traj_vocab.centers[out.traj_index])
        t, b, s = out.ctrl_indices
        assert out.c_ctrl.throttle == p.ctrl_vocab.throttle[t]
        assert out.c_ctrl.brake == p.ctrl_vocab.brake[b]
        assert out.c_ctrl.steer == p.ctrl_vocab.steer[s]

    def test_top1_tie_resolves_to_lowest_index(self):
        d = np.array([0.25, 0.25, 0.25, 0.25])
        traj_idx, ctrl_idx = pol.sample_top1(d, (d, d, d))
        assert traj_idx == 0
        assert ctrl_idx == (0, 0, 0)

    def test_init_seed_changes_params(self):
        a = tiny_policy(seed=0)
        b = tiny_policy(seed=1)
        assert not np.array_equal(a.params["traj_base"].data,
                                  b.params["traj_base"].data)

    def test_vocab_size_mismatch_rejected(self):
        cfg = pol.PolicyConfig(feature_dim=16, k=8)
        with pytest.raises(ValueError):
            pol.Policy(cfg, TrajectoryVocabulary(np.random.default_rng(0).normal(size=(4, 6, 2))))


class TestEnsemble:
    def test_identities(self):
        a = sim.ControlCommand(throttle=0.4, brake=0.0, steer=-0.2)
        b = sim.ControlCommand(throttle=0.8, brake=1.0, steer=0.6)
        e = pol.ensemble(a, b)
        assert e.throttle == (0.4 + 0.8) / 2.0
        assert e.brake == 1.0
        assert e.steer == (-0.2 + 0.6) / 2.0


class TestPidTracker:
    def test_degenerate_plan_brakes(self):
        pid = pol.PidTracker()
        cmd = pid.track(np.zeros((6, 2)), sim.EgoState(speed=5.0))
        assert cmd.brake == 1.0 and cmd.throttle == 0.0

    def test_straight_plan_accelerates_from_rest(self):
        pid = pol.PidTracker()
        plan = np.stack([np.arange(1, 7) * 3.0, np.zeros(6)], axis=1)  # 6 m/s
        cmd = pid.track(plan, sim.EgoState(speed=0.0))
        assert cmd.throttle > 0.5
        assert cmd.steer == pytest.approx(0.0, abs=1e-9)

    def test_overspeed_brakes(self):
        pid = pol.PidTracker()
        plan = np.stack([np.arange(1, 7) * 0.5, np.zeros(6)], axis=1)  # 1 m/s
        cmd = pid.track(plan, sim.EgoState(speed=8.0))
        assert cmd.brake > 0.0 and cmd.throttle == 0.0


class TestSafetyCreep:
    def _world(self, actor_gap=None):
        route = sim.Route(np.stack([np.arange(0, 41) * 3.0, np.zeros(41)], axis=1),
                          ["LaneFollow"] * 40)
        ego = sim.EgoState(x=0.0, speed=0.0)
        actors = []
        if actor_gap is not None:
            actors = [sim.ActorState(actor_gap, 0.0, 0.0, 0.0, 4.5, 1.9,
                                     "vehicle", None, 1)]
        return sim.World(sim.ScenarioSpec("StopSign", 0), route, ego, actors)

    def test_pulse_after_still_period_on_clear_road(self):
        w = self._world()
        creep = pol.SafetyCreep()
        ticks_still = int(2.5 / sim.DT)
        for i in range(ticks_still - 1):
            assert creep.update(w, 0.1) is None
        cmd = creep.update(w, 0.1)
        assert cmd is not None
        assert cmd.throttle == 0.7 and cmd.brake == 0.0 and cmd.steer == 0.1
        # pulse lasts exactly 1.0 s = 20 ticks including the first
        pulses = 1
        while creep.update(w, 0.1) is not None:
            pulses += 1
        assert pulses == int(1.0 / sim.DT)

    def test_no_pulse_with_leading_actor(self):
        w = self._world(actor_gap=15.0)
        creep = pol.SafetyCreep()
        for _ in range(int(2.5 / sim.DT) + 10):
            assert creep.update(w, 0.0) is None

    def test_actor_beyond_corridor_ignored(self):
        w = self._world(actor_gap=30.0)   # beyond the 20 m clear window
        creep = pol.SafetyCreep()
        got = [creep.update(w, 0.0) for _ in range(int(2.5 / sim.DT))]
        assert got[-1] is not None

    def test_moving_resets_timer(self):
        w = self._world()
        creep = pol.SafetyCreep()
        for i in range(int(2.5 / sim.DT) - 1):
            creep.update(w, 0.0)
        w.ego.speed = 1.0
        assert creep.update(w, 0.0) is None
        assert creep.still_ticks == 0

    def test_disabled_never_fires(self):
        w = self._world()
        creep = pol.SafetyCreep(enabled=False)
        for _ in range(200):
            assert creep.update(w, 0.0) is None


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path):
        p = tiny_policy()
        snap = snapshot_from()
        before = p.infer(snap).d_traj
        p.save(tmp_path / "p.ckpt")
        q = tiny_policy(seed=1)
        q.traj_vocab = p.traj_vocab
        q.load(tmp_path / "p.ckpt")
        after = q.infer(snap).d_traj
        assert np.array_equal(before, after)

    def test_vocab_hash_mismatch_rejected(self, tmp_path):
        p = tiny_policy()
        p.save(tmp_path / "p.ckpt")
        other = tiny_policy()
        other.traj_vocab = TrajectoryVocabulary(p.traj_vocab.centers + 0.5)
        with pytest.raises(ValueError, match="hash"):
            other.load(tmp_path / "p.ckpt")

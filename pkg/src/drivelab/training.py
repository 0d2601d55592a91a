"""Losses and training orchestration: staged pre-training by imitation,
DAgger epochs over merged data, preference-optimization epochs on fresh
takeover data, and the multi-round post-optimization loop."""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dataset as ds
from .autodiff import Tensor

LOGPROB_FLOOR = -50.0   # ln pi clamp on underflow


@dataclass
class TrainConfig:
    beta: float = 0.1
    gamma: float = 0.1
    tau_label: float = 1.0            # soft trajectory target temperature (m)
    pretrain_epochs: int = 2          # per stage
    pretrain_lr: float = 2e-4
    dagger_epochs: int = 1
    dagger_lr: float = 5e-5
    po_epochs: int = 10
    po_lr: float = 1e-6
    rounds: int = 5
    batch_size: int = 16
    takeover_weight: float = 4.0
    eps_steer: float = ds.EPS_STEER
    seed: int = 0

    def __post_init__(self):
        if self.beta <= 0 or self.gamma <= 0:
            raise ValueError("beta and gamma must be positive")
        for f in ("pretrain_epochs", "dagger_epochs", "po_epochs", "batch_size"):
            if getattr(self, f) < 1:
                raise ValueError(f"TrainConfig.{f} must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")


@dataclass
class PreferencePair:
    """A preferred/dispreferred index pair within one output group.

    y_l is always recomputed from the current distribution at loss time;
    any stored argmax is diagnostic only.
    """
    snapshot: object
    group: str            # trajectory | throttle | brake | steer
    y_w: int
    y_l: int


def soft_trajectory_target(traj_vocab, waypoints, tau=1.0):
    """Distribution over vocabulary entries: softmax(-d_j / tau), d_j the
    mean per-waypoint L2 distance to center j."""
    d = traj_vocab.waypoint_distances(waypoints)
    z = -d / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def one_hot(n, idx):
    t = np.zeros(n)
    t[idx] = 1.0
    return t


def kl_loss(target, predicted):
    """D_KL(target || predicted) with 0 ln 0 = 0; predicted is a Tensor."""
    target = np.asarray(target, dtype=np.float64)
    pred = predicted
    if target.ndim != 1 or pred.data.ndim != 1 or target.shape[0] != pred.data.shape[0]:
        raise ValueError(
            f"support mismatch: target {target.shape} vs predicted {pred.data.shape}")
    if np.any(target < 0) or abs(target.sum() - 1.0) > 1e-9:
        raise ValueError("target is not a distribution")
    mask = target > 0.0
    if np.any(pred.data[mask] <= 0.0):
        raise ValueError("support mismatch: predicted has zero mass where target > 0")
    idx = np.flatnonzero(mask)
    t = target[idx]
    entropy_term = float((t * np.log(t)).sum())
    cross = (pred.take_rows(idx).log() * Tensor(t)).sum()
    return cross * -1.0 + entropy_term


def _log_prob(dist, idx, flags=None):
    """ln of one entry of a distribution Tensor, clamped at the floor on
    underflow (the clamp is a constant: no gradient flows through it)."""
    p = dist.narrow(idx, 1)
    if p.data.item() < math.exp(LOGPROB_FLOOR):
        if flags is not None:
            flags.append(idx)
        return Tensor(np.array([LOGPROB_FLOOR]))
    return p.log()


def _log_sigmoid_const(x):
    """ln sigma(x) for a python float, through the same fp ops the Tensor
    path uses so the compensation constant cancels exactly."""
    return float(Tensor(np.array([x])).sigmoid().log().data.item())


def simpo_from_dist(dist, y_w, y_l, beta, gamma, flags=None):
    """Reference-free preference loss -ln sigma(beta ln pi(y_w) - beta ln pi(y_l) - gamma)
    on a single distribution Tensor."""
    lp_w = _log_prob(dist, y_w, flags)
    lp_l = _log_prob(dist, y_l, flags)
    z = (lp_w - lp_l) * beta - gamma
    return z.sigmoid().log() * -1.0


def po_from_dist(dist, y_w, y_l, beta, gamma, flags=None):
    """Compensated preference loss: simpo + ln sigma(-gamma), zero-floored by
    construction when y_l is the argmax."""
    return simpo_from_dist(dist, y_w, y_l, beta, gamma, flags) + _log_sigmoid_const(-gamma)


def _group_dist(out, group):
    if group == "trajectory":
        return out["d_traj"]
    return out["d_ctrl"][("throttle", "brake", "steer").index(group)]


def simpo_loss(policy, pair, beta, gamma):
    """SimPO loss for one pair; y_l is recomputed from the live distribution."""
    out = policy.forward(pair.snapshot)
    dist = _group_dist(out, pair.group)
    y_l = int(np.argmax(dist.data))
    return simpo_from_dist(dist, pair.y_w, y_l, beta, gamma)


def po_loss(policy, pair, beta, gamma):
    out = policy.forward(pair.snapshot)
    dist = _group_dist(out, pair.group)
    y_l = int(np.argmax(dist.data))
    return po_from_dist(dist, pair.y_w, y_l, beta, gamma)


# -- imitation ----------------------------------------------------------------


def _sample_losses(policy, sample, cfg, want_traj=True, want_ctrl=True):
    """(traj KL, summed control KL) Tensors for one demonstration sample."""
    out = policy.forward(sample.snapshot())
    l_traj = l_ctrl = None
    if want_traj:
        target = soft_trajectory_target(policy.traj_vocab, sample.traj_waypoints,
                                        cfg.tau_label)
        l_traj = kl_loss(target, out["d_traj"])
    if want_ctrl:
        sizes = policy.ctrl_vocab.group_sizes
        for j, (size, dist) in enumerate(zip(sizes, out["d_ctrl"])):
            term = kl_loss(one_hot(size, sample.ctrl_indices[j]), dist)
            l_ctrl = term if l_ctrl is None else l_ctrl + term
    return l_traj, l_ctrl


def _batch_loss(policy, samples, cfg, want_traj=True, want_ctrl=True):
    total = None
    for s in samples:
        l_traj, l_ctrl = _sample_losses(policy, s, cfg, want_traj, want_ctrl)
        loss = l_traj if l_ctrl is None else (l_ctrl if l_traj is None else l_traj + l_ctrl)
        total = loss if total is None else total + loss
    return total * (1.0 / len(samples))


def _run_epoch(policy, samples, order, cfg, opt, trainable,
               want_traj=True, want_ctrl=True, tag=""):
    losses = []
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        batch = [samples[i] for i in order[start:start + cfg.batch_size]]
        try:
            loss = _batch_loss(policy, batch, cfg, want_traj, want_ctrl)
            ad.backward(loss, policy.params)
            opt.step(trainable=trainable)
        except ad.NonFiniteError as e:
            raise ad.NonFiniteError(f"{tag} batch {b}: {e}")
        losses.append(loss.data.item())
    return float(np.mean(losses))


PRETRAIN_STAGES = ("trajectory", "control", "joint")


def pretrain(policy, demo, cfg, progress=None):
    """Three-stage imitation pre-training; returns the per-epoch loss history
    {stage: [loss, ...]}. Stage 1: encoder + trajectory branch; stage 2:
    control branch with everything else frozen; stage 3: joint fine-tune."""
    rng = np.random.default_rng(cfg.seed)
    samples = demo.samples
    if not samples:
        raise ValueError("empty demonstration dataset")
    stage_spec = {
        "trajectory": (policy.param_names(policy.ENCODER_PREFIXES + policy.TRAJ_PREFIXES),
                       True, False),
        "control": (policy.param_names(policy.CTRL_PREFIXES), False, True),
        "joint": (None, True, True),
    }
    history = {}
    for stage in PRETRAIN_STAGES:
        trainable, want_traj, want_ctrl = stage_spec[stage]
        steps = cfg.pretrain_epochs * math.ceil(len(samples) / cfg.batch_size)
        opt = ad.Adam(policy.params, lr=cfg.pretrain_lr,
                      schedule="cosine", total_steps=steps)
        history[stage] = []
        for epoch in range(cfg.pretrain_epochs):
            order = rng.permutation(len(samples))
            mean = _run_epoch(policy, samples, order, cfg, opt, trainable,
                              want_traj, want_ctrl, tag=f"pretrain/{stage}")
            history[stage].append(mean)
            if progress:
                progress(f"pretrain {stage} epoch {epoch}: loss {mean:.4f}")
    return history


def mean_imitation_loss(policy, samples, cfg):
    """Evaluation-only mean (trajectory + control) KL over a sample list."""
    if not samples:
        return 0.0
    vals = []
    for s in samples:
        l_traj, l_ctrl = _sample_losses(policy, s, cfg)
        vals.append((l_traj + l_ctrl).data.item())
    return float(np.mean(vals))


def dagger_epoch(policy, merged, cfg, rng):
    """One imitation pass over the merged dataset (takeovers oversampled)."""
    order = merged.epoch_indices(rng)
    opt = ad.Adam(policy.params, lr=cfg.dagger_lr)
    return _run_epoch(policy, merged.samples, order, cfg, opt, None, tag="dagger")


# -- preference optimization --------------------------------------------------

PAIR_GROUPS = ("trajectory", "throttle", "brake", "steer")


def _pair_losses(policy, sample, cfg, margins=None, flags=None):
    """Mean compensated preference loss over the four per-group pairs of one
    takeover sample; y_l is the live argmax of each group."""
    out = policy.forward(sample.snapshot())
    y_w_traj = policy.traj_vocab.nearest_index(sample.traj_waypoints)
    winners = {"trajectory": y_w_traj,
               "throttle": sample.ctrl_indices[0],
               "brake": sample.ctrl_indices[1],
               "steer": sample.ctrl_indices[2]}
    total = None
    for group in PAIR_GROUPS:
        dist = _group_dist(out, group)
        y_w = winners[group]
        y_l = int(np.argmax(dist.data))
        term = po_from_dist(dist, y_w, y_l, cfg.beta, cfg.gamma, flags)
        total = term if total is None else total + term
        if margins is not None:
            lp_w = _log_prob(dist, y_w).data.item()
            lp_l = _log_prob(dist, y_l).data.item()
            margins.append(cfg.beta * (lp_w - lp_l))
    return total * (1.0 / len(PAIR_GROUPS))


def mean_margin(policy, samples, cfg):
    """Mean preference margin beta (ln pi(y_w) - ln pi(y_l)) over all pairs,
    with y_l the current argmax. Always <= 0; larger is better."""
    margins = []
    for s in samples:
        _pair_losses(policy, s, cfg, margins=margins)
    return float(np.mean(margins)) if margins else 0.0


def po_epoch(policy, samples, cfg, opt):
    """One preference epoch over the round's takeover samples."""
    rng = np.random.default_rng(cfg.seed + 7919 + opt.step_count)
    order = rng.permutation(len(samples))
    losses = []
    flags = []
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        batch = [samples[i] for i in order[start:start + cfg.batch_size]]
        try:
            total = None
            for s in batch:
                term = _pair_losses(policy, s, cfg, flags=flags)
                total = term if total is None else total + term
            loss = total * (1.0 / len(batch))
            ad.backward(loss, policy.params)
            opt.step()
        except ad.NonFiniteError as e:
            raise ad.NonFiniteError(f"po batch {b}: {e}")
        losses.append(loss.data.item())
    return float(np.mean(losses)), len(flags)


# -- the multi-round loop ------------------------------------------------------


def post_optimize(policy, demo, suite, expert_cfg, cfg, out_dir,
                  evaluate=None, progress=None):
    """Iterative takeover collection + DAgger + preference optimization.

    Per round: shadow-collect takeovers with the current policy, filter them,
    merge with the demonstrations and all previous rounds, run the DAgger
    epochs, then the preference epochs on this round's data only. Checkpoints
    land under round_<i>/; returns (policy, reports)."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(cfg.seed + 1)
    rounds_kept = []
    reports = []
    for i in range(1, cfg.rounds + 1):
        rdir = os.path.join(out_dir, f"round_{i}")
        os.makedirs(rdir, exist_ok=True)
        raw = ds.run_shadow_collection(policy, suite, expert_cfg, round_index=i,
                                       eps_steer=cfg.eps_steer)
        kept = ds.filter_takeovers(raw)
        ds.persist(kept, os.path.join(rdir, "takeover.jsonl"))
        rounds_kept.append(kept)

        merged = ds.MergedDataset(demo, rounds_kept,
                                  takeover_weight=cfg.takeover_weight)
        dagger_losses = [dagger_epoch(policy, merged, cfg, rng)
                         for _ in range(cfg.dagger_epochs)]

        report = {
            "round": i,
            "takeover_raw": len(raw),
            "takeover_kept": len(kept),
            "triggers": raw.manifest["triggers"],
            "filter_stats": kept.manifest["filter_stats"],
            "dagger_losses": dagger_losses,
        }
        if len(kept) == 0:
            report["po_skipped"] = "no takeover data this round"
            if progress:
                progress(f"round {i}: empty takeover set, preference epochs skipped")
        else:
            margin_before = mean_margin(policy, kept.samples, cfg)
            opt = ad.Adam(policy.params, lr=cfg.po_lr)
            po_losses = []
            underflows = 0
            for _ in range(cfg.po_epochs):
                mean, n_flag = po_epoch(policy, kept.samples, cfg, opt)
                po_losses.append(mean)
                underflows += n_flag
            report["po_losses"] = po_losses
            report["po_underflow_clamps"] = underflows
            report["margin_before"] = margin_before
            report["margin_after"] = mean_margin(policy, kept.samples, cfg)

        if evaluate is not None:
            report["validation"] = evaluate(policy)
        policy.save(os.path.join(rdir, "policy.ckpt"), extra_meta={"round": i})
        with open(os.path.join(rdir, "report.json"), "w") as f:
            json.dump(report, f, indent=2)
        reports.append(report)
        if progress:
            progress(f"round {i}: kept {len(kept)} takeover samples, "
                     f"dagger loss {dagger_losses[-1]:.4f}")
    return policy, reports

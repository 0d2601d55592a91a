"""Imitation pre-training of the two-branch driving policy.

The policy embeds agent and map tokens, cross-attends from learned queries,
and outputs (a) a distribution over the trajectory vocabulary and (b) three
discrete control distributions (throttle/brake/steer). Pre-training runs in
three stages — trajectory branch, control branch, then a joint pass — each
minimizing KL against soft expert targets. Everything runs on the built-in
reverse-mode autodiff over float64 numpy, so results are bit-reproducible.
"""

import numpy as np

from drivelab import dataset as ds
from drivelab import expert as xp
from drivelab import metrics as bench
from drivelab import policy as pol
from drivelab import training as tr
from drivelab import vocab
from drivelab import world as sim


def main():
    train = [sim.ScenarioSpec(k, s) for k in sim.SCENARIO_KINDS for s in (0,)]
    pcfg = pol.PolicyConfig(feature_dim=16, k=16, init_seed=0)
    cv = vocab.ControlVocabulary()

    demo = ds.collect_demos(train, xp.ExpertConfig(), pcfg, cv)
    demo.samples = demo.samples[::4]   # thin for a quick demo
    demo.manifest["count"] = len(demo.samples)
    tv = vocab.build_vocabulary(
        np.stack([s.traj_waypoints for s in demo.samples]), k=16, seed=0)
    policy = pol.Policy(pcfg, tv, cv)

    cfg = tr.TrainConfig(pretrain_epochs=2, batch_size=16, seed=0)
    history = tr.pretrain(policy, demo, cfg,
                          progress=lambda msg: print("  " + msg))
    for stage, losses in history.items():
        print(f"stage {stage:<12} losses {[round(x, 3) for x in losses]}")

    val = [sim.ScenarioSpec(k, 100) for k in sim.SCENARIO_KINDS]
    rep, _ = bench.evaluate_suite(policy, val)
    print("\nclosed-loop validation after pre-training only:")
    print(rep.to_text())
    print("\n(expect mediocre scores: covariate shift is what the takeover "
          "rounds in demo 05 exist to fix)")


if __name__ == "__main__":
    main()

"""Shadow-mode takeover collection.

The policy drives; the privileged controller rides along without acting.
When a 2-second constant-velocity forecast predicts a collision, or the
policy's steering diverges from the shadow controller by more than 0.2,
the controller takes over for exactly 2 seconds (40 ticks) and every tick
of the intervention is recorded as a labeled training sample. Segments
where the controller itself misbehaved are filtered out afterwards.
"""

import numpy as np

from drivelab import dataset as ds
from drivelab import expert as xp
from drivelab import policy as pol
from drivelab import vocab
from drivelab import world as sim


def main():
    rng = np.random.default_rng(0)
    # an untrained policy: plenty of takeovers to look at
    centers = rng.normal(0, 4.0, size=(16, 6, 2)) + \
        np.stack([np.arange(1, 7) * 3.0, np.zeros(6)], axis=1)
    policy = pol.Policy(pol.PolicyConfig(feature_dim=16, k=16, init_seed=0),
                        vocab.TrajectoryVocabulary(centers),
                        vocab.ControlVocabulary())

    suite = [sim.ScenarioSpec(k, s) for k in sim.SCENARIO_KINDS for s in (0,)]
    raw = ds.run_shadow_collection(policy, suite, xp.ExpertConfig(),
                                   round_index=1)
    print(f"trigger counts: {raw.manifest['triggers']}")

    segments = {}
    for s in raw.samples:
        segments.setdefault(s.segment_id, []).append(s)
    print(f"{len(segments)} segments, {len(raw)} labeled ticks\n")
    print(f"{'segment':<28}{'trigger':<11}{'t0':>6}{'ticks':>6}  notes")
    for seg_id in sorted(segments)[:12]:
        seg = segments[seg_id]
        notes = "truncated" if seg[0].truncated else ""
        print(f"{seg_id:<28}{seg[0].trigger:<11}{seg[0].time:6.2f}"
              f"{len(seg):>6}  {notes}")

    kept = ds.filter_takeovers(raw)
    print(f"\nfilter stats: {kept.manifest['filter_stats']}")


if __name__ == "__main__":
    main()

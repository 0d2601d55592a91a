"""Drive every scenario kind with the privileged rule-based controller.

The simulator is a kinematic bicycle integrated with RK4 at 20 Hz on
procedurally generated routes; the controller combines IDM car following,
pure-pursuit steering, and a constant-velocity collision forecast. This is
the "expert" whose demonstrations everything downstream learns from.
"""

from drivelab import expert as xp
from drivelab import metrics as bench
from drivelab import world as sim


class ExpertDriver:
    def __init__(self):
        self.cfg = xp.ExpertConfig()

    def act(self, w):
        return xp.expert_command(w, self.cfg)


def main():
    print(f"{'scenario':<16}{'termination':<14}{'DS':>8}{'time':>8}  infractions")
    for kind in sim.SCENARIO_KINDS:
        r = bench.run_episode(ExpertDriver(), sim.ScenarioSpec(kind, seed=0))
        print(f"{kind:<16}{r.termination:<14}{r.ds:8.2f}{r.elapsed:8.1f}  "
              f"{r.infractions or '-'}")
        eff = bench.efficiency(r.trace)
        comf = bench.comfortness(r.trace)
        print(f"{'':16}efficiency {eff:.1f}  comfortness {comf:.1f}")


if __name__ == "__main__":
    main()

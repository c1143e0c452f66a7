"""Reference ACOPF and the nine-cell scenario grid on the 118-bus system.

The reference ACOPF fixes every transformer at its case tap and every
capacitor bank at one active module; its dispatch becomes the baseline that
the volt/VAR objective is measured against. Each grid cell then combines a
dispatch weight (1, 5, or pinned) with a device range and runs
relax-round-resolve. The table printed at the end has the baseline first,
then one row per cell.

Set ``GRIDVVO_PGLIB_DIR`` to a directory holding ``pglib_opf_case118_ieee.m``
to use the benchmark file; otherwise the MATPOWER original is used.
"""

from __future__ import annotations

import sys

from gridvvo.caseio import case_statistics, load_network
from gridvvo.cases import locate_case
from gridvvo.metrics import TableRow, compute_metrics, render_table
from gridvvo.vvo import INF, ObjectiveConfig, ScenarioConfig, run_pipeline, solve_reference_acopf


def main() -> int:
    loc = locate_case("118_ieee")
    if loc is None:
        print("no 118-bus case file found; install the matpower package or set GRIDVVO_PGLIB_DIR")
        return 1
    net = load_network(loc.path)
    print(f"{loc.path} ({loc.source}): {case_statistics(net)}")

    ref = solve_reference_acopf(net)
    sol = ref.solution
    print(f"reference ACOPF: cost {sol.objective:.2f} $/h, {sol.iterations} iterations, {sol.wall_time:.2f} s\n")

    rows = [TableRow("118", "--", "+-0", "1-1", compute_metrics(ref.state, ref.network, sol.wall_time), is_baseline=True)]
    for lp in (1.0, 5.0, INF):
        for taps, cbs in ((3, 2), (3, 3), (16, 3)):
            res = run_pipeline(ref.network, ScenarioConfig(ObjectiveConfig(lambda_p=lp), taps, cbs), ref.state)
            lab = res.scenario.label
            rows.append(TableRow("118", lab["lambda_p"], lab["tap_range"], lab["cb_range"], res.metrics,
                                 res.status, res.stage, res.t_relax))
    print(render_table(rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())

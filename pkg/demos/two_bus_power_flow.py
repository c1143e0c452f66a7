"""Newton power flow against the closed-form two-bus solution.

A slack bus at 1∠0 feeds a purely active load ``pd`` through a lossless
line of reactance ``x``. Eliminating the angle from the two balance
equations leaves a quadratic in ``v2**2``:

    v2**2 = (1 + sqrt(1 - 4 * x**2 * pd**2)) / 2,   sin(theta2) = -pd * x / v2

which has a real root only while ``pd <= 1 / (2 x)``. The demo walks the
load towards that limit and shows the Newton solver tracking the closed form
and then reporting non-convergence rather than returning a wrong answer.
"""

from __future__ import annotations

import math

from gridvvo.acpf import NonConvergenceError, PfOptions, solve_power_flow
from gridvvo.network import Branch, Bus, Generator, Network

X = 0.1


def network(pd: float) -> Network:
    y = 1.0 / complex(0.0, X)
    return Network(
        buses=(Bus(0, 100.0, 0.5, 1.5, 0.0, 0.0, is_slack=True), Bus(1, 100.0, 0.5, 1.5, pd, 0.0)),
        generators=(Generator(0, 0.0, 100.0, -100.0, 100.0),),
        branches=(Branch(0, 1, y, -y, -y, y),),
    )


def closed_form(pd: float) -> tuple[float, float] | None:
    disc = 1.0 - 4.0 * X**2 * pd**2
    if disc < 0:
        return None
    v2 = math.sqrt((1.0 + math.sqrt(disc)) / 2.0)
    return v2, -math.asin(pd * X / v2)


def main() -> None:
    print(f"loadability limit 1/(2x) = {1 / (2 * X):.1f} p.u.\n")
    print(f"{'pd':>5}  {'v2 newton':>14}  {'v2 exact':>14}  {'theta2 newton':>14}  {'theta2 exact':>14}")
    for pd in (0.0, 1.0, 2.5, 4.0, 4.9, 5.5, 10.0):
        exact = closed_form(pd)
        try:
            s = solve_power_flow(network(pd), [1.0], [], [0.0], [1.0, 1.0], PfOptions(tol=1e-12, max_iter=100))
        except NonConvergenceError as exc:
            print(f"{pd:5.1f}  {'no solution':>14}  {'none' if exact is None else exact[0]:>14}  ({exc})")
            continue
        print(f"{pd:5.1f}  {s.vm[1]:14.10f}  {exact[0]:14.10f}  {s.va[1]:14.10f}  {exact[1]:14.10f}")


if __name__ == "__main__":
    main()

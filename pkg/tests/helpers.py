from __future__ import annotations

from snapstab.harness import Scenario, build_world


def world(algorithm="nb_selfstab", n=3, seed=0, **kw):
    return build_world(Scenario(algorithm=algorithm, n=n, seed=seed, step_budget=0, **kw))


def finish(w, node, limit=50_000):
    """Step ``w`` until ``node``'s open operation completes; return its poll result."""
    for _ in range(limit):
        w.step()
        res = node.poll()
        if res is not None:
            return res
    raise AssertionError("operation did not complete")


"""Smoke test for the moe_rebasin extension module.

Build first, e.g. with `maturin develop -m crates/python/Cargo.toml` or
`python/build_ext.sh`, then run `python python/smoke_test.py`.
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import moe_rebasin as mr  # noqa: E402


def close(a, b, tol=1e-9):
    return all(abs(x - y) <= tol * max(1.0, abs(y)) for x, y in zip(a, b))


def main():
    p = mr.softmax([1.0, 2.0, 3.0])
    assert abs(sum(p) - 1.0) < 1e-12
    assert mr.top_k_indices([0.1, 3.0, 2.0, -1.0], 2) == [1, 2]

    perm, cost = mr.solve_lap([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
    assert sorted(perm) == [0, 1, 2] and cost == 5.0, (perm, cost)

    x = [0.3, -0.2, 0.5, 0.1]
    for variant in mr.variant_names():
        m = mr.MoE.random(variant, experts=4, dim=4, hidden=6, seed=3)
        twin, tau, c_w, c_b, hidden = m.plant(seed=9)
        if variant == "dense":
            assert close(m.forward(x), twin.forward(x))
        aligned, tau_hat, hidden_hat = m.align(twin, method="gram")
        assert sorted(tau_hat) == list(range(m.gated_experts))
        assert close(aligned.forward(x), m.forward(x), 1e-6), variant

    m = mr.MoE.random("sparse", experts=4, dim=4, hidden=6, seed=1)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.json")
        m.save(path)
        assert mr.MoE.load(path) == m
    try:
        mr.MoE.load("/nonexistent/checkpoint.json")
    except OSError:
        pass
    else:
        raise AssertionError("missing file should raise OSError")

    task = mr.Task(samples_per_class=50)
    a = task.train("dense", seed=1, data_seed=1, steps=300)
    b = task.train("dense", seed=2, data_seed=2, steps=300)
    loss, acc = task.evaluate(a)
    assert math.isfinite(loss) and 0.0 <= acc <= 1.0
    report = task.compare(a, b, method="gate")
    assert len(report["naive"]["ts"]) == 25
    assert report["naive"]["loss_barrier"] >= 0.0
    rank = task.rank(a, b, method="gate")
    assert 1 <= rank["rank"] <= 24
    print(f"ok: test loss {loss:.4f}, accuracy {acc:.3f}, "
          f"naive barrier {report['naive']['loss_barrier']:.4f}, "
          f"aligned {report['aligned']['loss_barrier']:.4f}, rank {rank['rank']}")


if __name__ == "__main__":
    main()

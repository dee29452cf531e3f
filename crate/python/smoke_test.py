"""Smoke test for the csaclb extension module.

Build and install with `maturin develop -m crates/py/Cargo.toml`, or put a
built `csaclb*.so` on PYTHONPATH, then run `python python/smoke_test.py`.
"""

import json
import math

import csaclb


def main():
    assert csaclb.shifted_barrier(-1.0, 3.0) == 0.0
    assert csaclb.shifted_barrier_grad(-1.0, 3.0) == 0.0
    assert abs(csaclb.shifted_barrier(0.5, 2.0) - 0.346574) < 1e-6
    assert csaclb.performance_bound(2.0, 1) == 1.5
    assert abs(csaclb.beta_update(0.0, 3e-4, 2.0, 0.0) - 6e-4) < 1e-15
    assert csaclb.shape_reward(1.0, 1.0, False) == (-29.0, True)
    try:
        csaclb.shifted_barrier(0.0, 1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("mu = 1 must be rejected")

    rows = csaclb.bench_bound([1.5, 2.0], "p1")
    assert all(r["ok"] for r in rows)
    assert abs(rows[1]["x_tilde"][0] - 0.5) < 1e-4

    env = csaclb.Env("tilt", seed=3)
    obs = env.reset()
    assert len(obs) == env.obs_dim == 3
    assert abs(obs[0] ** 2 + obs[1] ** 2 - 1.0) < 1e-12
    steps = 0
    done = False
    while not done:
        obs, reward, cost, done = env.step([0.0])
        assert reward <= 0.0 and cost in (0.0, 1.0)
        steps += 1
    assert steps == env.horizon == 200

    config = {
        "algo": "csac_lb",
        "env": "tilt",
        "total_steps": 400,
        "batch_size": 32,
        "eval_interval": 200,
        "eval_episodes": 1,
        "hidden_sizes": [16, 16],
    }
    log, checkpoint = csaclb.train(json.dumps(config))
    lines = log.strip().splitlines()
    assert lines[0].startswith("step,algo,env,seed,eval_return_mean")
    assert len(lines) == 3
    stats = csaclb.evaluate(checkpoint, "tilt", 2)
    assert math.isfinite(stats["return_mean"])
    print("smoke test passed:", lines[-1])


if __name__ == "__main__":
    main()

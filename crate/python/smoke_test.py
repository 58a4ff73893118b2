"""Smoke test for the covpool extension module.

Build first:
    cargo build --release -p covpool-py --features extension-module
    cp target/release/libcovpool_py.so python/covpool.so
"""

import json
import math
import os
import random
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import covpool


def close(a, b, tol):
    return all(abs(x - y) <= tol for ra, rb in zip(a, b) for x, y in zip(ra, rb))


def main():
    rng = random.Random(0)
    d, n = 5, 9
    x = [[rng.gauss(0, 1) for _ in range(n)] for _ in range(d)]

    p = covpool.covariance(x)
    assert len(p) == d and close(p, [list(r) for r in zip(*p)], 1e-12)

    lam, u = covpool.sym_eig(p)
    assert lam == sorted(lam, reverse=True) and min(lam) > 0

    q = covpool.pool_forward(x, covpool.NormalizationSpec("plain", alpha=1.0))
    assert close(q, p, 1e-9)

    spec = covpool.NormalizationSpec("mpn", alpha=0.5)
    q = covpool.pool_forward(x, spec)
    qq = [[sum(q[i][k] * q[k][j] for k in range(d)) for j in range(d)] for i in range(d)]
    assert close(qq, p, 1e-8), "sqrt(P)^2 != P"
    assert len(covpool.vectorize_upper(q)) == d * (d + 1) // 2

    g = [[rng.gauss(0, 1) for _ in range(d)] for _ in range(d)]
    g = [[0.5 * (g[i][j] + g[j][i]) for j in range(d)] for i in range(d)]
    fused = covpool.pool_backward(x, spec, g, method="fused")
    eigen = covpool.pool_backward(x, spec, g, method="eigen")
    assert close(fused, eigen, 1e-6)

    for v in covpool.variants():
        r = covpool.gradcheck(covpool.NormalizationSpec(v), seed=1)
        assert r["passed"], r

    a = [[2.0, 0.3], [0.3, 1.0]]
    b = [[1.0, -0.2], [-0.2, 3.0]]
    le = covpool.log_euclidean_dist(a, b)
    pe = covpool.pow_euclidean_dist(a, b, 1e-3)
    assert abs(pe - le) / le < 1e-2

    rows = covpool.shrinkage_table([0.5, 1.0, 2.0])
    assert rows[1] == (1.0, 1.0, 0.0, 0.5, 1.0), rows[1]

    cfg = json.loads(covpool.toy_config("mpn", 0.5, 0))
    cfg["train"]["epochs"] = 2
    cfg["data"]["train_per_class"] = 20
    cfg["data"]["test_per_class"] = 5
    hist = covpool.train(json.dumps(cfg))
    assert len(hist) == 2 and all(math.isfinite(h["train_loss"]) for h in hist)

    try:
        covpool.NormalizationSpec("nope")
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")

    print("covpool smoke test ok")


if __name__ == "__main__":
    main()

"""Smoke test for the pylearnpanel extension.

Build and install first:
    pip install --no-build-isolation ./crates/python
then run `python python/smoke_test.py`.
"""
import json
import math
import os
import tempfile

import pylearnpanel as lp


def main():
    truth = lp.ModelParams.mc_design()
    assert truth.horizon == 3 and truth.alternatives == 2
    again = lp.ModelParams.from_json(truth.to_json())
    assert again.to_json() == truth.to_json()

    dgp = lp.Dgp(seed=11)
    panel = dgp.simulate(300)
    assert len(panel) == 300 and panel.horizon == 3
    assert lp.Dgp(seed=11).simulate(300).rows() == panel.rows()

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "panel.csv")
        panel.write_csv(path)
        assert lp.Panel.read_csv(path).rows() == panel.rows()
    assert lp.Panel.from_rows(panel.rows()).rows() == panel.rows()

    grid = lp.build_grid(len(panel))
    log_l = lp.loglik_matrix(panel, grid, truth)
    weights, kkt, certified = lp.solve_weights(log_l)
    assert certified and kkt < 1e-6
    assert abs(sum(weights) - 1.0) < 1e-9
    ll = lp.observed_loglik(panel, grid, weights, truth)
    assert math.isfinite(ll)

    result = lp.fit(panel, json.dumps({"max_iter": 300}), initial=truth)
    print(result)
    assert result.loglik >= ll - 1e-6
    est = dict(result.estimates())
    assert "rho" in est and "sigma_u2" in est
    med = result.xk_quantile(0.5)
    assert min(grid) <= med <= max(grid)
    back = lp.FitResult.from_json(result.to_json())
    assert back.loglik == result.loglik

    vu, vk, total = lp.decompose(dgp, [1, 1, 1])
    assert vu > 0 and vk > 0 and abs(total - vu - vk) < 1e-9
    vu, vk, total = lp.decompose(result, [1, 2, 2], period=2, which="unconditional", draws=20000)
    assert vu >= 0 and vk >= 0

    try:
        lp.decompose(dgp, [0, 1, 1])
    except ValueError:
        pass
    else:
        raise AssertionError("zero-based path accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()

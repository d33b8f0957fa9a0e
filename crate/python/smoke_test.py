"""Smoke test for the blowfly extension module.

Build and install with `maturin develop -m crates/py/Cargo.toml`, or put the
compiled library on the path as `blowfly.so` and set BLOWFLY_PYPATH.
"""
import math
import os
import sys

if os.environ.get("BLOWFLY_PYPATH"):
    sys.path.insert(0, os.environ["BLOWFLY_PYPATH"])

import blowfly


def main():
    mp = blowfly.ModelParams()
    assert mp.regime() == "moderate"
    assert abs(mp.v_plus - 2.0) < 1e-12

    c0, lam0 = blowfly.min_speed(mp.with_delay(0.0))
    assert abs(c0 - 2.0 * math.sqrt(math.e**2 - 1.0)) < 1e-9 * c0
    c, lam = blowfly.min_speed(mp)
    assert 0.0 < c < c0 and lam > 0.0

    r_under, r_bar = blowfly.delay_thresholds(blowfly.ModelParams(p=math.e**3))
    assert abs(r_bar - 2.0 * math.pi / (3.0 * math.sqrt(3.0))) < 1e-12
    assert r_under is not None and r_under < r_bar

    assert abs(blowfly.delayed_exp(1.0, 1.0, 1.5) - 2.625) < 1e-15
    assert blowfly.classify_regime(mp, 1.2 * c) == "oscillatory"

    wp = blowfly.compute_profile(mp, c_factor=1.2)
    assert wp.residual < 1e-8
    assert wp.label() == "oscillatory"
    assert len(wp.xi) == len(wp.phi) == 1201

    res = blowfly.run_stability(mp, c_factor=1.3, window=(10.0, 30.0))
    assert res.rate_passed() and res.fit_model == "mixed"
    assert res.min_gap >= -1e-8
    assert res.sup_u[-1] < res.sup_u[0]

    try:
        blowfly.ModelParams(D=-1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative diffusion accepted")

    print("python smoke test ok")


if __name__ == "__main__":
    main()

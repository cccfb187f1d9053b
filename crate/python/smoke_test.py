"""Smoke test for the rfsel Python module.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`.
"""

import math
import tempfile

import rfsel


def main():
    assert rfsel.mji(["a", "b"], ["a", "b", "c", "d"]) == 0.5
    assert rfsel.circular_error([float(i) for i in range(1, 101)], 90.0) == 90.0
    assert rfsel.large_error_ratio([5.0, 15.0]) == 0.5

    reference, tests = rfsel.synth(seed=3, width=8.0, height=6.0, emitters=15, tests=20)
    assert len(reference) == 192 and len(tests) == 20

    bundle = rfsel.Bundle.precompute(reference, positioner="map", seed=3)
    assert bundle.cell_count == 12

    x, y, fallback = bundle.locate(tests[0][2], m=4, method="map")
    assert math.isfinite(x) and math.isfinite(y)
    assert isinstance(fallback, bool)

    with tempfile.TemporaryDirectory() as d:
        bundle.save(d + "/b")
        again = rfsel.Bundle.load(d + "/b")
        assert again.locate(tests[0][2], m=4, method="map") == (x, y, fallback)

    online = rfsel.evaluate(bundle, tests, method="map", m=4)
    full = rfsel.evaluate(bundle, tests, method="map", full=True)
    print(f"m=4  CE90 {online['ce90']:.2f} m, {online['mean_time_s']:.2e} s/query")
    print(f"full CE90 {full['ce90']:.2f} m, {full['mean_time_s']:.2e} s/query")

    try:
        bundle.locate({"a": 5.0})
    except ValueError as e:
        assert "bad-rss" in str(e)
    else:
        raise AssertionError("positive RSS accepted")
    print("ok")


if __name__ == "__main__":
    main()

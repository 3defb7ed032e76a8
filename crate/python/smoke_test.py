"""Smoke test for the `fpp` extension.

Build it first:  pip install --no-build-isolation -e crates/python
Then run:        python python/smoke_test.py   (or pytest python/)
"""

import math

import fpp


def test_presets_listed():
    assert {"cir-power", "ou-linear"} <= set(fpp.presets())


def test_value_matches_closed_form():
    m = fpp.Model("cir-power")
    assert m.has_closed_form
    assert len(m.config_hash) == 64
    v = m.value(0.5, 1.5, 1.0, 1.0, 1e-3, 1e-3)
    exact = m.exact(0.5, 1.5, 1.0, 1.0, 1e-3, 1e-3)
    assert math.isclose(v["combined"], v["v0"] + math.sqrt(1e-3) * (v["v10"] + v["v01"]))
    assert abs(v["combined"] - exact) < 1e-2 * abs(exact)


def test_portfolio_parts_add_up():
    p = fpp.Model("cir-power").portfolio(0.5, 1.5, 1.0, 1.0, 1e-2, 1e-2)
    for w, a, b, c in zip(p["weights"], p["myopic"], p["slow_hedge"], p["fast_hedge"]):
        assert math.isclose(w, a + b + c, rel_tol=1e-12, abs_tol=1e-15)


def test_converge_table():
    tables = fpp.Model("cir-power").run("converge")
    s = tables["converge_summary"]
    q, v = s["columns"].index("quantity"), s["columns"].index("value")
    slopes = [r[v] for r in s["rows"] if r[q] == "two_term_slope" and r[0] in ("slow", "fast")]
    assert len(slopes) == 2 and all(0.85 <= x <= 1.15 for x in slopes)


def test_errors_are_python_exceptions():
    for bad in (lambda: fpp.Model("no-such-preset"), lambda: fpp.Model("ou-linear").exact(0, 1, 0, 0, 0.1, 0.1)):
        try:
            bad()
        except ValueError:
            continue
        raise AssertionError("expected ValueError")


if __name__ == "__main__":
    for name, f in sorted(globals().items()):
        if name.startswith("test_"):
            f()
            print("ok", name)

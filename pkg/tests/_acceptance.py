"""Result registry for the acceptance suite; printed by the conftest summary hook."""
RESULTS = {}


def check(n, name, ok, detail):
    RESULTS[n] = (name, bool(ok), detail)
    assert ok, f"criterion {n} ({name}) failed: {detail}"

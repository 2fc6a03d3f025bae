import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def default_cfg():
    from ndscc import config

    return config.load()


@pytest.fixture(scope="session")
def scc_ens(default_cfg):
    from ndscc import cli

    return cli.scc_ensemble(default_cfg)


@pytest.fixture(scope="session")
def spin(default_cfg):
    from ndscc import config

    return config.spin_params(default_cfg)


@pytest.fixture(scope="session")
def nd_template(default_cfg):
    from ndscc import cli

    return cli.nanodiamond(default_cfg)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line per criterion; missing records count as failures."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})
    key = request.node.name

    def record(number: int, title: str, checks):
        ok = all(passed for _, passed in checks)
        detail = "; ".join(f"{desc} [{'ok' if passed else 'FAIL'}]" for desc, passed in checks)
        lines[key] = (number, ok, title, detail)
        print(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} -- {detail}")
        assert ok, detail

    yield record
    if key not in lines:
        num = int(key.split("_")[1]) if key.split("_")[1].isdigit() else 0
        lines[key] = (num, False, key, "did not complete")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, ok, title, detail in sorted(lines.values()):
        terminalreporter.write_line(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} -- {detail}")

import os

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "2")

import pytest  # noqa: E402


@pytest.fixture(scope="session")
def imagenet_models():
    """The four backbones with the default head, random backbone weights (no download)."""
    from signxai.models import IMAGENET_ARCHITECTURES, BackboneSpec, HeadSpec, build_model

    return {arch: build_model(BackboneSpec(arch, weights=None), HeadSpec()) for arch in IMAGENET_ARCHITECTURES}


@pytest.fixture
def tiny_model():
    from signxai.models import BackboneSpec, HeadSpec, build_model

    return build_model(BackboneSpec("tiny", weights=None, seed=3), HeadSpec(seed=3))


CRITERIA = {
    1: "parameter counts",
    2: "math oracles",
    3: "metrics oracles",
    4: "desk-scale training",
    5: "attribution axioms",
    6: "pipeline reproducibility",
}
_outcomes: dict[int, list[str]] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark:
            item.user_properties.append(("criterion", mark.args[0]))


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(crit, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for crit, name in CRITERIA.items():
        results = _outcomes.get(crit)
        if not results:
            status = "NOT RUN"
        elif all(r == "passed" for r in results):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {crit} ({name}): {status} [{len(results or [])} checks]")

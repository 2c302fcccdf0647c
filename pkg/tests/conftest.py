from __future__ import annotations

import pytest

from stereo_refine.synth import make_bundle, perturb, scene_preset


@pytest.fixture(scope="session")
def small_scene():
    """48x32 boxes scene with consecutive temporal pairs only."""
    spec = scene_preset("boxes", seed=0, width=48, height=32, frames=3)
    return make_bundle(spec, temporal_pairs=[(0, 1), (1, 2)])


@pytest.fixture(scope="session")
def small_perturbed(small_scene):
    sb = small_scene
    left = perturb(sb.gt_left, noise=0.1, seed=1)
    right = perturb(sb.gt_right, noise=0.1, seed=2)
    return sb.video_bundle(left, right)


@pytest.fixture(scope="session")
def benchmark_scene():
    """The standard 64x48, 5-frame benchmark scene."""
    return make_bundle(scene_preset("boxes", seed=0))


_acceptance: dict[str, tuple[str, str, float]] = {}


def pytest_runtest_logreport(report):
    """Record the outcome of every acceptance test, setup and call phases included."""
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or report.failed or report.skipped:
        title = getattr(report, "acceptance_title", report.nodeid)
        prev = _acceptance.get(report.nodeid)
        if prev is None or prev[1] == "PASS":
            verdict = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
            _acceptance[report.nodeid] = (title, verdict, report.duration)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
    outcome.get_result().acceptance_title = doc


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for title, verdict, duration in sorted(_acceptance.values(), key=lambda t: int(t[0].split(".")[0])):
        terminalreporter.write_line(f"{verdict}  {title} ({duration:.1f} s)")

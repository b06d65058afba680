import csv
import os

import numpy as np
import pytest

from sertk.audio import EMOTIONS, load_manifest, synth_tone, write_wav

# one well-separated tone per emotion
TONES_HZ = (300.0, 800.0, 1800.0, 3500.0)


def write_participant(root, per_class=10, duration_s=1.0, rate=16000, tag="participant", speaker="p1"):
    """Tone clips for each emotion plus a manifest; returns the manifest path."""
    os.makedirs(root, exist_ok=True)
    rows = []
    for c, emotion in enumerate(EMOTIONS):
        for j in range(per_class):
            name = f"{tag}_{emotion}_{j:02d}.wav"
            x = synth_tone(TONES_HZ[c], duration_s, rate, amplitude=0.2 + 0.05 * j, phase=0.3 * j)
            write_wav(os.path.join(root, name), x, rate)
            rows.append([name, emotion, speaker, tag])
    path = os.path.join(root, f"{tag}.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "emotion", "speaker", "dataset"])
        w.writerows(rows)
    return path


@pytest.fixture
def participant(tmp_path):
    path = write_participant(str(tmp_path / "p1"))
    return path, load_manifest(path)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: one test per acceptance criterion")


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    n = int(report.nodeid.split("test_criterion_")[1][:2])
    if report.when == "call" or report.failed:
        _CRITERIA[n] = _CRITERIA.get(n, True) and report.passed
    if report.when == "call":
        _CRITERIA.setdefault(("t", n), report.duration)


def pytest_terminal_summary(terminalreporter):
    done = sorted(k for k in _CRITERIA if isinstance(k, int))
    if not done:
        return
    terminalreporter.section("acceptance criteria")
    for n in done:
        status = "PASS" if _CRITERIA[n] else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status} ({_CRITERIA.get(('t', n), 0.0):.1f}s)")

import os

from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

import pytest

from vidpeaks import pipeline, synth


SMALL = dict(n_videos=40, n_courses=8, n_learners=200, n_coded=400)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 40-video synth corpus with its ingest and signal outputs."""
    out = synth.generate(synth.SynthConfig(**SMALL), str(tmp_path_factory.mktemp("small")))
    ing = pipeline.ingest(out.events, out.videos)
    videos, skipped = pipeline.compute_signals(ing, ks=(5, 10))
    return out, ing, videos


@pytest.fixture(scope="session")
def small_table(small_corpus):
    from vidpeaks import embedstore
    from vidpeaks.experiment import build_moment_table

    out, ing, videos = small_corpus
    manifest = embedstore.open_manifest(out.manifest)
    return build_moment_table(videos, ing.metas, manifest), manifest


VERDICTS = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number, title, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
        VERDICTS.append((number, line))
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(VERDICTS):
            terminalreporter.write_line(line)

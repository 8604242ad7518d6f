import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import pytest  # noqa: E402
import shapely.wkt  # noqa: E402

from tlf.clean import filter_trips  # noqa: E402
from tlf.fuse import fuse  # noqa: E402
from tlf.synth import SynthConfig, generate_city, generate_corpus  # noqa: E402

ACCEPTANCE = {}


def record_acceptance(number, passed, detail=""):
    ACCEPTANCE[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def small_config(**kw):
    base = dict(seed=3, n_routes=4, n_days=14, start_date="2021-11-15")
    base.update(kw)
    return SynthConfig(**base)


@pytest.fixture(scope="session")
def small_city():
    return generate_city(small_config())


@pytest.fixture(scope="session")
def small_corpus(small_city):
    return generate_corpus(small_city)


@pytest.fixture(scope="session")
def small_clean(small_corpus):
    return filter_trips(small_corpus.noisy)


def segments_with_geometry(city):
    segs = city.segments.copy()
    segs["geometry"] = [shapely.wkt.loads(g) for g in segs["geometry"]]
    return segs


@pytest.fixture(scope="session")
def small_fused(small_city, small_clean):
    kept, _, _ = small_clean
    return fuse(kept, small_city.gtfs, small_city.weather, small_city.traffic,
                segments_with_geometry(small_city), small_city.calendar, 30, 15)

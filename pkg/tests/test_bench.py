import numpy as np
import pytest

from darap import kernels, shapes
from darap.bench import StageTiming, bench_backends, bench_solves


@pytest.fixture(scope="module")
def report():
    return bench_solves(shapes.torus(24, 24), repeats=4, mesh_id="torus24")


def test_report_fields(report):
    assert (report.mesh_id, report.n_vertices, report.n_faces, report.repeats) == ("torus24", 576, 1152, 4)
    assert set(report.stages) == {"local_step", "darap_global", "njf_poisson"}
    assert report.precomputation_excluded
    assert report.n_faces / report.n_vertices == pytest.approx(2.0)
    for t in report.stages.values():
        assert len(t.samples) == 4
        assert 0 < t.min <= t.mean
        assert np.isfinite(report.checksum)


def test_csv(report):
    lines = report.to_csv().splitlines()
    assert lines[0] == "mesh,V,F,stage,mean_s,min_s,std_s,repeats"
    assert len(lines) == 4
    assert lines[1].startswith("torus24,576,1152,local_step,")
    assert report.to_csv(header=False).splitlines() == lines[1:]
    assert "F/V=2.000" in report.summary()


def test_repeats_minimum():
    with pytest.raises(ValueError):
        bench_solves(shapes.icosphere(1), repeats=2)
    with pytest.raises(ValueError):
        bench_backends(shapes.icosphere(1), repeats=1)


def test_stage_timing_summary():
    t = StageTiming.from_samples([1.0, 2.0, 3.0, 4.0, 100.0, 5.0])
    assert t.mean == pytest.approx(115 / 6) and t.min == 1.0
    # medians of chunk means shrug off the single outlier
    assert t.median_of_means == pytest.approx(3.5)


def test_backend_report():
    r = bench_backends(shapes.icosphere(2), repeats=3)
    names = kernels.available()
    assert set(r.stages) == {f"{s}[{n}]" for s in ("local_step", "assemble_rhs", "forward", "backward") for n in names}


def test_ordering_across_sizes():
    # tori with roughly 5k, 10k and 20k faces
    for n in (50, 72, 102):
        r = bench_solves(shapes.torus(n, n), repeats=10)
        assert r.stages["darap_global"].mean < r.stages["njf_poisson"].mean, r.summary()

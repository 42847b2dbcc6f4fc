import numpy as np

from conftest import FIXTURES
from qlower.fixtures import labelled_inputs, lenet_tiny, main, random_graph
from qlower.graph import validate


def test_shipped_fixtures_regenerate_bitwise(tmp_path):
    main([str(tmp_path)])
    shipped = sorted(p.relative_to(FIXTURES) for p in FIXTURES.rglob("*") if p.is_file())
    fresh = sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*") if p.is_file())
    assert shipped == fresh
    for rel in shipped:
        assert (FIXTURES / rel).read_bytes() == (tmp_path / rel).read_bytes(), rel


def test_lenet_tiny_is_canonical_and_deterministic():
    assert validate(lenet_tiny(0)) == []
    assert lenet_tiny(3) == lenet_tiny(3)


def test_labelled_inputs_cover_every_class():
    xs, labels = labelled_inputs(200, 1)
    assert len(xs) == 200 and set(labels) == set(range(10))
    assert np.all([(x >= 0).all() and (x < 1).all() for x in xs])


def test_random_graphs_are_canonical():
    for seed in range(20):
        assert validate(random_graph(seed).graph) == []

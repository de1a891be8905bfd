import numpy as np
import pytest

from rescnds import data as D
from rescnds.graph import ArchConfig, build_cnds, infer_shapes, init_params, insert_residual_connections


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    """The bundled synthetic 3-class corpus: 600 train / 300 test, 40x40 stored."""
    return D.make_synthetic_dataset(tmp_path_factory.mktemp("toy"), 600, 300, 40, seed=0)


@pytest.fixture(scope="session")
def toy_arrays(toy_root):
    train_m = D.load_manifest(toy_root / "train.json")
    test_m = D.load_manifest(toy_root / "test.json")
    return D.load_split(train_m), D.load_split(test_m)


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    return D.make_synthetic_dataset(tmp_path_factory.mktemp("small"), 48, 24, 36, seed=1)


@pytest.fixture(scope="session")
def small_arrays(small_root):
    train_m = D.load_manifest(small_root / "train.json")
    test_m = D.load_manifest(small_root / "test.json")
    return D.load_split(train_m), D.load_split(test_m)


def desk_arch(residual=True, aux=True, size=32, width=1 / 8, classes=3, **kw):
    cfg = ArchConfig(input_shape=(3, size, size), num_classes=classes, width_factor=width,
                     aux_attach="conv3_2" if aux else None, **kw)
    g = build_cnds(cfg)
    if residual:
        g = insert_residual_connections(g)
    infer_shapes(g)
    return g


@pytest.fixture
def desk_graph():
    g = desk_arch()
    init_params(g, 0.1, seed=3)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

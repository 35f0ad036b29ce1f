import pytest

from planereg import dataset as D


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Three stereo frames of the flat road at 40x30, zoomed so road patches exist."""
    root = tmp_path_factory.mktemp("tiny")
    spec = D.generate_scene("flat-road", seed=0)
    cams = D.generate_trajectory(3, seed=0, image_size=(40, 30), focal=50.0, scene=spec)
    D.write_dataset(spec, cams, root, dropout=0.0, seed=0)
    return D.load_dataset(root)

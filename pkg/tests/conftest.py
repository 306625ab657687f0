import pytest

from cxrnet import data


@pytest.fixture(scope="session")
def tiny_corpus_root(tmp_path_factory):
    """Nine 32-px images per class; shared by everything that just needs a
    readable corpus on disk."""
    root = tmp_path_factory.mktemp("corpus")
    return data.generate_synthetic(root / "images", num_per_class=9,
                                   image_size=32, seed=0)

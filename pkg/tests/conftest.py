import pytest

import desk as desk_mod


@pytest.fixture(scope="session")
def corpus():
    """Phantom corpus (200 train / 8 val / 10 test), preprocessed."""
    return desk_mod.build_corpus()


@pytest.fixture(scope="session")
def desk(corpus):
    """Trained desk-scale model with history and characteristics."""
    return desk_mod.train_desk_model(corpus)

import numpy as np
import pytest

from filterpot import dataset as ds
from filterpot import toycnn
from filterpot.evaluate import collect_misclassified
from filterpot.profiles import SaliencyMatrix
from filterpot.ranking import fit_tail_model

TRAIN_SEED = 7
DATA_SEED = 0
EPOCHS = 8


@pytest.fixture(scope="session")
def trained_state():
    train_ds = ds.make_dataset(DATA_SEED, "train")
    return toycnn.train(train_ds, epochs=EPOCHS, seed=TRAIN_SEED)


@pytest.fixture(scope="session")
def shifted_dataset():
    return ds.make_dataset(DATA_SEED, "shifted")


@pytest.fixture(scope="session")
def shifted_misclassified(trained_state, shifted_dataset):
    return collect_misclassified(trained_state, shifted_dataset)


@pytest.fixture(scope="session")
def shifted_matrix(trained_state, shifted_dataset):
    rows = [
        toycnn.filter_saliency_profile(
            trained_state, shifted_dataset.images[i], int(shifted_dataset.labels[i])
        )
        for i in range(len(shifted_dataset))
    ]
    return SaliencyMatrix(np.stack(rows), toycnn.filter_metas())


@pytest.fixture(scope="session")
def shifted_model(shifted_matrix):
    return fit_tail_model(shifted_matrix, 0.90)

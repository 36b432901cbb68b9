import logging

import pytest
import torch


@pytest.fixture(autouse=True)
def float64_default():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture(autouse=True)
def propagating_loggers():
    # dictConfig in the cli tests detaches these from root, caplog needs them attached
    for name in ("sparsekit", "sparsekit_train"):
        logging.getLogger(name).propagate = True
    yield

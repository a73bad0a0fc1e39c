import time

import pytest

from toys import train_dirac_net, train_fidelity_net, train_scene_net


@pytest.fixture(scope="session")
def fidelity_run():
    """(net, TrainResult, training seconds) for the two-context fidelity toy."""
    start = time.perf_counter()
    net, result = train_fidelity_net()
    return net, result, time.perf_counter() - start


@pytest.fixture(scope="session")
def fidelity_net(fidelity_run):
    return fidelity_run[0]


@pytest.fixture(scope="session")
def scene_net():
    return train_scene_net()


@pytest.fixture(scope="session")
def dirac_net():
    return train_dirac_net()

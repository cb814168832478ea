import pytest

from incongrufl.fedsim import DataSpec, FederationPlan

TINY_DATA = DataSpec(n_samples=160, K=2, d_v=3, vocab=40, N_max=12, noise=0.4, filler_max=2)


def tiny(**kw) -> FederationPlan:
    """A federation small enough to run in well under a second per round."""
    base = dict(data=TINY_DATA, n_clients=3, gamma=1.0, n_multimodal=1, width=8, layers=1,
                heads=2, rounds=2, batch_size=16)
    base.update(kw)
    return FederationPlan(**base)


@pytest.fixture
def tiny_plan():
    return tiny()

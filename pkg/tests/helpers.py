import numpy as np

from msmcp.design import Dataset, polynomial_design
from msmcp.study import StudyConfig, generate_replication

ARMS = np.arange(1, 7, dtype=float)


def sim(n, seed=0, b=0.5, rep=0):
    """One replication of the simulation design plus its order-2 candidate and true beta."""
    config = StudyConfig(N=(n,), b=(b,), replications=1, master_seed=seed)
    data, truth = generate_replication(config, rep, n, b)
    return data, polynomial_design(2, ARMS), truth


def random_dataset(rng, n, n_arms, m=1, s=1):
    t = np.eye(n_arms)[rng.integers(0, n_arms, n)]
    t[:n_arms] = np.eye(n_arms)  # every arm observed
    return Dataset(t, rng.normal(size=(n, s)), rng.normal(size=(n, m)))

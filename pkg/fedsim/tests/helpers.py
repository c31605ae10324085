import numpy

from .. import datasets, networks


# Small MLP over 8 features and 3 classes
def tiny_arch(hidden=(6, ), features=8, classes=3):
    return networks.Architecture.mlp((features, ), classes, hidden)


def tiny_conv_arch():
    return networks.Architecture("conv-small", (1, 6, 6), 3, [
        {"name": "conv1", "type": "conv", "filters": 2, "kernel": 3, "padding": 1, "relu": True, "pool": True},
        {"name": "fc1", "type": "dense", "units": 3, "relu": False},
    ])


def blobs(n_per_class=20, dim=8, classes=3, seed=0, spread=0.05):
    return datasets.synthetic_blobs(classes, n_per_class, dim, seed, spread)


def random_batch(shape, count, classes, seed=0):
    rng = numpy.random.default_rng(seed)
    return rng.uniform(0, 1, size=(count, ) + tuple(shape)).astype(numpy.float32), rng.integers(0, classes, size=count)


# Smallest useful experiment document: blob data, MLP, a handful of clients
def blob_config(**changes):
    document = {
        "name": "blob-test",
        "seed": 3,
        "arch": {"kind": "mlp", "input_shape": [8], "classes": 3, "hidden": [8]},
        "dataset": {"kind": "blobs", "blobs": {"n_per_class": 20, "test_per_class": 6, "spread": 0.05}},
        "n_clients": 5,
        "local_steps": 2,
        "batch_size": 8,
        "optimizer": {"kind": "adam", "lr": 0.01},
        "mix_schedule": [[0, 0.5]],
        "pgd_train": {"epsilon": 0.1, "step_size": 0.05, "steps": 2},
        "pgd_eval": {"epsilon": 0.1, "step_size": 0.05, "steps": 3},
        "aggregation": {"rule": "fedavg", "f": 0},
        "total_rounds": 4,
        "eval_every": 2,
        "workers": 1,
    }
    for key, value in changes.items():
        document[key] = value
    return document

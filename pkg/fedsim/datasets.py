# Standard imports
import gzip
import os
import struct

# Third-party imports
import numpy
from sklearn.datasets import make_blobs

# Local imports
from . import utils
from .exceptions import DatasetError, DatasetMissing

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Standard MNIST / Fashion-MNIST file names per split
IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

CIFAR10_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


# Images scaled to [0, 1] with integer labels; immutable once loaded
class Dataset:
    def __init__(self, images, labels, class_count):
        images = numpy.asarray(images, dtype=numpy.float32)
        labels = numpy.asarray(labels, dtype=numpy.int64)
        if len(images) != len(labels):
            raise DatasetError(f"{len(images)} images but {len(labels)} labels")
        if images.size and (images.min() < 0 or images.max() > 1):
            raise DatasetError("Pixel values must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= class_count):
            raise DatasetError(f"Labels must lie in [0, {class_count})")
        images.setflags(write=False)
        labels.setflags(write=False)
        self.images = images
        self.labels = labels
        self.class_count = int(class_count)

    def __len__(self):
        return len(self.labels)

    def __repr__(self):
        return f"Dataset(n={len(self)}, shape={list(self.images.shape[1:])}, classes={self.class_count})"

    @property
    def sample_shape(self):
        return tuple(self.images.shape[1:])

    def take(self, indices):
        indices = numpy.asarray(indices, dtype=numpy.int64)
        return Dataset(self.images[indices], self.labels[indices], self.class_count)

    def label_histogram(self, indices=None):
        labels = self.labels if indices is None else self.labels[numpy.asarray(indices, dtype=numpy.int64)]
        return numpy.bincount(labels, minlength=self.class_count)


# Open a raw or gzip-compressed file
def _read_bytes(path):
    if not os.path.isfile(path):
        raise DatasetMissing(f"Dataset file not found: {path}")
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


# Parse one IDX file, returning the array of unsigned bytes
def _parse_idx(path, expected_magic, expected_dims):
    data = _read_bytes(path)
    if len(data) < 4:
        raise DatasetError(f"{path}: truncated IDX header")
    magic, = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise DatasetError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    header_size = 4 + 4 * expected_dims
    if len(data) < header_size:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{expected_dims}I", data[4:header_size])
    count = int(numpy.prod(dims))
    if len(data) - header_size < count:
        raise DatasetError(f"{path}: truncated file, expected {count} data bytes but found {len(data) - header_size}")
    return numpy.frombuffer(data, dtype=numpy.uint8, count=count, offset=header_size).reshape(dims)


def load_idx(images_path, labels_path, class_count=10):
    """ Load a big-endian IDX image/label file pair (MNIST distribution format)

    Parameters
    ----------
    images_path : str
        IDX3 image file (magic 0x00000803), optionally gzip-compressed
    labels_path : str
        IDX1 label file (magic 0x00000801), optionally gzip-compressed

    Returns
    -------
    Dataset
        Images [n, 1, rows, cols] divided by 255, and labels [n]
    """

    images = _parse_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(f"Count mismatch: {images.shape[0]} images in {images_path} but {labels.shape[0]} labels in {labels_path}")
    utils.log(f"Loaded {images.shape[0]} samples from {images_path}")
    return Dataset(images[:, None, :, :].astype(numpy.float32) / 255.0, labels, class_count)


# Find a standard file name in a directory, with or without .gz
def _find_file(directory, name):
    for candidate in (name, name + ".gz", name.replace("-idx", ".idx")):
        path = os.path.join(directory, candidate)
        if os.path.isfile(path):
            return path
    raise DatasetMissing(f"Dataset file {name} not found in {directory}")


# MNIST or Fashion-MNIST from a directory holding the four standard files
def load_mnist_dir(directory, split="train"):
    if not os.path.isdir(directory):
        raise DatasetMissing(f"Dataset directory not found: {directory}")
    images_name, labels_name = IDX_FILES[split]
    return load_idx(_find_file(directory, images_name), _find_file(directory, labels_name))


# CIFAR10 binary batches: each record is one label byte then 3072 pixel bytes (CHW)
def load_cifar10_dir(directory, split="train"):
    if not os.path.isdir(directory):
        raise DatasetMissing(f"Dataset directory not found: {directory}")
    images, labels = [], []
    for name in CIFAR10_FILES[split]:
        data = _read_bytes(_find_file(directory, name))
        if len(data) % 3073:
            raise DatasetError(f"{name}: size {len(data)} is not a whole number of 3073-byte records")
        records = numpy.frombuffer(data, dtype=numpy.uint8).reshape(-1, 3073)
        labels.append(records[:, 0])
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    return Dataset(numpy.concatenate(images).astype(numpy.float32) / 255.0, numpy.concatenate(labels), 10)


def synthetic_blobs(n_classes, n_per_class, dim, seed, spread=0.05, image_shape=None, sample_seed=None):
    """ Gaussian blobs around random centroids in [0.2, 0.8]^dim, clipped to [0, 1]

    Parameters
    ----------
    n_classes : int
        Number of classes (one blob each)
    n_per_class : int
        Samples per class
    dim : int
        Feature dimension
    seed : int
        Controls both centroids and samples
    spread : float
        Standard deviation of each blob (0 puts every sample on its centroid)
    image_shape : tuple or None
        Optional sample shape (product must equal dim), e.g. (1, 28, 28)
    sample_seed : int or None
        Seed for the samples only (centroids still come from seed); defaults to seed

    Returns
    -------
    Dataset
    """

    if n_classes < 1 or n_per_class < 1 or dim < 1:
        raise ValueError("synthetic_blobs needs positive n_classes, n_per_class and dim")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = numpy.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(n_classes, dim))
    features, labels = make_blobs(n_samples=[n_per_class] * n_classes, n_features=dim, centers=centers, cluster_std=spread, shuffle=True, random_state=seed if sample_seed is None else sample_seed)
    features = numpy.clip(features, 0.0, 1.0)
    if image_shape is not None:
        features = features.reshape((-1, ) + tuple(image_shape))
    return Dataset(features, labels, n_classes)


# First k samples after a seeded shuffle (desk-scale subsetting)
def subset(dataset, k, seed):
    if k is None or k >= len(dataset):
        return dataset
    order = numpy.random.default_rng(seed).permutation(len(dataset))
    return dataset.take(numpy.sort(order[:k]))


# client_id -> sample indices; disjoint shards covering the split exactly
class Partition:
    def __init__(self, shards, total):
        self.shards = {int(client_id): numpy.asarray(indices, dtype=numpy.int64) for client_id, indices in shards.items()}
        self.total = total
        self.validate()

    def __len__(self):
        return len(self.shards)

    def __getitem__(self, client_id):
        return self.shards[client_id]

    def client_ids(self):
        return sorted(self.shards)

    def sizes(self):
        return {client_id: len(self.shards[client_id]) for client_id in self.client_ids()}

    def label_histograms(self, dataset):
        return {client_id: dataset.label_histogram(self.shards[client_id]) for client_id in self.client_ids()}

    def validate(self):
        combined = numpy.concatenate(list(self.shards.values())) if self.shards else numpy.zeros(0, dtype=numpy.int64)
        if len(combined) != self.total or len(numpy.unique(combined)) != self.total:
            raise DatasetError("Partition shards must be disjoint and cover every sample exactly once")


def partition_iid(dataset, n_clients, seed):
    """ Seeded shuffle split into n_clients shards whose sizes differ by at most one """

    n = len(dataset)
    if n_clients <= 0:
        raise ValueError(f"n_clients must be positive, got {n_clients}")
    if n_clients > n:
        raise ValueError(f"Cannot split {n} samples between {n_clients} clients")
    order = numpy.random.default_rng(seed).permutation(n)
    return Partition({client_id: numpy.sort(shard) for client_id, shard in enumerate(numpy.array_split(order, n_clients))}, n)


def partition_label_skew(dataset, n_clients, alpha, seed, max_retries=100):
    """ Label-skewed split: each class is spread over clients by a Dirichlet(alpha) draw

    Draws are repeated until every client holds at least one sample.
    """

    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if n_clients <= 0:
        raise ValueError(f"n_clients must be positive, got {n_clients}")
    if n_clients > len(dataset):
        raise ValueError(f"Cannot split {len(dataset)} samples between {n_clients} clients")
    rng = numpy.random.default_rng(seed)
    for attempt in range(max_retries):
        shards = {client_id: [] for client_id in range(n_clients)}
        for label in range(dataset.class_count):
            indices = numpy.flatnonzero(dataset.labels == label)
            if len(indices) == 0:
                continue
            rng.shuffle(indices)
            proportions = rng.dirichlet(numpy.full(n_clients, alpha))
            cuts = (numpy.cumsum(proportions)[:-1] * len(indices)).astype(numpy.int64)
            for client_id, part in enumerate(numpy.split(indices, cuts)):
                shards[client_id].append(part)
        shards = {client_id: numpy.sort(numpy.concatenate(parts)) for client_id, parts in shards.items()}
        if all(len(shard) > 0 for shard in shards.values()):
            utils.log(f"Label-skew partition (alpha={alpha}) found after {attempt + 1} draw(s)", 10)
            return Partition(shards, len(dataset))
    raise DatasetError(f"Could not give every one of {n_clients} clients a sample after {max_retries} Dirichlet draws (alpha={alpha})")


# Load train and test splits for the "dataset" config section
def load_dataset(spec, data_root, seed):
    kind = spec["kind"]
    if kind == "blobs":
        blobs = spec.get("blobs") or {}
        classes = blobs.get("classes", 10)
        dim = blobs.get("dim", 784)
        shape = blobs.get("image_shape")
        per_class = blobs.get("n_per_class", 100)
        train = synthetic_blobs(classes, per_class, dim, seed, blobs.get("spread", 0.05), shape)
        # Same centroids, independent samples
        test = synthetic_blobs(classes, blobs.get("test_per_class", 20), dim, seed, blobs.get("spread", 0.05), shape, sample_seed=seed + 1)
    else:
        directory = spec.get("root") or os.path.join(data_root, kind)
        loader = load_cifar10_dir if kind == "cifar10" else load_mnist_dir
        train, test = loader(directory, "train"), loader(directory, "test")
    train = subset(train, spec.get("train_subset"), seed)
    test = subset(test, spec.get("test_subset"), seed + 1)
    return train, test

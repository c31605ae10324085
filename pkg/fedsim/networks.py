# Standard imports
import struct

# Third-party imports
import numpy

# Local imports
from . import autodiff, utils
from .exceptions import CheckpointError, ShapeError

ARCH_KINDS = ("conv-small", "mlp")


# Network description: kind, input shape, class count and ordered layer specs
class Architecture:
    """ Layer specs are dicts:

    {"name": "conv1", "type": "conv", "filters": 16, "kernel": 5, "padding": 2, "relu": True, "pool": True}
    {"name": "fc1", "type": "dense", "units": 128, "relu": True}

    Dense layers flatten their input; the last layer must be dense with
    `class_count` units and no activation.
    """

    def __init__(self, kind, input_shape, class_count, layers):
        if kind not in ARCH_KINDS:
            raise ValueError(f"Unsupported architecture kind '{kind}' (expected one of {', '.join(ARCH_KINDS)})")
        self.kind = kind
        self.input_shape = tuple(int(d) for d in input_shape)
        self.class_count = int(class_count)
        self.layers = [dict(layer) for layer in layers]
        self.param_shapes = self._infer_param_shapes()

    def __repr__(self):
        return f"Architecture({self.kind}, input={list(self.input_shape)}, classes={self.class_count}, params={self.param_count})"

    def __eq__(self, other):
        return isinstance(other, Architecture) and self.describe() == other.describe()

    # Default MNIST network: two 5x5 conv blocks then two dense layers
    @classmethod
    def conv_small(cls, input_shape=(1, 28, 28), class_count=10, filters=(16, 32), hidden=128):
        layers = [{"name": f"conv{i + 1}", "type": "conv", "filters": f, "kernel": 5, "padding": 2, "relu": True, "pool": True} for i, f in enumerate(filters)]
        layers.append({"name": "fc1", "type": "dense", "units": hidden, "relu": True})
        layers.append({"name": "fc2", "type": "dense", "units": class_count, "relu": False})
        return cls("conv-small", input_shape, class_count, layers)

    @classmethod
    def mlp(cls, input_shape=(784, ), class_count=10, hidden=(128, )):
        layers = [{"name": f"fc{i + 1}", "type": "dense", "units": units, "relu": True} for i, units in enumerate(hidden)]
        layers.append({"name": f"fc{len(hidden) + 1}", "type": "dense", "units": class_count, "relu": False})
        return cls("mlp", input_shape, class_count, layers)

    # Build from the "arch" section of an experiment config
    @classmethod
    def from_config(cls, data):
        kind = data.get("kind", "conv-small")
        input_shape = data.get("input_shape") or ((1, 28, 28) if kind == "conv-small" else (784, ))
        classes = data.get("classes", 10)
        if kind == "conv-small":
            return cls.conv_small(input_shape, classes, tuple(data.get("filters") or (16, 32)), (data.get("hidden") or [128])[0])
        elif kind == "mlp":
            return cls.mlp(input_shape, classes, tuple(data.get("hidden") if data.get("hidden") is not None else (128, )))
        raise ValueError(f"Unsupported architecture kind '{kind}'")

    def describe(self):
        return {"kind": self.kind, "input_shape": list(self.input_shape), "classes": self.class_count, "layers": self.layers}

    # Walk the layer specs, checking shapes and listing parameter tensors in order
    def _infer_param_shapes(self):
        shapes = []
        shape = self.input_shape
        names = set()
        if not self.layers:
            raise ValueError("Architecture needs at least one layer")
        for layer in self.layers:
            name = layer.get("name")
            if not name or name in names:
                raise ValueError(f"Layer names must be unique and non-empty (got '{name}')")
            names.add(name)
            if layer["type"] == "conv":
                if len(shape) != 3:
                    raise ValueError(f"Layer {name}: conv needs a [channels, height, width] input, got {list(shape)}")
                kernel, padding = layer["kernel"], layer.get("padding", 0)
                height, width = shape[1] + 2 * padding - kernel + 1, shape[2] + 2 * padding - kernel + 1
                if height < 1 or width < 1:
                    raise ValueError(f"Layer {name}: kernel {kernel} too large for input {list(shape)}")
                shapes.append((f"{name}.weight", (layer["filters"], shape[0], kernel, kernel)))
                shapes.append((f"{name}.bias", (layer["filters"], )))
                if layer.get("pool"):
                    height, width = height // 2, width // 2
                    if height < 1 or width < 1:
                        raise ValueError(f"Layer {name}: input too small to pool")
                shape = (layer["filters"], height, width)
            elif layer["type"] == "dense":
                fan_in = int(numpy.prod(shape))
                shapes.append((f"{name}.weight", (fan_in, layer["units"])))
                shapes.append((f"{name}.bias", (layer["units"], )))
                shape = (layer["units"], )
            else:
                raise ValueError(f"Layer {name}: unsupported layer type '{layer['type']}'")
        if self.layers[-1]["type"] != "dense" or shape != (self.class_count, ):
            raise ValueError(f"Final layer must be dense with {self.class_count} units")
        return shapes

    @property
    def param_count(self):
        return sum(int(numpy.prod(shape)) for _name, shape in self.param_shapes)

    def layer_names(self):
        return [layer["name"] for layer in self.layers]

    # Parameter count per layer (weights plus biases)
    def layer_sizes(self):
        sizes = {name: 0 for name in self.layer_names()}
        for name, shape in self.param_shapes:
            sizes[name.rsplit(".", 1)[0]] += int(numpy.prod(shape))
        return sizes

    # Offsets of each layer's contiguous range in the flat vector
    def layer_offsets(self):
        offsets, start = {}, 0
        for name, size in self.layer_sizes().items():
            offsets[name] = (start, start + size)
            start += size
        return offsets

    def layer_slice(self, layer_name):
        offsets = self.layer_offsets()
        if layer_name not in offsets:
            raise KeyError(f"Unknown layer '{layer_name}' (layers: {', '.join(offsets)})")
        return slice(*offsets[layer_name])


# Layer with the fewest parameters (biases included); earliest layer wins ties
def smallest_layer(arch):
    sizes = arch.layer_sizes()
    return min(sizes, key=lambda name: (sizes[name], arch.layer_names().index(name)))


# Ordered named parameter tensors of one model, with a flat-vector view
class ModelParams:
    def __init__(self, arch, tensors):
        self.arch = arch
        self.tensors = [(name, numpy.asarray(array, dtype=numpy.float32)) for name, array in tensors]
        expected = [(name, tuple(shape)) for name, shape in arch.param_shapes]
        actual = [(name, array.shape) for name, array in self.tensors]
        if expected != actual:
            raise ShapeError("model_params", f"tensors {actual} do not match architecture {expected}")
        self.param_count = arch.param_count

    def __eq__(self, other):
        return isinstance(other, ModelParams) and self.arch == other.arch and numpy.array_equal(self.flatten(), other.flatten())

    def __getitem__(self, name):
        for tensor_name, array in self.tensors:
            if tensor_name == name:
                return array
        raise KeyError(name)

    def names(self):
        return [name for name, _array in self.tensors]

    def copy(self):
        return ModelParams(self.arch, [(name, array.copy()) for name, array in self.tensors])

    def flatten(self):
        return numpy.concatenate([array.ravel() for _name, array in self.tensors]).astype(numpy.float32, copy=False)

    @classmethod
    def unflatten(cls, vector, arch):
        vector = numpy.asarray(vector, dtype=numpy.float32)
        if vector.ndim != 1 or vector.shape[0] != arch.param_count:
            raise ShapeError("unflatten", f"vector of length {vector.size} does not match parameter count {arch.param_count}")
        tensors, start = [], 0
        for name, shape in arch.param_shapes:
            size = int(numpy.prod(shape))
            tensors.append((name, vector[start:start + size].reshape(shape).copy()))
            start += size
        return cls(arch, tensors)

    def layer_slice(self, layer_name):
        return self.arch.layer_slice(layer_name)


def flatten(params):
    return params.flatten()


def unflatten(vector, arch):
    return ModelParams.unflatten(vector, arch)


# Deterministic fan-in scaled uniform initialisation
def build_model(arch, seed):
    rng = numpy.random.default_rng(seed)
    tensors = []
    fan_in = None
    for name, shape in arch.param_shapes:
        if name.endswith(".weight"):
            fan_in = int(numpy.prod(shape[1:])) if len(shape) == 4 else shape[0]
        bound = 1.0 / numpy.sqrt(fan_in)
        tensors.append((name, rng.uniform(-bound, bound, size=shape).astype(numpy.float32)))
    return ModelParams(arch, tensors)


def _check_batch(arch, batch):
    if tuple(batch.shape[1:]) != arch.input_shape:
        raise ShapeError("predict", f"batch of shape {list(batch.shape)} does not match input shape {list(arch.input_shape)}")


def forward(params, x, trainable=None):
    """ Run the network, building a graph for the chosen trainable layers

    Parameters
    ----------
    params : ModelParams
        The model weights
    x : Tensor or numpy.ndarray
        Input batch [batch, *input_shape]
    trainable : iterable of str or None
        Layer names whose parameters should receive gradients;
        None means no parameter gradients (e.g. for input-gradient queries)

    Returns
    -------
    Tensor, dict
        Raw logits, and the parameter tensors keyed by name
    """

    arch = params.arch
    x = autodiff.as_tensor(x)
    _check_batch(arch, x)
    trainable = set(trainable or ())
    weights = {}
    for name, array in params.tensors:
        weights[name] = autodiff.Tensor(array, requires_grad=name.rsplit(".", 1)[0] in trainable)

    h = x
    for layer in arch.layers:
        name = layer["name"]
        if layer["type"] == "conv":
            h = autodiff.conv2d(h, weights[f"{name}.weight"], padding=layer.get("padding", 0))
            h = autodiff.bias_add(h, weights[f"{name}.bias"])
            if layer.get("relu"):
                h = autodiff.relu(h)
            if layer.get("pool"):
                h = autodiff.max_pool2d(h)
        else:
            if len(h.shape) != 2:
                h = h.flatten()
            h = h @ weights[f"{name}.weight"]
            h = autodiff.bias_add(h, weights[f"{name}.bias"])
            if layer.get("relu"):
                h = autodiff.relu(h)
    return h, weights


def loss_and_gradient(params, x, target, temperature=1.0, trainable=None):
    """ Mean cross-entropy on a batch and its gradient as a flat vector

    Parameters
    ----------
    target : numpy.ndarray
        Integer labels [batch] or soft label rows [batch, classes]
    trainable : iterable of str or None
        Layers to differentiate; None means every layer. Frozen layers get zero gradient.

    Returns
    -------
    float, numpy.ndarray
        The loss value and the gradient laid out like params.flatten()
    """

    trainable = params.arch.layer_names() if trainable is None else list(trainable)
    logits, weights = forward(params, x, trainable=trainable)
    loss = autodiff.cross_entropy(logits, target, temperature=temperature)
    loss.backward()
    grads = []
    for name, array in params.tensors:
        grad = weights[name].grad
        grads.append((grad if grad is not None else numpy.zeros_like(array)).ravel())
    return loss.item(), numpy.concatenate(grads).astype(numpy.float32)


# Raw logits [batch, classes]; temperature only enters through softmax/loss
def predict(params, batch):
    logits, _weights = forward(params, batch)
    return logits


def predict_proba(params, batch, temperature=1.0):
    return autodiff.softmax_array(predict(params, batch).data, temperature)


# Argmax predictions in chunks (no graph)
def predict_labels(params, images, batch_size=512):
    return numpy.concatenate([predict(params, images[i:i + batch_size]).data.argmax(axis=1) for i in range(0, len(images), batch_size)])


def accuracy(params, images, labels, batch_size=512):
    if len(images) == 0:
        return 0.0
    return float((predict_labels(params, images, batch_size) == labels).mean())


# Binary checkpoint: header then little-endian float32 vector
CHECKPOINT_MAGIC = b"FATC"
CHECKPOINT_VERSION = 1
CHECKPOINT_HEADER = struct.Struct("<4sI16sQq")


def save_checkpoint(path, params, round_index):
    kind = params.arch.kind.encode("ascii")
    header = CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, kind, params.param_count, round_index)
    with open(path, "wb") as f:
        f.write(header)
        f.write(params.flatten().astype("<f4").tobytes())
    utils.log(f"Saved checkpoint {path} (round {round_index}, {params.param_count} parameters)")


def read_checkpoint_header(path):
    with open(path, "rb") as f:
        raw = f.read(CHECKPOINT_HEADER.size)
    if len(raw) < CHECKPOINT_HEADER.size:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    magic, version, kind, count, round_index = CHECKPOINT_HEADER.unpack(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    return {"kind": kind.rstrip(b"\0").decode("ascii"), "param_count": count, "round": round_index}


def load_checkpoint(path, arch):
    """ Load a checkpoint written by save_checkpoint

    Returns
    -------
    ModelParams, int
        The parameters and the round index stored in the header
    """

    header = read_checkpoint_header(path)
    if header["kind"] != arch.kind or header["param_count"] != arch.param_count:
        raise CheckpointError(f"{path}: checkpoint is {header['kind']} with {header['param_count']} parameters, "
                              f"but the architecture is {arch.kind} with {arch.param_count}")
    with open(path, "rb") as f:
        f.seek(CHECKPOINT_HEADER.size)
        data = f.read()
    if len(data) != 4 * arch.param_count:
        raise CheckpointError(f"{path}: expected {4 * arch.param_count} bytes of weights, found {len(data)}")
    vector = numpy.frombuffer(data, dtype="<f4").astype(numpy.float32)
    return ModelParams.unflatten(vector, arch), header["round"]

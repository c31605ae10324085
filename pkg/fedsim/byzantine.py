# Third-party imports
import numpy

# Local imports
from . import autodiff, networks, optim, utils
from .aggregation import ClientUpdate
from .exceptions import AttackError, ShapeError

ATTACK_KINDS = ("none", "convergence", "distillation")


# Colluders submit mu + k * sigma of their own honest updates
class ConvergenceAttackConfig:
    def __init__(self, k, colluder_ids):
        self.k = float(k)
        self.colluder_ids = sorted(int(client_id) for client_id in colluder_ids)

    def __repr__(self):
        return f"ConvergenceAttack(k={self.k}, colluders={self.colluder_ids})"


# Krum-targeting distillation at a high softmax temperature, trained on one layer only
class DistillationAttackConfig:
    def __init__(self, colluder_ids, temperature=100.0, target_layer=None, teacher_epochs=2, student_epochs=2, lr=None, batch_size=64):
        if temperature <= 0:
            raise ValueError(f"Distillation temperature must be positive, got {temperature}")
        if teacher_epochs < 0 or student_epochs < 0:
            raise ValueError("Epoch counts must be non-negative")
        self.colluder_ids = sorted(int(client_id) for client_id in colluder_ids)
        self.temperature = float(temperature)
        self.target_layer = target_layer
        self.teacher_epochs = int(teacher_epochs)
        self.student_epochs = int(student_epochs)
        self.lr = lr
        self.batch_size = int(batch_size)

    def __repr__(self):
        return f"DistillationAttack(T={self.temperature}, layer={self.target_layer}, colluders={self.colluder_ids})"

    # Named layer, or the one with the fewest weights
    def resolve_layer(self, arch):
        if self.target_layer is None:
            return networks.smallest_layer(arch)
        if self.target_layer not in arch.layer_names():
            raise AttackError(f"Target layer '{self.target_layer}' is not one of {', '.join(arch.layer_names())}")
        return self.target_layer


def convergence_attack_updates(vectors, k):
    """ The malicious vector every colluder submits

    Parameters
    ----------
    vectors : list of numpy.ndarray
        The colluders' honestly computed updates
    k : float
        Signed multiple of the per-coordinate population standard deviation

    Returns
    -------
    numpy.ndarray
        mean + k * std per coordinate (float32)
    """

    if len(vectors) < 2:
        raise AttackError(f"The convergence attack needs at least 2 colluder updates to estimate a spread, got {len(vectors)}")
    matrix = numpy.stack([numpy.asarray(vector) for vector in vectors]).astype(numpy.float64)
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)
    return (mean + k * std).astype(numpy.float32)


# Minibatch passes over (x, target) with a temperature-scaled loss, updating only `trainable`
def _train(params, x, target, epochs, temperature, optimizer_spec, lr, batch_size, rng, trainable=None):
    if epochs == 0:
        return params
    optimizer = optim.make_optimizer(optimizer_spec, lr=lr)
    region = None
    if trainable is not None:
        region = params.layer_slice(trainable)
        trainable = [trainable]
    vector = params.flatten().copy()
    for _epoch in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            batch = order[start:start + batch_size]
            current = networks.unflatten(vector, params.arch)
            _loss, grad = networks.loss_and_gradient(current, x[batch], target[batch], temperature, trainable)
            vector = optimizer.step(vector, grad, region)
    return networks.unflatten(vector, params.arch)


def distillation_attack_update(global_params, x, y, cfg, seed, optimizer_spec=None, client_id=-1):
    """ Teacher/student distillation at temperature T on the colluders' local data

    1. Teacher: global weights trained on (x, y) with a temperature-T loss
    2. Soft labels: the teacher's temperature-T softmax on x
    3. Student: global weights trained on the soft labels, updating only the target layer
    4. The submitted vector is the global vector with the target layer's slice replaced

    Returns
    -------
    ClientUpdate
    """

    if len(x) == 0:
        raise AttackError("The distillation attack needs local data")
    if len(x) != len(y):
        raise ShapeError("distillation_attack_update", f"{len(x)} inputs but {len(y)} labels")
    optimizer_spec = optimizer_spec or {"kind": "adam"}
    layer = cfg.resolve_layer(global_params.arch)
    rng = numpy.random.default_rng(seed)

    teacher = _train(global_params.copy(), x, numpy.asarray(y), cfg.teacher_epochs, cfg.temperature, optimizer_spec, cfg.lr, cfg.batch_size, rng)
    soft_labels = numpy.concatenate([
        autodiff.softmax_array(networks.predict(teacher, x[start:start + cfg.batch_size]).data, cfg.temperature) for start in range(0, len(x), cfg.batch_size)
    ])
    student = _train(global_params.copy(), x, soft_labels, cfg.student_epochs, cfg.temperature, optimizer_spec, cfg.lr, cfg.batch_size, rng, trainable=layer)

    region = global_params.layer_slice(layer)
    vector = global_params.flatten().copy()
    vector[region] = student.flatten()[region]
    utils.log(f"Distillation update on layer {layer}: {region.stop - region.start} weights changed from {len(x)} samples", 10)
    return ClientUpdate(client_id, vector, len(x))


# Squared L2 distance from `update` to the mean of `references`
def l2_proximity(update, references):
    update = numpy.asarray(update, dtype=numpy.float64)
    if not len(references):
        raise AttackError("l2_proximity needs at least one reference update")
    references = numpy.stack([numpy.asarray(reference, dtype=numpy.float64) for reference in references])
    if references.shape[1:] != update.shape:
        raise ShapeError("l2_proximity", f"update has {update.shape[0]} values but references have {references.shape[1]}")
    diff = update - references.mean(axis=0)
    return float(diff @ diff)

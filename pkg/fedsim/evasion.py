# Standard imports
from concurrent.futures import ThreadPoolExecutor

# Third-party imports
import numpy

# Local imports
from . import autodiff, networks, utils
from .exceptions import FedsimError, ShapeError


# L-infinity PGD settings (pixel units)
class PgdConfig:
    def __init__(self, epsilon, step_size, steps, restarts=1, random_init=True, logit_scale_T=None):
        if epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {epsilon}")
        if step_size <= 0:
            raise ValueError(f"step_size must be positive, got {step_size}")
        if steps < 1 or restarts < 1:
            raise ValueError("steps and restarts must both be at least 1")
        if logit_scale_T is not None and logit_scale_T <= 0:
            raise ValueError(f"logit_scale_T must be positive, got {logit_scale_T}")
        self.epsilon = float(epsilon)
        self.step_size = float(step_size)
        self.steps = int(steps)
        self.restarts = int(restarts)
        self.random_init = bool(random_init)
        self.logit_scale_T = logit_scale_T

    def __repr__(self):
        scale = f", T={self.logit_scale_T}" if self.logit_scale_T else ""
        return f"PGD(eps={self.epsilon}, step={self.step_size}, steps={self.steps}, restarts={self.restarts}{scale})"

    @classmethod
    def from_dict(cls, data):
        return cls(data["epsilon"], data["step_size"], data["steps"], data.get("restarts", 1), data.get("random_init", True), data.get("logit_scale_T"))

    def with_logit_scale(self, temperature):
        return PgdConfig(self.epsilon, self.step_size, self.steps, self.restarts, self.random_init, temperature)

    def to_dict(self):
        return {"epsilon": self.epsilon, "step_size": self.step_size, "steps": self.steps, "restarts": self.restarts, "random_init": self.random_init,
                "logit_scale_T": self.logit_scale_T}


# Gradient of the (temperature-scaled) cross-entropy with respect to the input batch
def input_gradient(params, x, y, temperature=1.0):
    x_tensor = autodiff.Tensor(x, requires_grad=True)
    logits, _weights = networks.forward(params, x_tensor)
    loss = autodiff.cross_entropy(logits, y, temperature=temperature, reduction="sum")
    loss.backward()
    return x_tensor.grad, logits.data


def _project(x_adv, x, epsilon):
    # Clip to [0, 1] last so the box constraint holds exactly
    return numpy.clip(numpy.clip(x_adv, x - epsilon, x + epsilon), 0.0, 1.0).astype(numpy.float32)


def pgd_attack(params, x, y, cfg, seed=0):
    """ Untargeted L-infinity PGD on cross-entropy with the true labels

    Parameters
    ----------
    params : ModelParams
        The model under attack
    x : numpy.ndarray
        Clean inputs in [0, 1], [batch, *input_shape]
    y : numpy.ndarray
        True labels [batch]
    cfg : PgdConfig
        Attack settings; with logit_scale_T the loss is computed on logits / T
    seed : int
        Seeds the random start of each restart

    Returns
    -------
    numpy.ndarray
        Adversarial inputs; per sample, the restart that fools the model
        (highest final loss among those that do), else the highest-loss restart
    """

    x = numpy.asarray(x, dtype=numpy.float32)
    y = numpy.asarray(y, dtype=numpy.int64)
    if x.shape[0] != y.shape[0]:
        raise ShapeError("pgd_attack", f"{x.shape[0]} inputs but {y.shape[0]} labels")
    if cfg.epsilon == 0:
        return x.copy()
    temperature = cfg.logit_scale_T or 1.0

    best_x = x.copy()
    best_key = numpy.full((x.shape[0], 2), -numpy.inf)
    for restart in range(cfg.restarts):
        # Restart r always uses the same stream, so more restarts never weaken the attack
        rng = numpy.random.default_rng([int(seed), restart])
        x_adv = x.copy()
        if cfg.random_init:
            x_adv = _project(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), x, cfg.epsilon)
        for _step in range(cfg.steps):
            grad, _logits = input_gradient(params, x_adv, y, temperature)
            x_adv = _project(x_adv + cfg.step_size * numpy.sign(grad), x, cfg.epsilon)

        logits = networks.predict(params, x_adv).data
        fooled = (logits.argmax(axis=1) != y).astype(numpy.float64)
        loss = autodiff.cross_entropy_per_sample(logits, y, temperature)
        key = numpy.stack([fooled, loss], axis=1)
        better = (key[:, 0] > best_key[:, 0]) | ((key[:, 0] == best_key[:, 0]) & (key[:, 1] > best_key[:, 1]))
        best_x[better] = x_adv[better]
        best_key[better] = key[better]
    return best_x


def logit_scaled_pgd(params, x, y, cfg, temperature, seed=0):
    """ PGD whose loss divides the logits by `temperature` before the softmax

    Recovers useful gradients from models whose softmax has been flattened
    or saturated by temperature training.
    """

    if temperature <= 0:
        raise ValueError(f"Logit scale temperature must be positive, got {temperature}")
    return pgd_attack(params, x, y, cfg.with_logit_scale(temperature), seed)


def _check_compatible(surrogate, target):
    if surrogate.arch.input_shape != target.arch.input_shape or surrogate.arch.class_count != target.arch.class_count:
        raise ShapeError("transfer_attack", f"surrogate {surrogate.arch} and target {target.arch} differ in input or output shape")


# Black-box transfer: craft on the surrogate, score on the target
def transfer_attack(surrogate, target, x, y, cfg, seed=0):
    _check_compatible(surrogate, target)
    x_adv = pgd_attack(surrogate, x, y, cfg, seed)
    return float((networks.predict(target, x_adv).data.argmax(axis=1) == numpy.asarray(y)).mean())


# Per-sample correctness for one evaluation batch (all evaluators share the batch and seed)
def _evaluate_batch(params, x, y, cfg, seed, logit_scale_T, surrogate):
    correct = {"clean": networks.predict(params, x).data.argmax(axis=1) == y}
    correct["pgd"] = networks.predict(params, pgd_attack(params, x, y, cfg.with_logit_scale(None), seed)).data.argmax(axis=1) == y
    if logit_scale_T:
        x_adv = logit_scaled_pgd(params, x, y, cfg, logit_scale_T, seed)
        correct["logit_scaled"] = networks.predict(params, x_adv).data.argmax(axis=1) == y
    if surrogate is not None:
        x_adv = pgd_attack(surrogate, x, y, cfg, seed)
        correct["transfer"] = networks.predict(params, x_adv).data.argmax(axis=1) == y
    return correct


def evaluate_suite(params, dataset, cfg, seed=0, logit_scale_T=None, surrogate=None, batch_size=256, workers=1, per_sample=False):
    """ Clean accuracy plus robust accuracy under each configured evaluator

    Batches may run on worker threads; results are merged by batch index so the
    result does not depend on the number of workers.

    Returns
    -------
    dict
        {"clean": acc, "pgd": acc, ["logit_scaled": acc], ["transfer": acc]}
    dict, optional
        With per_sample, the boolean correctness of every test sample per evaluator
    """

    if len(dataset) == 0:
        raise FedsimError("Cannot evaluate on an empty test set")
    if surrogate is not None:
        _check_compatible(surrogate, params)
    starts = list(range(0, len(dataset), batch_size))

    def run(index):
        start = starts[index]
        x, y = dataset.images[start:start + batch_size], dataset.labels[start:start + batch_size]
        return _evaluate_batch(params, x, y, cfg, utils.derive_seed(seed, "eval", index), logit_scale_T, surrogate)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(starts))))
    else:
        results = [run(index) for index in range(len(starts))]

    correct = {key: numpy.concatenate([batch[key] for batch in results]) for key in results[0]}
    accuracies = {key: float(values.mean()) for key, values in correct.items()}
    for key in ("pgd", "logit_scaled", "transfer"):
        if key in accuracies and accuracies[key] > accuracies["clean"]:
            utils.log(f"Adversarial accuracy ({key}) {accuracies[key]:.4f} exceeds clean accuracy {accuracies['clean']:.4f}", 30)
    if per_sample:
        return accuracies, correct
    return accuracies


def evaluate_robustness(params, dataset, cfg, seed=0, batch_size=256, workers=1):
    """ Returns (clean_acc, adv_acc) under best-of-restarts PGD """

    accuracies = evaluate_suite(params, dataset, cfg, seed, logit_scale_T=cfg.logit_scale_T, batch_size=batch_size, workers=workers)
    return accuracies["clean"], accuracies["logit_scaled" if cfg.logit_scale_T else "pgd"]

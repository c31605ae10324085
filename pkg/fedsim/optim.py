# Third-party imports
import numpy

# Local imports
from .exceptions import NonFiniteError

OPTIMIZER_KINDS = ("adam", "sgd")


# Local optimisers over the flat parameter vector.
# State is a plain dict of arrays so it can be kept per client between rounds.
class Optimizer:
    def __init__(self, lr, state=None):
        self.lr = lr
        self.state = state if state is not None else {}

    # Apply one update to `vector` (float32) given `grad`; `region` restricts the update to a slice
    def step(self, vector, grad, region=None):
        if not numpy.isfinite(grad).all():
            raise NonFiniteError("Non-finite gradient passed to the optimiser")
        region = region if region is not None else slice(0, vector.shape[0])
        self._prepare(region)
        updated = vector.copy()
        updated[region] = self._update(vector[region].astype(numpy.float64), grad[region].astype(numpy.float64)).astype(numpy.float32)
        if not numpy.isfinite(updated).all():
            raise NonFiniteError("Optimiser step produced non-finite weights")
        return updated

    def _update(self, weights, grad):
        raise NotImplementedError

    # Moment buffers are sized to the region being trained; switching region resets them
    def _prepare(self, region):
        key = [region.start, region.stop]
        if self.state.get("region") != key:
            self.state.clear()
            self.state.update({"region": key, "t": 0})

    def _buffer(self, name, size):
        if name not in self.state:
            self.state[name] = numpy.zeros(size)
        return self.state[name]


class Adam(Optimizer):
    def __init__(self, lr=0.001, betas=(0.9, 0.999), eps=1e-8, state=None):
        super().__init__(lr, state)
        self.betas = betas
        self.eps = eps

    def _update(self, weights, grad):
        m = self._buffer("m", weights.shape[0])
        v = self._buffer("v", weights.shape[0])
        beta1, beta2 = self.betas
        self.state["t"] += 1
        t = self.state["t"]
        m *= beta1
        m += (1 - beta1) * grad
        v *= beta2
        v += (1 - beta2) * grad * grad
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        return weights - self.lr * m_hat / (numpy.sqrt(v_hat) + self.eps)


class Sgd(Optimizer):
    def __init__(self, lr=0.01, momentum=0.0, state=None):
        super().__init__(lr, state)
        self.momentum = momentum

    def _update(self, weights, grad):
        if self.momentum:
            velocity = self._buffer("velocity", weights.shape[0])
            velocity *= self.momentum
            velocity += grad
            grad = velocity
        return weights - self.lr * grad


# Build an optimiser from the "optimizer" config section, resuming `state` if given
def make_optimizer(spec, state=None, lr=None):
    kind = spec.get("kind", "adam")
    lr = lr if lr is not None else spec.get("lr", 0.001)
    if kind == "adam":
        return Adam(lr, tuple(spec.get("betas", (0.9, 0.999))), spec.get("eps", 1e-8), state)
    elif kind == "sgd":
        return Sgd(lr, spec.get("momentum", 0.0), state)
    raise ValueError(f"Unsupported optimiser '{kind}' (expected one of {', '.join(OPTIMIZER_KINDS)})")

# Standard imports
from concurrent.futures import ThreadPoolExecutor

# Third-party imports
import numpy

# Local imports
from . import utils
from .exceptions import AggregationError, ShapeError

AGGREGATION_RULES = ("fedavg", "krum", "trimmed_mean", "bulyan")


# One client's submission for a round: full flat weight vector and local sample count
class ClientUpdate:
    def __init__(self, client_id, vector, sample_count):
        self.client_id = int(client_id)
        self.vector = numpy.asarray(vector, dtype=numpy.float32)
        self.sample_count = int(sample_count)

    def __repr__(self):
        return f"ClientUpdate(client={self.client_id}, samples={self.sample_count})"


# Rule name plus the assumed number of Byzantine clients
class AggregationConfig:
    def __init__(self, rule, f=0):
        if rule not in AGGREGATION_RULES:
            raise ValueError(f"Unknown aggregation rule '{rule}' (expected one of {', '.join(AGGREGATION_RULES)})")
        if f < 0:
            raise ValueError(f"f must be non-negative, got {f}")
        self.rule = rule
        self.f = int(f)

    def __repr__(self):
        return f"AggregationConfig({self.rule}, f={self.f})"

    # Smallest number of updates the rule accepts for this f
    def min_updates(self):
        if self.rule in ("krum", "trimmed_mean"):
            return 2 * self.f + 3
        elif self.rule == "bulyan":
            return 4 * self.f + 3
        return 1

    def validate(self, n):
        if n < self.min_updates():
            raise AggregationError(f"{self.rule} with f={self.f} needs at least {self.min_updates()} updates, got {n}")


# Output of a rule: the new global vector plus what the rule chose
class AggregationResult:
    def __init__(self, vector, selected_ids, scores=None, kept_count=None):
        self.vector = vector
        self.selected_ids = selected_ids
        self.scores = scores
        self.kept_count = kept_count


def _check_updates(updates):
    if not updates:
        raise AggregationError("No updates to aggregate")
    dimension = updates[0].vector.shape
    for update in updates:
        if update.vector.shape != dimension:
            raise ShapeError("aggregate", f"client {update.client_id} sent {update.vector.shape[0]} values, expected {dimension[0]}")
    if len({update.client_id for update in updates}) != len(updates):
        raise AggregationError("Duplicate client ids in one round")


def fedavg(updates):
    """ Sample-count-weighted mean of the client vectors (64-bit accumulation) """

    _check_updates(updates)
    total = sum(update.sample_count for update in updates)
    if total <= 0:
        raise AggregationError("FedAvg needs a positive total sample count")
    result = numpy.zeros(updates[0].vector.shape[0], dtype=numpy.float64)
    for update in updates:
        result += (update.sample_count / total) * update.vector.astype(numpy.float64)
    return result.astype(numpy.float32)


# Squared L2 distances between all pairs, from direct differences in float64
def pairwise_sq_distances(vectors):
    vectors = numpy.asarray(vectors, dtype=numpy.float64)
    n = len(vectors)
    distances = numpy.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            diff = vectors[i] - vectors[j]
            distances[i, j] = distances[j, i] = diff @ diff
    return distances


# Krum score of every candidate in `pool`: sum of distances to its `neighbours` nearest others
def _krum_scores(distances, pool, neighbours):
    scores = {}
    for i in pool:
        others = numpy.sort([distances[i, j] for j in pool if j != i])
        scores[i] = float(others[:neighbours].sum())
    return scores


def krum(updates, f):
    """ Select the single update closest to its n - f - 2 nearest neighbours

    Parameters
    ----------
    updates : list of ClientUpdate
        The round's submissions
    f : int
        Assumed number of Byzantine clients; needs n >= 2f + 3

    Returns
    -------
    ClientUpdate, dict
        The selected update (ties go to the lowest client id) and the score of every client id
    """

    _check_updates(updates)
    n = len(updates)
    if n < 2 * f + 3:
        raise AggregationError(f"krum with f={f} needs at least {2 * f + 3} updates, got {n}")
    ordered = sorted(updates, key=lambda update: update.client_id)
    distances = pairwise_sq_distances([update.vector for update in ordered])
    scores = _krum_scores(distances, range(n), n - f - 2)
    best = min(range(n), key=lambda i: (scores[i], ordered[i].client_id))
    return ordered[best], {ordered[i].client_id: scores[i] for i in range(n)}


# Coordinate-wise trimmed mean of the columns of one [n, chunk] block
def _trim_block(block, ids, keep):
    n = block.shape[0]
    median = numpy.sort(block, axis=0)[(n - 1) // 2]
    # Closest to the median first; ties broken by value then client id
    id_key = numpy.broadcast_to(ids[:, None], block.shape)
    order = numpy.lexsort((id_key, block, numpy.abs(block - median)), axis=0)[:keep]
    kept = numpy.take_along_axis(block, order, axis=0)
    total = numpy.zeros(block.shape[1])
    for row in kept:
        total += row
    return total / keep


def trimmed_mean(updates, f, chunk_size=None, workers=1):
    """ Coordinate-wise mean of the n - 2f values closest to the median

    The median of an even count is the lower middle value. Coordinates may be
    processed in chunks on worker threads; chunks are written back by offset so
    the result does not depend on chunking or worker count.
    """

    _check_updates(updates)
    n = len(updates)
    if n <= 2 * f:
        raise AggregationError(f"trimmed_mean with f={f} needs more than {2 * f} updates, got {n}")
    keep = n - 2 * f
    matrix = numpy.stack([update.vector for update in updates]).astype(numpy.float64)
    ids = numpy.array([update.client_id for update in updates])
    dimension = matrix.shape[1]
    chunk_size = chunk_size or max(-(-dimension // max(workers, 1)), 1)
    starts = list(range(0, dimension, chunk_size))
    result = numpy.empty(dimension)

    def run(start):
        result[start:start + chunk_size] = _trim_block(matrix[:, start:start + chunk_size], ids, keep)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, starts))
    else:
        for start in starts:
            run(start)
    return result.astype(numpy.float32)


def bulyan(updates, f):
    """ Repeated Krum selection of n - 2f updates, then a trimmed mean of the selection

    Each selection re-scores the remaining pool with n_pool - f - 2 neighbours
    (kept between 1 and n_pool - 1). The final step keeps the n - 4f values per
    coordinate closest to the median of the selected set.

    Returns
    -------
    numpy.ndarray, list
        The aggregate and the client ids selected in order
    """

    _check_updates(updates)
    n = len(updates)
    if n < 4 * f + 3:
        raise AggregationError(f"bulyan with f={f} needs at least {4 * f + 3} updates, got {n}")
    ordered = sorted(updates, key=lambda update: update.client_id)
    distances = pairwise_sq_distances([update.vector for update in ordered])
    pool = list(range(n))
    chosen = []
    for _round in range(n - 2 * f):
        neighbours = min(max(len(pool) - f - 2, 1), len(pool) - 1)
        if len(pool) == 1:
            best = pool[0]
        else:
            scores = _krum_scores(distances, pool, neighbours)
            best = min(pool, key=lambda i: (scores[i], ordered[i].client_id))
        chosen.append(best)
        pool.remove(best)
    selected = [ordered[i] for i in chosen]
    return trimmed_mean(selected, f), [update.client_id for update in selected]


# Run the configured rule and report what it chose
def aggregate(updates, config, workers=1):
    config.validate(len(updates))
    if config.rule == "fedavg":
        return AggregationResult(fedavg(updates), sorted(update.client_id for update in updates))
    elif config.rule == "krum":
        selected, scores = krum(updates, config.f)
        utils.log(f"Krum selected client {selected.client_id}", 10)
        return AggregationResult(selected.vector.copy(), [selected.client_id], scores=scores)
    elif config.rule == "trimmed_mean":
        return AggregationResult(trimmed_mean(updates, config.f, workers=workers), sorted(update.client_id for update in updates),
                                 kept_count=len(updates) - 2 * config.f)
    vector, selected_ids = bulyan(updates, config.f)
    return AggregationResult(vector, selected_ids, kept_count=len(selected_ids) - 2 * config.f)

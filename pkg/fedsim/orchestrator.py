# Standard imports
import copy
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor

# Third-party imports
import numpy
from django.conf import settings

# Local imports
from . import aggregation, byzantine, datasets, evasion, metrics, networks, optim, serializers, utils
from .exceptions import AggregationError, AttackError, ConfigError, DatasetError, NonFiniteError


# Piecewise-constant K/N ratio over rounds
class MixSchedule:
    def __init__(self, segments):
        segments = [(int(start), float(ratio)) for start, ratio in segments]
        if not segments or segments[0][0] != 0:
            raise ValueError("A mix schedule must start at round 0")
        if any(b[0] <= a[0] for a, b in zip(segments, segments[1:])):
            raise ValueError("Mix schedule start rounds must be strictly increasing")
        if any(not 0 <= ratio <= 1 for _start, ratio in segments):
            raise ValueError("Mix schedule ratios must lie in [0, 1]")
        self.segments = segments

    def __repr__(self):
        return f"MixSchedule({self.segments})"


def schedule_ratio(schedule, round_index):
    """ Ratio of the last segment starting at or before `round_index` """

    if round_index < 0:
        raise ValueError(f"Round index must be non-negative, got {round_index}")
    ratio = schedule.segments[0][1]
    for start, segment_ratio in schedule.segments:
        if start > round_index:
            break
        ratio = segment_ratio
    return ratio


# Adversarial samples per batch: ratio * N rounded half up
def adversarial_count(ratio, batch_size):
    if not 0 <= ratio <= 1:
        raise ValueError(f"K/N ratio must lie in [0, 1], got {ratio}")
    return min(int(math.floor(ratio * batch_size + 0.5)), batch_size)


# Validated experiment settings with the derived runtime objects
class ExperimentConfig:
    def __init__(self, data):
        self.data = data
        self.name = data.get("name") or "experiment"
        self.seed = data["seed"]
        self.arch = networks.Architecture.from_config(data["arch"])
        self.mix_schedule = MixSchedule(data["mix_schedule"])
        self.pgd_train = evasion.PgdConfig.from_dict(data["pgd_train"])
        self.pgd_eval = evasion.PgdConfig.from_dict(data["pgd_eval"])
        self.aggregation = aggregation.AggregationConfig(data["aggregation"]["rule"], data["aggregation"]["f"])
        attack = data["attack"]
        self.attack_kind = attack["kind"]
        self.colluder_ids = set(attack["colluders"])
        if self.attack_kind == "convergence":
            self.attack = byzantine.ConvergenceAttackConfig(attack["k"], attack["colluders"])
        elif self.attack_kind == "distillation":
            self.attack = byzantine.DistillationAttackConfig(attack["colluders"], attack["temperature"], attack["target_layer"], attack["teacher_epochs"],
                                                             attack["student_epochs"], attack["lr"], data["batch_size"])
        else:
            self.attack = None

    def __getattr__(self, name):
        try:
            return self.__dict__["data"][name]
        except KeyError:
            raise AttributeError(name)

    def __repr__(self):
        return f"ExperimentConfig({self.name}, {self.aggregation}, attack={self.attack_kind}, rounds={self.data['total_rounds']})"

    @property
    def run_id(self):
        return f"{self.name}-s{self.seed}"

    @classmethod
    def from_document(cls, document, overrides=(), name=None):
        """ Apply key=value overrides to a raw config document, then validate it

        Raises
        ------
        ConfigError
            For malformed overrides and for any invalid field
        """

        document = copy.deepcopy(document)
        if not isinstance(document, dict):
            raise ConfigError({"non_field_errors": ["The config must be a JSON object."]})
        for text in overrides:
            try:
                key, value = utils.parse_override(text)
            except ValueError as error:
                raise ConfigError({"overrides": [str(error)]})
            utils.set_dotted(document, key, value)
        if name and "name" not in document:
            document["name"] = name
        return cls(serializers.validate_config(document))

    @classmethod
    def from_file(cls, path, overrides=()):
        try:
            with open(path, "r", encoding="utf-8") as f:
                document = json.load(f)
        except OSError as error:
            raise ConfigError({"config": [f"Cannot read {path}: {error.strerror}"]})
        except ValueError as error:
            raise ConfigError({"config": [f"{path} is not valid JSON: {error}"]})
        return cls.from_document(document, overrides, name=os.path.splitext(os.path.basename(path))[0])


# One line of the metrics stream
class RoundRecord:
    def __init__(self, run_id, round_index, rule, ratio):
        self.schema_version = serializers.METRICS_SCHEMA_VERSION
        self.run_id = run_id
        self.round = round_index
        self.rule = rule
        self.ratio = ratio
        self.participants = []
        self.colluders = []
        self.selected_ids = []
        self.kept_count = None
        self.excluded_ids = []
        self.colluders_identical = None
        self.l2_proximity = None
        self.train_loss = None
        self.aborted = False
        self.abort_reason = None
        self.clean_acc = None
        self.adv_pgd = None
        self.adv_logit_scaled = None
        self.adv_transfer = None
        self.client_clean_acc = None
        self.client_clean_accs = None
        self.client_adv_accs = None

    def __repr__(self):
        return f"RoundRecord(run={self.run_id}, round={self.round}, aborted={self.aborted})"

    def to_dict(self):
        return dict(serializers.RoundRecordSerializer(self).data)


def local_fat_step(params, x, y, ratio, pgd_cfg, optimizer, local_steps, batch_size, rng, client_id=-1):
    """ Federated adversarial training on one client's shard

    Each of `local_steps` minibatches of size N has its first K = round(ratio * N)
    samples replaced by PGD examples crafted against the current local weights;
    the mean cross-entropy over the mixed batch is minimised by `optimizer`.

    Parameters
    ----------
    params : ModelParams
        Starting (global) weights
    x, y : numpy.ndarray
        The client's local samples and labels
    ratio : float
        K/N in [0, 1]; 0 skips the attack entirely
    pgd_cfg : PgdConfig
        Training attack settings
    optimizer : Optimizer
        The client's local optimiser (its state may persist across rounds)
    rng : numpy.random.Generator
        Per-client, per-round stream for batch sampling and PGD starts

    Returns
    -------
    ClientUpdate, float
        The new full weight vector with the shard size, and the mean batch loss
    """

    if len(x) == 0:
        raise DatasetError(f"Client {client_id} has no local data")
    if not 0 <= ratio <= 1:
        raise ValueError(f"K/N ratio must lie in [0, 1], got {ratio}")
    vector = params.flatten().copy()
    current = params
    losses = []
    for _step in range(local_steps):
        batch = rng.choice(len(x), size=min(batch_size, len(x)), replace=False)
        xb, yb = x[batch], y[batch]
        k = adversarial_count(ratio, len(batch))
        if k > 0:
            x_adv = evasion.pgd_attack(current, xb[:k], yb[:k], pgd_cfg, seed=int(rng.integers(0, 2**63 - 1)))
            xb = numpy.concatenate([x_adv, xb[k:]])
        loss, grad = networks.loss_and_gradient(current, xb, yb)
        vector = optimizer.step(vector, grad)
        current = networks.unflatten(vector, params.arch)
        losses.append(loss)
    return aggregation.ClientUpdate(client_id, vector, len(x)), float(numpy.mean(losses))


# Train and test splits shaped for the configured architecture
def load_splits(cfg, data_root=None):
    data_root = data_root or settings.FEDSIM_DATA_DIR
    train, test = datasets.load_dataset(cfg.dataset, data_root, cfg.seed)
    shape = tuple(cfg.arch.input_shape)
    if train.sample_shape != shape and int(numpy.prod(train.sample_shape)) == int(numpy.prod(shape)):
        train = datasets.Dataset(train.images.reshape((len(train), ) + shape), train.labels, train.class_count)
        test = datasets.Dataset(test.images.reshape((len(test), ) + shape), test.labels, test.class_count)
    return train, datasets.subset(test, cfg.eval_subset, utils.derive_seed(cfg.seed, "eval", 0))


# Everything that changes while an experiment runs
class SimulationState:
    def __init__(self, cfg, train, test, partition, global_params, surrogate=None, test_partition=None):
        self.cfg = cfg
        self.train = train
        self.test = test
        self.partition = partition
        self.test_partition = test_partition
        self.global_params = global_params
        self.surrogate = surrogate
        self.optimizer_states = {}
        self.round = 0
        self.best_adv = None

    @classmethod
    def initialise(cls, cfg, data_root=None):
        """ Load data, split it between clients and build the initial model """

        train, test = load_splits(cfg, data_root)
        if cfg.n_clients > len(train):
            raise ConfigError({"n_clients": [f"Cannot split {len(train)} training samples between {cfg.n_clients} clients."]})
        partition = _make_partition(train, cfg, utils.derive_seed(cfg.seed, "partition", 0))
        utils.log(f"Partitioned {len(train)} training samples between {cfg.n_clients} clients "
                  f"(shard sizes {min(partition.sizes().values())}-{max(partition.sizes().values())})")

        test_partition = None
        if len(test) >= cfg.n_clients:
            try:
                test_partition = _make_partition(test, cfg, utils.derive_seed(cfg.seed, "partition", 1))
            except DatasetError as error:
                utils.log(f"Per-client test accuracy disabled: {error}", 30)

        surrogate = load_surrogate(cfg.surrogate_checkpoint, cfg.data["arch"]) if cfg.surrogate_checkpoint else None
        global_params = networks.build_model(cfg.arch, utils.derive_seed(cfg.seed, "init"))
        return cls(cfg, train, test, partition, global_params, surrogate, test_partition)

    def client_data(self, client_id):
        indices = self.partition[client_id]
        return self.train.images[indices], self.train.labels[indices]

    # Optimiser for a client, resuming its moments when state persists
    def client_optimizer(self, client_id):
        spec = self.cfg.optimizer
        if not spec["persist_state"]:
            return optim.make_optimizer(spec)
        return optim.make_optimizer(spec, state=self.optimizer_states.setdefault(client_id, {}))


def _make_partition(dataset, cfg, seed):
    if cfg.partition["kind"] == "label_skew":
        return datasets.partition_label_skew(dataset, cfg.n_clients, cfg.partition["alpha"], seed, cfg.partition["max_retries"])
    return datasets.partition_iid(dataset, cfg.n_clients, seed)


# Load a transfer-attack surrogate; its kind comes from the checkpoint header
def load_surrogate(path, arch_data):
    header = networks.read_checkpoint_header(path)
    arch = networks.Architecture.from_config(arch_data)
    if header["kind"] != arch.kind:
        arch = networks.Architecture.from_config({"kind": header["kind"], "input_shape": arch_data["input_shape"], "classes": arch_data["classes"]})
    params, _round = networks.load_checkpoint(path, arch)
    utils.log(f"Loaded transfer surrogate {path} ({arch})")
    return params


def _sample_participants(cfg, round_index):
    rng = utils.derive_rng(cfg.seed, "sample", round_index)
    return sorted(int(client_id) for client_id in rng.choice(cfg.n_clients, size=cfg.clients_per_round, replace=False))


def _honest_update(state, client_id, round_index, ratio):
    cfg = state.cfg
    x, y = state.client_data(client_id)
    rng = utils.derive_rng(cfg.seed, "client", client_id, round_index)
    return local_fat_step(state.global_params, x, y, ratio, cfg.pgd_train, state.client_optimizer(client_id), cfg.local_steps, cfg.batch_size, rng, client_id)


def run_round(state):
    """ One communication round

    Samples clients, runs honest local training (on a worker pool when
    configured), lets the round's colluders rendezvous and submit their
    malicious vector, aggregates, and replaces the global weights.
    A round whose aggregation fails on finite updates is marked aborted and
    leaves the global model unchanged.

    Returns
    -------
    RoundRecord
    """

    cfg = state.cfg
    round_index = state.round
    ratio = schedule_ratio(cfg.mix_schedule, round_index)
    record = RoundRecord(cfg.run_id, round_index, cfg.aggregation.rule, ratio)
    participants = _sample_participants(cfg, round_index)
    record.participants = participants
    colluders = [client_id for client_id in participants if client_id in cfg.colluder_ids]
    record.colluders = colluders

    # Distillation colluders never train honestly; convergence colluders do, then rendezvous
    honest_ids = [client_id for client_id in participants if not (cfg.attack_kind == "distillation" and client_id in cfg.colluder_ids)]

    def train(client_id):
        try:
            return _honest_update(state, client_id, round_index, ratio)
        except NonFiniteError as error:
            return error

    if cfg.workers > 1 and len(honest_ids) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            outcomes = dict(zip(honest_ids, pool.map(train, honest_ids)))
    else:
        outcomes = {client_id: train(client_id) for client_id in honest_ids}

    updates, losses = {}, []
    for client_id in honest_ids:
        outcome = outcomes[client_id]
        if isinstance(outcome, NonFiniteError):
            utils.log(f"Round {round_index}: client {client_id} excluded ({outcome})", 30)
            record.excluded_ids.append(client_id)
            continue
        updates[client_id], loss = outcome
        losses.append(loss)
    record.train_loss = float(numpy.mean(losses)) if losses else None

    malicious = _attack(state, record, colluders, updates, round_index)
    if malicious is not None:
        references = [update.vector for client_id, update in updates.items() if client_id not in cfg.colluder_ids]
        for client_id in colluders:
            if client_id not in record.excluded_ids:
                updates[client_id] = aggregation.ClientUpdate(client_id, malicious, len(state.partition[client_id]))
        submitted_by_colluders = [updates[client_id].vector for client_id in colluders if client_id in updates]
        record.colluders_identical = all(numpy.array_equal(vector, submitted_by_colluders[0]) for vector in submitted_by_colluders)
        if references:
            record.l2_proximity = byzantine.l2_proximity(malicious, references)
            utils.log(f"Round {round_index}: malicious update l2 proximity {record.l2_proximity:.6g} to the honest mean", 10)

    submitted = [updates[client_id] for client_id in sorted(updates)]
    try:
        result = aggregation.aggregate(submitted, cfg.aggregation, workers=cfg.workers)
        if not numpy.isfinite(result.vector).all():
            raise NonFiniteError("Aggregated vector is not finite")
    except (AggregationError, NonFiniteError) as error:
        if isinstance(error, AggregationError) and not record.excluded_ids:
            raise AggregationError(f"Round {round_index} of {cfg.run_id}: {error} "
                                   f"(rule={cfg.aggregation.rule}, f={cfg.aggregation.f}, clients_per_round={cfg.clients_per_round})")
        utils.log(f"Round {round_index} aborted, global model unchanged: {error}", 30)
        record.aborted = True
        record.abort_reason = str(error)
    else:
        state.global_params = networks.unflatten(result.vector, cfg.arch)
        record.selected_ids = result.selected_ids
        record.kept_count = result.kept_count
    state.round += 1
    return record


# The round's colluders submit one shared vector; returns it (None when no attack happens)
def _attack(state, record, colluders, updates, round_index):
    cfg = state.cfg
    if cfg.attack is None or not colluders:
        return None
    if cfg.attack_kind == "convergence":
        benign = [updates[client_id].vector for client_id in colluders if client_id in updates]
        if len(benign) < 2:
            utils.log(f"Round {round_index}: only {len(benign)} colluder(s) sampled, submitting honest updates", 20)
            return None
        malicious = byzantine.convergence_attack_updates(benign, cfg.attack.k)
        utils.log(f"Round {round_index}: {len(benign)} colluders submit mean + {cfg.attack.k} std", 10)
        return malicious

    indices = numpy.concatenate([state.partition[client_id] for client_id in colluders])
    x, y = state.train.images[indices], state.train.labels[indices]
    try:
        update = byzantine.distillation_attack_update(state.global_params, x, y, cfg.attack, utils.derive_seed(cfg.seed, "attack", round_index), cfg.optimizer)
    except (NonFiniteError, AttackError) as error:
        utils.log(f"Round {round_index}: distillation failed, colluders submit nothing ({error})", 30)
        record.excluded_ids.extend(colluders)
        return None
    return update.vector


def evaluate(state, record):
    """ Fill the evaluation fields of `record` from the current global model """

    cfg = state.cfg
    accuracies, correct = evasion.evaluate_suite(state.global_params, state.test, cfg.pgd_eval, utils.derive_seed(cfg.seed, "eval", record.round),
                                                 logit_scale_T=cfg.logit_scale_T, surrogate=state.surrogate, batch_size=cfg.eval_batch_size,
                                                 workers=cfg.workers, per_sample=True)
    record.clean_acc = accuracies["clean"]
    record.adv_pgd = accuracies["pgd"]
    record.adv_logit_scaled = accuracies.get("logit_scaled")
    record.adv_transfer = accuracies.get("transfer")
    if state.test_partition is not None:
        shards = [state.test_partition[client_id] for client_id in state.test_partition.client_ids()]
        sizes = numpy.array([len(shard) for shard in shards], dtype=numpy.float64)
        client_accs = numpy.array([correct["clean"][shard].mean() for shard in shards])
        record.client_clean_accs = [float(acc) for acc in client_accs]
        record.client_clean_acc = float((client_accs * sizes).sum() / sizes.sum())
        if cfg.per_client_robustness:
            record.client_adv_accs = [float(correct["pgd"][shard].mean()) for shard in shards]
    return accuracies


def run_experiment(cfg, out_dir, data_root=None, on_evaluation=None):
    """ Run every round of an experiment and write its artefacts

    Writes config.json (the resolved config), metrics.jsonl (one record per
    round), final.ckpt and best.ckpt (highest PGD adversarial accuracy) into
    `out_dir`. `on_evaluation(record)` is called after each evaluation.

    Returns
    -------
    list of RoundRecord
    """

    utils.log(f"Starting {cfg} in {out_dir}")
    state = SimulationState.initialise(cfg, data_root)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
        json.dump(cfg.data, f, indent=2, sort_keys=True)

    records = []
    with metrics.MetricsWriter(os.path.join(out_dir, "metrics.jsonl")) as writer:
        for _round in range(cfg.total_rounds):
            start = time.perf_counter()
            record = run_round(state)
            if (record.round + 1) % cfg.eval_every == 0:
                evaluate(state, record)
                utils.log(f"[{cfg.run_id}] round {record.round}: clean {record.clean_acc:.4f}, PGD {record.adv_pgd:.4f}"
                          + (f", logit-scaled {record.adv_logit_scaled:.4f}" if record.adv_logit_scaled is not None else "")
                          + (f", transfer {record.adv_transfer:.4f}" if record.adv_transfer is not None else ""))
                if state.best_adv is None or record.adv_pgd > state.best_adv:
                    state.best_adv = record.adv_pgd
                    networks.save_checkpoint(os.path.join(out_dir, "best.ckpt"), state.global_params, record.round)
                if on_evaluation is not None:
                    on_evaluation(record)
            if cfg.record_wall_time:
                record.wall_time = time.perf_counter() - start
            writer.write(record)
            records.append(record)

    networks.save_checkpoint(os.path.join(out_dir, "final.ckpt"), state.global_params, state.round - 1)
    utils.log(f"Finished {cfg.run_id}: {len(records)} rounds, {sum(record.aborted for record in records)} aborted")
    return records

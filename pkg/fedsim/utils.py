import json
import logging

import numpy

logger = logging.getLogger("fedsim")


def log(message, level=logging.INFO):
    """ Log a message to the simulator log (console and rotating text file)

    Parameters
    ----------
    message : str
        The message to log
    level : int
        A standard logging level
    """

    logger.log(level, message)


def set_dotted(data, key, value):
    """ Set a value in a nested dictionary from a dotted key, creating levels as needed

    Parameters
    ----------
    data : dict
        The (nested) dictionary, modified in place
    key : str
        Keys joined by dots, e.g. "aggregation.rule"
    value : any
        The value to store
    """

    keys = key.split(".")
    for part in keys[:-1]:
        if not isinstance(data.get(part), dict):
            data[part] = {}
        data = data[part]
    data[keys[-1]] = value


def parse_override(text):
    """ Parse a command-line override of the form key=value

    The value is read as JSON where possible (numbers, booleans, lists, null),
    otherwise kept as a plain string.

    Returns
    -------
    str, any
        The dotted key and the parsed value
    """

    if "=" not in text:
        raise ValueError(f"Override '{text}' must have the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ValueError(f"Override '{text}' has an empty key")
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key, value


# Keys for the independent random streams used within a run
STREAMS = {"sample": 1, "client": 2, "pgd": 3, "eval": 4, "attack": 5, "partition": 6, "init": 7}


def derive_rng(master_seed, stream, *keys):
    """ Create a generator seeded from (master seed, stream name, extra integer keys)

    Every random draw in a run comes from one of these, so results do not
    depend on the order in which clients or batches are processed.
    """

    return numpy.random.default_rng([int(master_seed), STREAMS[stream]] + [int(key) for key in keys])


def derive_seed(master_seed, stream, *keys):
    return int(derive_rng(master_seed, stream, *keys).integers(0, 2**63 - 1))

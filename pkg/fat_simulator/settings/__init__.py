import os

from django.core.management.utils import get_random_secret_key

# Simulator defaults shared by every checkout
from .core import *

USER_SETTINGS = os.path.join(os.path.dirname(os.path.realpath(__file__)), "user.py")


# First run on a machine: write user.py with a fresh key and a slot for local data paths
def _bootstrap_user_settings(path):
    key = get_random_secret_key()
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"SECRET_KEY = \"{key}\"\n\n")
        f.write("# Per-machine simulator settings, for example:\n")
        f.write("# FEDSIM_DATA_DIR = \"/data/datasets\"\n# FEDSIM_WORKERS = 4\n")
    return key


# Per-machine settings (ignored by git)
try:
    from .user import *
except ImportError:
    SECRET_KEY = _bootstrap_user_settings(USER_SETTINGS)

# Environment overrides (take precedence over user.py)
if "FEDSIM_DATA_DIR" in os.environ:
    FEDSIM_DATA_DIR = os.environ["FEDSIM_DATA_DIR"]

if "FEDSIM_WORKERS" in os.environ:
    FEDSIM_WORKERS = int(os.environ["FEDSIM_WORKERS"])

if "FEDSIM_QUIET" in os.environ:
    LOGGING["loggers"]["fedsim"]["handlers"] = ["file"]

import os

DEBUG = True

BASE_DIR = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

INSTALLED_APPS = [
    "fedsim.apps.FedsimConfig",
    "rest_framework",
    "django.contrib.contenttypes",
    "django.contrib.auth",
]

# Nothing is persisted in the database; Django still expects a default connection
DATABASES = {"default": {"ENGINE": "django.db.backends.sqlite3", "NAME": os.path.join(BASE_DIR, "db.sqlite3")}}

LANGUAGE_CODE = "en-gb"

TIME_ZONE = "UTC"

USE_TZ = True

DEFAULT_AUTO_FIELD = "django.db.models.AutoField"

REST_FRAMEWORK = {
    "DEFAULT_RENDERER_CLASSES": ("rest_framework.renderers.JSONRenderer", ),
    "DEFAULT_PARSER_CLASSES": ("rest_framework.parsers.JSONParser", ),
    "STRICT_JSON": True,
    "COERCE_DECIMAL_TO_STRING": False,
}

# Simulator settings

# Root directory containing one sub-directory per dataset (mnist/, fashion-mnist/, cifar10/)
FEDSIM_DATA_DIR = os.path.join(BASE_DIR, "data")

# Default output directory for `manage.py run` when --out is not given
FEDSIM_OUTPUT_DIR = os.path.join(BASE_DIR, "runs")

# Worker threads used for client computation and evaluation fan-out
FEDSIM_WORKERS = 1

FEDSIM_LOG_DIR = os.path.join(BASE_DIR, "logs")

PYTHON_LOG_MAX_BYTES = 10 * 1024 * 1024

os.makedirs(FEDSIM_LOG_DIR, exist_ok=True)

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "fedsim": {
            "format": "[%(asctime)s] %(levelname)s %(message)s",
            "datefmt": "%d/%m/%Y %H:%M:%S",
        },
    },
    "handlers": {
        "console": {
            "level": "INFO",
            "class": "logging.StreamHandler",
            "formatter": "fedsim",
        },
        "file": {
            "level": "DEBUG",
            "class": "logging.handlers.RotatingFileHandler",
            "filename": os.path.join(FEDSIM_LOG_DIR, "fedsim.log"),
            "maxBytes": PYTHON_LOG_MAX_BYTES,
            "backupCount": 5,
            "encoding": "utf8",
            "formatter": "fedsim",
        },
    },
    "loggers": {
        "django": {
            "handlers": ["console"],
            "level": "WARNING",
        },
        "fedsim": {
            "handlers": ["console", "file"],
            "level": "DEBUG",
            "propagate": False,
        },
    },
}

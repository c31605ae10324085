import os

from django.core.management.base import BaseCommand, CommandError

from .. import utils
from ..exceptions import ConfigError, DatasetMissing, FedsimError, SchemaError

EXIT_CONFIG = 2
EXIT_DATASET_MISSING = 3
EXIT_RUNTIME = 4


# Base for the simulator commands: maps simulator errors to distinct exit codes
class FedsimCommand(BaseCommand):
    def handle(self, *args, **options):
        try:
            self.run(*args, **options)
        except ConfigError as error:
            utils.log(f"Configuration error:\n{error}", 40)
            raise CommandError(f"Invalid configuration:\n{error}", returncode=EXIT_CONFIG)
        except DatasetMissing as error:
            utils.log(str(error), 40)
            raise CommandError(f"Dataset missing: {error}", returncode=EXIT_DATASET_MISSING)
        except SchemaError as error:
            utils.log(str(error), 40)
            raise CommandError(f"Incompatible metrics file: {error}", returncode=EXIT_CONFIG)
        except FedsimError as error:
            utils.log(f"{type(error).__name__}: {error}", 40)
            raise CommandError(f"{type(error).__name__}: {error}", returncode=EXIT_RUNTIME)

    def run(self, *args, **options):
        raise NotImplementedError

    # Validate referenced input files before any compute starts
    def check_files(self, **paths):
        missing = {name: [f"{path} does not exist."] for name, path in paths.items() if path is not None and not os.path.isfile(path)}
        if missing:
            raise ConfigError(missing)

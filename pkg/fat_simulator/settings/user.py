SECRET_KEY = "2=0s0wfln8^x)4!04ul075diacr-hccymz#qor!4+qha6lqsn@"

# Per-machine simulator settings, for example:
# FEDSIM_DATA_DIR = "/data/datasets"
# FEDSIM_WORKERS = 4

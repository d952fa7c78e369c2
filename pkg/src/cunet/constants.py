"""Provide constants for use throughout the package."""

SCRIPT_NAME = "cunet"

# Musdb18-style sources, in the order used for the condition vector: `z=[0,1,0,0]` selects the drums
DEFAULT_TASKS: tuple[str, ...] = ("vocals", "drums", "bass", "rest")
MIXTURE_STEM = "mixture"
STEM_SUFFIX = ".wav"

# Full-scale spectrogram settings. The Nyquist bin is dropped so that `window_size // 2` rows remain.
DEFAULT_SAMPLE_RATE = 8192
DEFAULT_WINDOW_SIZE = 1024
DEFAULT_HOP = 768
DEFAULT_PATCH_WIDTH = 128

# Encoder depths and their filter counts at the default configuration: 16, 32, ..., 512
DEFAULT_N_BLOCKS = 6
DEFAULT_BASE_FILTERS = 16
ENCODER_LEAKINESS = 0.2
DECODER_DROPOUT = 0.5
DECODER_DROPOUT_BLOCKS = 3
# Keras-style momentum of 0.99 for the running statistics is a torch momentum of 0.01
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.01

# Progressive training weights z and Y every this many instances
PROGRESSIVE_PERIOD = 5

# BSS-eval settings
DEFAULT_FILTER_LEN = 512
METRIC_CLIP_DB = 100.0
METRIC_FLOOR = 1e-12
PROJECTION_RIDGE = 1e-10
METRICS: tuple[str, ...] = ("sdr", "sir", "sar")

# Environment variable name holding the default dataset root
ENVVAR_NAME_DATA_ROOT = "CUNET_DATA_ROOT"

MANIFEST_NAME = "manifest.yaml"
CHECKPOINT_MAGIC = b"CUNETCKPT\n"
CHECKPOINT_FORMAT_VERSION = 1


# These help messages are shared between subcommands and specified here to stay DRY
HELP_MSG_CONFIG = """Path to an experiment config file (YAML). Values given on the command line take precedence over
    values in the file, which take precedence over the built-in preset."""
HELP_MSG_SEED = "Seed for every random draw of the run. Identical seeds give identical artifacts."
HELP_MSG_DATA_ROOT = f"""Dataset root directory holding `{MANIFEST_NAME}` and one directory per track. Can also be set
    with the `{ENVVAR_NAME_DATA_ROOT}` environment variable. The value given with this option takes precedence."""
HELP_MSG_OUT = "Output directory for the artifacts of this subcommand."

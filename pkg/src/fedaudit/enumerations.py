import enum

# Commitments
DIGEST_SIZE = 32            # bytes, SHA-256
LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x01"

# Selective testing
DEFAULT_PROBES = 2          # probes per stage, the smallest value the deposit bound allows
MIN_PROBES = 2
DEFAULT_LEARNING_RATE = 0.01

# Cheating workers add a uniform value in this range to each faked output
FAKE_DELTA_LOW = 0.5
FAKE_DELTA_HIGH = 1.5

# Ledger amounts are integer micro-units
MICRO_UNITS = 1_000_000

# Benchmarks
BENCH_REPETITIONS = 5
BENCH_WARMUP = 1
BENCH_COLUMNS = ["setting", "original", "integrity_baseline", "worker_compute", "worker_commit_overhead",
                 "monitor_test", "total", "config_hash"]
# Convolution tables vary one setting around input 128x128, 16 filters of 8x8, stride 2
CONV_BASE = {"alpha_X": 128, "n_F": 16, "alpha_F": 8, "delta": 2}
CONV_GRIDS = {
    "input_size": ("alpha_X", [16, 32, 64, 128, 256]),
    "filter_number": ("n_F", [4, 8, 16, 32]),
    "stride": ("delta", [1, 2, 4, 8]),
    "filter_size": ("alpha_F", [8, 16, 32, 64]),
}
# Fully-connected tables vary the input size at output 64, and the output size at input 4096
FC_GRIDS = {
    "input_size": ("l_X", [32, 64, 128, 256, 512, 1024, 2048, 4096], {"l_Y": 64}),
    "output_size": ("l_Y", [16, 32, 64, 128, 256, 512, 1024, 2048, 4096], {"l_X": 4096}),
}

# Detection and game grids
DETECTION_COLUMNS = ["n", "p", "m", "prob_paper", "prob_exact", "empirical", "bound", "config_hash"]
DEFAULT_DETECTION_GRID = [[100, 2, 0], [100, 2, 1], [100, 2, 10], [100, 2, 50], [100, 2, 90], [100, 100, 1]]
DEFAULT_TRIALS = 100_000
DEFAULT_GAME_N = [10, 100, 1000]
DEFAULT_GAME_P = [2, 3, 4, 5, 6]
DEFAULT_GAME_B = [0.0, 1.0, 10.0]

# Harness exit codes
EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_VIOLATION = 2


class ActivationKind(str, enum.Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


class CheatMode(str, enum.Enum):
    FAKE_OUTPUTS = "fake_outputs"
    FAKE_EVIDENCE = "fake_evidence"
    WRONG_RECORD = "wrong_record"
    SKIP_COMPUTATION = "skip_computation"


class Side(str, enum.Enum):
    """ Position of a sibling digest relative to the climbing node. """
    LEFT = "left"
    RIGHT = "right"


class WorkerStatus(str, enum.Enum):
    ACTIVE = "active"
    EVICTED = "evicted"


class TreeId(str, enum.Enum):
    """ Names of the commitment structures a worker builds for one stage. """
    BASIC_IN = "basic_in"
    BASIC_GRAD_OUT = "basic_grad_out"
    BASIC_OUT = "basic_out"
    X_LANDMARK = "x_landmark"
    Y_ROWS = "y_rows"
    GRAD_X = "grad_x"
    GRAD_F = "grad_f"
    GRAD_Y_ROWS = "grad_y_rows"
    X_GROUPS = "x_groups"
    Y_PRIME_ROWS = "y_prime_rows"
    X_SUBVECTORS = "x_subvectors"
    THETA_GROUPS = "theta_groups"
    GRAD_X_PRIME_ROWS = "grad_x_prime_rows"
    GRAD_Y_SUBVECTORS = "grad_y_subvectors"
    THETA_BWD_GROUPS = "theta_bwd_groups"
    GRAD_THETA_ROWS = "grad_theta_rows"
    LOSS = "loss"

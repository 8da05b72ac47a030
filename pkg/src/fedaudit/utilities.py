import hashlib
import json

import numpy as np

from .exceptions import ConfigError, DomainError


def test_finite(values, name="tensor"):
    """ Test a tensor to ensure that it is a finite float64 array.

    Arguments:
        values: array-like
        name: used in the error message

    Returns:
        np.ndarray of float64

    Raises:
        ValueError:
            Values contain NaN or infinity

    """
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values.")
    return arr


def test_fraction_counts(n, p, m):
    if n < 1:
        raise DomainError("n must be >= 1.")
    if not 0 <= p <= n:
        raise DomainError(f"p={p} is outside [0, {n}].")
    if not 0 <= m <= n:
        raise DomainError(f"m={m} is outside [0, {n}].")


def require_keys(obj, keys, where):
    """ Raises ConfigError naming the first key of ``keys`` missing from ``obj``. """
    for key in keys:
        if key not in obj:
            raise ConfigError(f"{where} is missing required key '{key}'.")


def derive_seed(seed, *labels):
    """ Deterministic 64-bit seed derived from a root seed and string or integer labels. """
    entropy = [int(seed)] + [int.from_bytes(hashlib.sha256(str(label).encode()).digest()[:8], "little")
                             for label in labels]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


def derive_key(seed, label):
    """ Deterministic 32-byte key for the simulated pre-shared keys. """
    return hashlib.sha256(f"{label}:{int(seed)}".encode()).digest()


def config_hash(obj):
    """ Short digest of a JSON-serialisable configuration, stamped on every output row. """
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]

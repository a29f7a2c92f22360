import numpy as np

# Fixed labels: changing the draws of one subsystem never shifts another's.
STREAM_LABELS = {
    "truth": 11,
    "measurements": 23,
    "ensemble_init": 37,
    "time_update": 41,
    "training": 53,
    "sampling": 67,
    "enkf": 79,
}


def stream(seed: int, label: str, *indices: int) -> np.random.Generator:
    """Generator for one subsystem, optionally split further by step index."""
    if label not in STREAM_LABELS:
        raise ValueError(f"Unknown random stream '{label}'. Use one of {sorted(STREAM_LABELS)}.")
    if seed < 0:
        raise ValueError("seed must be a non-negative integer")
    return np.random.default_rng([int(seed), STREAM_LABELS[label], *(int(i) for i in indices)])

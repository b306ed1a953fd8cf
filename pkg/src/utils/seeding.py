"""
Seed fan-out from one global seed to independent stage seeds.
"""

import hashlib


def stage_seed(global_seed: int, stage: str, index: int = 0) -> int:
    """
    Derive a reproducible 32-bit seed for one stage of an experiment.

    The rule is the first four bytes (big-endian) of
    sha256("{global_seed}:{stage}:{index}"), so any stage can be rerun alone.

    Args:
        global_seed: Experiment-wide seed
        stage: Stage name, e.g. "partition" or "ensemble"
        index: Cell or model index within the stage

    Returns:
        int: Seed in [0, 2**32)
    """
    digest = hashlib.sha256(f"{global_seed}:{stage}:{index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


"""Counter-based random streams keyed on integer tuples."""

import zlib

import numpy as np


def make_rng(seed, *keys):
    """Philox generator keyed on ``(seed, *keys)``.

    Streams for different keys are independent, so adding a key (a class, a
    slice) never perturbs draws made under another key.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def stable_key(text):
    """Process-independent integer key for a string (``hash`` is salted)."""
    return zlib.crc32(text.encode("utf-8"))


def rng_state_to_json(rng):
    """Serialize a Generator's bit-generator state into JSON-safe values."""

    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return {"__ndarray__": v.tolist(), "dtype": str(v.dtype)}
        if isinstance(v, np.integer):
            return int(v)
        return v

    return conv(rng.bit_generator.state)


def rng_from_json(state):
    def conv(v):
        if isinstance(v, dict):
            if "__ndarray__" in v:
                return np.array(v["__ndarray__"], dtype=v["dtype"])
            return {k: conv(x) for k, x in v.items()}
        return v

    state = conv(state)
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)

"""Counter-based Gaussian draws keyed by (seed, channel, level, node).

Each node owns an independent Philox stream selected through the counter, and
particles consume that stream in index order. Draws therefore do not depend on
how work is chunked or scheduled, and growing the particle count only appends
draws (the first N particles keep their values).
"""
import numpy as np

# channels keep independent random streams apart
CHANNEL_INIT = 0
CHANNEL_IDIO = 1
CHANNEL_TAG = 2
CHANNEL_DIRECTION = 3
CHANNEL_CONTROL = 4


def stream_key(seed, channel, level):
    """Philox key for the ``(seed, channel, level)`` substream."""
    if int(seed) < 0:
        raise ValueError("seed must be nonnegative")
    ss = np.random.SeedSequence([int(seed), int(channel), int(level)])
    return ss.generate_state(2, dtype=np.uint64)


def node_generator(key, node):
    counter = np.array([0, node, 0, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def normal_block(seed, channel, level, node, count, width):
    """Standard normals of shape ``(count, width)`` for particles ``0..count`` of one node.

    Parameters:
        seed: nonnegative integer run seed.
        channel: stream family (see CHANNEL_* constants).
        level: level key (steps to go for tree noise).
        node: node index within the level.
        count: number of particles.
        width: number of scalars drawn per particle.
    """
    key = stream_key(seed, channel, level)
    return node_generator(key, node).standard_normal((count, width))


def normal_nodes(seed, channel, level, j0, j1, count, width):
    """Stack of :func:`normal_block` draws for nodes ``j0..j1``: shape (j1-j0, count, width)."""
    key = stream_key(seed, channel, level)
    out = np.empty((j1 - j0, count, width))
    for j in range(j0, j1):
        out[j - j0] = node_generator(key, j).standard_normal((count, width))
    return out

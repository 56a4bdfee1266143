"""Apply a trained generator to whole low-dose volumes.

Inference uses the generator only.  Every slice is denoised from its
clamped d-slice neighborhood, the same rule training pairs use, so the
network sees the distribution it was trained on.  Output values are not
clipped; display windowing is the consumer's concern.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .errors import ConfigurationError, ProtocolError
from .network import Generator, SliceStack, generator_forward
from .phantoms import Volume


def _check_depth(generator: Generator, d: int):
    if d % 2 != 1 or d < 1 or generator.d != d:
        raise ConfigurationError(
            f"generator expects depth {generator.d}, requested depth {d}"
        )


def enhance_volume(generator: Generator, ld_volume: Volume, d: int, pad: bool = False) -> Volume:
    """Denoise every slice of a volume; dims are preserved.

    Slices are independent, so any processing order gives the same bytes.
    """
    _check_depth(generator, d)
    data = ld_volume.data
    half = d // 2
    n_slices = data.shape[0]
    out = np.empty(data.shape, dtype=np.float32)
    for i in range(n_slices):
        indices = np.clip(np.arange(i - half, i + half + 1), 0, n_slices - 1)
        stack = SliceStack(data[indices], center_index=i)
        out[i] = generator_forward(generator, stack, pad=pad).data
    return Volume(out, voxel_size=ld_volume.voxel_size, provenance="denoised",
                  meta=dict(ld_volume.meta))


def enhance_stream(generator: Generator, slices, d: int, pad: bool = False):
    """Denoise an index-ordered stream of (index, slice) pairs lazily.

    Slice i is emitted as soon as slice i + d//2 has arrived, from a
    rolling window that never holds more than d slices, so memory stays
    constant in the volume depth.  Yields SliceImage objects in order.
    """
    _check_depth(generator, d)
    half = d // 2
    window = deque()  # (index, data) covering [next_emit - half, latest]
    next_emit = 0
    expected = 0

    def emit(i, last_index):
        indices = np.clip(np.arange(i - half, i + half + 1), window[0][0], last_index)
        base = window[0][0]
        stack = SliceStack(
            np.stack([window[j - base][1] for j in indices]), center_index=i
        )
        return generator_forward(generator, stack, pad=pad)

    for index, data in slices:
        if index != expected:
            raise ProtocolError(f"expected slice {expected}, got {index}")
        expected += 1
        window.append((index, np.asarray(data)))
        while window and window[-1][0] >= next_emit + half:
            yield emit(next_emit, window[-1][0])
            next_emit += 1
            while window and window[0][0] < next_emit - half:
                window.popleft()
    # end of stream: remaining slices clamp to the last one received
    while next_emit < expected:
        yield emit(next_emit, expected - 1)
        next_emit += 1
        while window and window[0][0] < next_emit - half:
            window.popleft()

import os
from concurrent.futures import ThreadPoolExecutor

# Chunk boundaries never depend on the thread count, which keeps every
# per-voxel result bitwise identical for any --threads value.
CHUNK = 2048


def resolve_threads(threads=None):
    if threads is None:
        env = os.environ.get("NUQ_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    threads = int(threads)
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    return threads


def chunk_slices(n, chunk=CHUNK):
    return [slice(i, min(i + chunk, n)) for i in range(0, n, chunk)]


def map_chunks(func, n, threads=None, chunk=CHUNK):
    """Apply ``func(slice)`` to fixed-size chunks of ``range(n)``, in order."""
    slices = chunk_slices(n, chunk)
    threads = resolve_threads(threads)
    if threads == 1 or len(slices) <= 1:
        return [func(s) for s in slices]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, slices))

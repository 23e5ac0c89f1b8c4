from typing import Callable, Iterable, Sequence, TypeVar

from joblib import Parallel, delayed

from config import Config

T = TypeVar("T")
R = TypeVar("R")


def resolve_threads(n_threads: int | None) -> int:
    """Thread count for a job batch; None falls back to CSC_THREADS"""
    threads = Config.THREADS if n_threads is None else int(n_threads)
    return max(1, threads)


def map_groups(func: Callable[[T], R], items: Iterable[T], n_threads: int | None = 1) -> list[R]:
    """Apply func to every item, returning results in input order.

    One thread runs a plain loop. More threads dispatch through joblib's
    threading backend; each job only touches its own item, so results do not
    depend on the schedule.
    """
    items = list(items)
    threads = min(resolve_threads(n_threads), max(1, len(items)))
    if threads == 1:
        return [func(item) for item in items]
    return Parallel(n_jobs=threads, prefer="threads")(delayed(func)(item) for item in items)


def chunked(items: Sequence[T], n_chunks: int) -> list[Sequence[T]]:
    """Split a sequence into at most n_chunks contiguous slices"""
    n_chunks = max(1, min(n_chunks, len(items)))
    size, extra = divmod(len(items), n_chunks)
    chunks, start = [], 0
    for i in range(n_chunks):
        stop = start + size + (1 if i < extra else 0)
        chunks.append(items[start:stop])
        start = stop
    return chunks

"""Order-preserving parallel map."""

import os
from concurrent.futures import ThreadPoolExecutor


def resolve_workers(workers):
    if workers is None or workers == 1:
        return 1
    if workers <= 0:
        return os.cpu_count() or 1
    return int(workers)


def pmap(fn, items, workers=1):
    """``list(map(fn, items))``, optionally on a thread pool.

    Results come back in input order, so any reduction over them is
    independent of the worker count.
    """
    items = list(items)
    n = resolve_workers(workers)
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))

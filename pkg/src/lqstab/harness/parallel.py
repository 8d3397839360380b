"""Order-preserving process pool with an environment-configurable default size."""
import os
from concurrent.futures import ProcessPoolExecutor

from ..errors import ConfigurationError

WORKERS_ENV = "LQSTAB_WORKERS"


def resolve_workers(flag=None):
    """Worker count: the flag if given, else ``$LQSTAB_WORKERS``, else 1."""
    if flag is not None:
        value, source = flag, "--workers"
    else:
        raw = os.environ.get(WORKERS_ENV, "").strip()
        if not raw:
            return 1
        value, source = raw, WORKERS_ENV
    try:
        n = int(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{source} must be a positive integer, got {value!r}") from None
    if n < 1:
        raise ConfigurationError(f"{source} must be a positive integer, got {n}")
    return n


def pmap(fn, items, workers=1):
    """``[fn(x) for x in items]``, spread over ``workers`` processes when above 1."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunk))

"""Process-pool fan-out for independent jobs (replicates, ensemble members)."""

from concurrent.futures import ProcessPoolExecutor


def parallel_map(fn, items, jobs: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally over ``jobs`` worker processes.

    Results come back in input order, so callers reduce serially and stay
    deterministic regardless of scheduling.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))

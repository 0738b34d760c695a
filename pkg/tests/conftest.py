import time

SUITE_T0 = time.perf_counter()


def suite_elapsed() -> float:
    return time.perf_counter() - SUITE_T0

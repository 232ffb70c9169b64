# test_config.py

import os

from funcount.config import Settings, cpu_threads, load_settings, parallel_map, resolve_threads


def _restore_env(name, saved):
    if saved is None:
        os.environ.pop(name, None)
    else:
        os.environ[name] = saved


def test_threads_default_to_cpu_count():
    saved = os.environ.pop("FUNCOUNT_THREADS", None)
    try:
        assert Settings().threads == cpu_threads()
        assert resolve_threads() == cpu_threads()
        assert resolve_threads(3) == 3
        os.environ["FUNCOUNT_THREADS"] = "2"
        assert resolve_threads() == 2
        assert load_settings().threads == 2
    finally:
        _restore_env("FUNCOUNT_THREADS", saved)


def test_parallel_map_keeps_order():
    assert parallel_map(lambda x: x * x, range(20), threads=4) == [x * x for x in range(20)]
    assert parallel_map(lambda x: x + 1, [5], threads=None) == [6]


def main():
    test_threads_default_to_cpu_count()
    test_parallel_map_keeps_order()
    print("All config tests passed.")


if __name__ == "__main__":
    main()

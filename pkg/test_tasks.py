import threading

from tasks import chunked, map_groups, resolve_threads


def test_map_groups_keeps_input_order():
    assert map_groups(lambda x: x * x, range(10)) == [x * x for x in range(10)]
    assert map_groups(lambda x: x * x, range(10), n_threads=4) == [x * x for x in range(10)]


def test_single_thread_runs_inline():
    names = set(map_groups(lambda _: threading.current_thread().name, range(8), n_threads=1))
    assert names == {threading.current_thread().name}


def test_resolve_threads():
    assert resolve_threads(3) == 3
    assert resolve_threads(0) == 1
    assert resolve_threads(None) >= 1


def test_chunked_covers_everything():
    chunks = chunked(list(range(10)), 3)
    assert [len(c) for c in chunks] == [4, 3, 3]
    assert sum(chunks, []) == list(range(10))
    assert chunked([1, 2], 5) == [[1], [2]]

import numpy as np
from hypothesis import given, strategies as st

from spreadperc.rng import RngStream, as_stream, block_sizes, fold_tasks, label_key, run_tasks


def _square(x):
    return x * x


def test_streams_reproducible_and_distinct():
    a = RngStream(7).child("scan", 3).generator().random(4)
    b = RngStream(7).child("scan", 3).generator().random(4)
    c = RngStream(7).child("scan", 4).generator().random(4)
    assert (a == b).all() and not (a == c).any()
    assert as_stream(7) == RngStream(7)
    assert label_key("scan") == label_key("scan") != label_key("rw")


@given(st.integers(0, 10 ** 6), st.integers(1, 5000))
def test_block_sizes(n, block):
    bs = block_sizes(n, block)
    assert sum(bs) == n and all(0 < b <= block for b in bs)


def test_run_and_fold_preserve_order():
    xs = list(range(7))
    assert run_tasks(_square, xs, 1) == run_tasks(_square, xs, 2) == [x * x for x in xs]
    fold = lambda acc, r: acc + [r]
    assert fold_tasks(_square, xs, fold, [], 2) == [x * x for x in xs]
    total = fold_tasks(_square, xs, lambda a, r: a + r, 0, 1)
    assert total == sum(x * x for x in xs)


def test_stream_independence_rough():
    u = RngStream(1).child(0).generator().random(20_000)
    v = RngStream(1).child(1).generator().random(20_000)
    assert abs(np.corrcoef(u, v)[0, 1]) < 0.05

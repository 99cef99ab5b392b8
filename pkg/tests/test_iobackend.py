import logging

import numpy as np
import pytest

from diskgraph.iobackend import IoBatch, PageReader, read_pages


@pytest.fixture
def reader(small_world):
    r = PageReader.for_index(small_world.index)
    yield r
    r.close()


def test_fresh_reader_counts_nothing(reader):
    s = reader.io_stats()
    assert (s.pages, s.bytes, sum(s.histogram)) == (0, 0, 0)


def test_counters_after_sync_reads(reader):
    for p in range(5):
        reader.read_page_sync(p % reader.n_pages)
    s = reader.io_stats()
    assert s.pages == 5 and s.bytes == 5 * reader.page_size and sum(s.histogram) == 5
    assert s.bandwidth == pytest.approx(s.bytes / s.elapsed_s)


def test_page_zero_decodes_to_first_records(reader, small_world):
    idx = small_world.index
    recs = idx.decode_page(reader.read_page_sync(0))
    n_p = idx.n_p
    np.testing.assert_array_equal(recs["vec"], small_world.base.data[:n_p])
    for s in range(n_p):
        assert recs["nbrs"][s][:recs["cnt"][s]].tolist() == small_world.graph.neighbors(s).tolist()


def test_out_of_range_page(reader):
    with pytest.raises(OSError):
        reader.read_page_sync(reader.n_pages)
    with pytest.raises(OSError):
        reader.read_page_sync(-1)


def test_repeat_reads_identical(reader):
    assert reader.read_page_sync(3) == reader.read_page_sync(3)


def test_batch_completes_each_request_once(reader):
    b = reader.batch(4)
    b.submit([0, 1, 2, 2])
    done = b.drain()
    assert sorted(p for p, _ in done) == [0, 1, 2, 2]
    twos = [d for p, d in done if p == 2]
    assert twos[0] == twos[1]
    assert b.poll() == []


def test_batch_depth_is_enforced(reader):
    b = reader.batch(2)
    b.submit([0, 1])
    with pytest.raises(ValueError):
        b.submit([2])
    b.drain()


def test_interleaved_async_matches_sync(reader):
    pages = [int(p) for p in np.random.default_rng(0).integers(0, reader.n_pages, 100)]
    b = reader.batch(8)
    got, todo = [], list(pages)
    while todo or b.in_flight:
        room = b.max_depth - b.in_flight
        b.submit([todo.pop() for _ in range(min(room, len(todo)))])
        got.extend(b.poll())
    assert len(got) == 100
    for p, data in got:
        assert data == reader.read_page_sync(p)
    assert read_pages(reader, pages, reader.batch(8)) == {p: reader.read_page_sync(p) for p in set(pages)}


def test_failed_read_raises_from_poll(reader):
    b = IoBatch(reader, 3)
    b.submit([0, reader.n_pages + 5])
    got, errors = [], 0
    while b.in_flight or b._errors:
        try:
            got.extend(b.poll())
        except OSError:
            errors += 1
    assert [p for p, _ in got] == [0] and errors == 1


def test_buffered_mode_warns(small_world, caplog):
    with caplog.at_level(logging.WARNING):
        r = PageReader.for_index(small_world.index, direct_io=False)
    assert not r.direct_io and "direct I/O disabled" in caplog.text
    assert r.read_page_sync(0) == PageReader.for_index(small_world.index).read_page_sync(0)
    r.close()

import os

import numpy as np
import pytest
from scipy.stats import chisquare

from tools.errors import FormatError, InvalidTarget
from tools.replay_filter import (
    PROTOTYPE_CAPACITY,
    PROTOTYPE_FPR,
    BloomFilter,
    execute,
    insert,
    load_or_create,
    measure_fpr,
    query,
    size_for,
    theoretical_fpr,
)


def keys(prefix, n):
    return [f"{prefix}-{i}".encode() for i in range(n)]


class TestSizing:
    def test_prototype_target(self):
        m, k = size_for(PROTOTYPE_CAPACITY, PROTOTYPE_FPR)
        assert k == 13
        assert abs(m - 19.17e6) / 19.17e6 < 0.01
        # roughly 2.4 MB of bits
        assert 2.3e6 < (m + 7) // 8 < 2.5e6

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 2.0])
    def test_rate_outside_open_interval(self, p):
        with pytest.raises(InvalidTarget):
            size_for(1000, p)

    def test_needs_capacity(self):
        with pytest.raises(ValueError):
            size_for(0, 0.01)

    def test_theoretical_rate_at_design_load(self):
        m, k = size_for(10_000, 0.01)
        assert theoretical_fpr(m, k, 10_000) == pytest.approx(0.01, rel=0.1)


class TestBloomFilter:
    def test_no_false_negatives(self):
        f = BloomFilter.for_capacity(100_000, 1e-3, seeds=(11, 12))
        inserted = keys("k", 100_000)
        for x in inserted:
            insert(f, x)
        assert all(query(f, x) for x in inserted)

    def test_false_positive_rate_near_target(self):
        p = 0.01
        f = BloomFilter.for_capacity(10_000, p, seeds=(3, 4))
        for x in keys("in", 10_000):
            f.insert(x)
        rate = measure_fpr(f, keys("out", 100_000))
        assert p / 2 <= rate <= 2 * p

    def test_indices_are_uniform_over_bit_positions(self):
        f = BloomFilter(1024, 4, seeds=(21, 22))
        counts = np.zeros(f.m, dtype=np.int64)
        for x in keys("u", 100_000):
            np.add.at(counts, f.indices(x), 1)
        assert counts.sum() == 400_000
        assert chisquare(counts).pvalue > 0.01

    def test_empty_filter_rejects_nothing(self):
        f = BloomFilter.for_capacity(100, 0.01, seeds=(1, 2))
        assert b"anything" not in f
        assert measure_fpr(f, []) == 0.0

    def test_insert_is_idempotent(self):
        f = BloomFilter.for_capacity(100, 0.01, seeds=(1, 2))
        f.insert(b"m2")
        before = (f.bits.copy(), f.n_inserted)
        f.insert(b"m2")
        assert f.bits == before[0]
        assert f.n_inserted == before[1] == 1
        assert b"m2" in f

    def test_indices_stay_in_range(self):
        f = BloomFilter(97, 5, seeds=(5, 6))
        idx = f.indices(b"x")
        assert len(idx) == 5
        assert all(0 <= i < 97 for i in idx)

    def test_seed_validation(self):
        with pytest.raises(ValueError):
            BloomFilter(64, 2, seeds=(7, 7))
        with pytest.raises(ValueError):
            BloomFilter(0, 2, seeds=(1, 2))

    def test_saturation_flag(self, caplog):
        f = BloomFilter.for_capacity(10, 0.01, seeds=(1, 2))
        for x in keys("s", 10):
            f.insert(x)
        assert not f.saturated
        with caplog.at_level("WARNING"):
            for x in keys("t", 50):
                f.insert(x)
        assert f.saturated
        assert f.stats()["saturated"]
        assert sum("past design load" in r.message for r in caplog.records) == 1

    def test_stats(self):
        f = BloomFilter.for_capacity(1000, 0.01, seeds=(1, 2))
        for x in keys("a", 100):
            f.insert(x)
        stats = f.stats()
        assert stats["n_inserted"] == 100
        assert stats["seeds"] == [1, 2]
        assert 0 < stats["fill_ratio"] < 0.5
        assert stats["fill_ratio"] == f.popcount() / f.m


class TestSnapshots:
    def test_restore_answers_identically(self, tmp_path):
        f = BloomFilter.for_capacity(1000, 0.01, seeds=(9, 10))
        for x in keys("a", 500):
            f.insert(x)
        path = str(tmp_path / "filter.bin")
        size = f.snapshot(path)
        assert size == os.path.getsize(path)
        assert not os.path.exists(path + ".tmp")

        g = BloomFilter.restore(path)
        assert (g.m, g.k, g.seeds, g.n_inserted) == (f.m, f.k, f.seeds, f.n_inserted)
        assert g.bits == f.bits
        probes = keys("a", 500) + keys("b", 2000)
        assert [x in g for x in probes] == [x in f for x in probes]

    def test_corrupt_snapshots(self, tmp_path):
        raw = BloomFilter.for_capacity(100, 0.01, seeds=(1, 2)).to_bytes()
        with pytest.raises(FormatError):
            BloomFilter.from_bytes(b"JUNK" + raw[4:])
        with pytest.raises(FormatError):
            BloomFilter.from_bytes(raw[:-1])
        with pytest.raises(FormatError):
            BloomFilter.from_bytes(raw[:10])

    def test_load_or_create(self, tmp_path):
        path = str(tmp_path / "f.bin")
        fresh = load_or_create(path, n=100, p=0.01)
        assert fresh.n_inserted == 0
        fresh.insert(b"x")
        fresh.snapshot(path)
        assert load_or_create(path).query(b"x")


class TestActions:
    def test_create_stats_restore(self, tmp_path):
        path = str(tmp_path / "a.bin")
        target = str(tmp_path / "served" / "b.bin")
        made = execute("filter_create", {"path": path, "n": 1000, "p": 0.001})
        assert made["status"] == "success"
        assert made["k"] == 10
        assert made["n_inserted"] == 0

        stats = execute("filter_stats", {"path": path})
        assert stats["status"] == "success"
        assert stats["m"] == made["m"]

        restored = execute("filter_restore", {"path": path, "target": target})
        assert restored["status"] == "success"
        assert os.path.exists(target)

    def test_errors(self, tmp_path):
        assert execute("filter_stats", {})["status"] == "error"
        assert execute("filter_stats", {"path": str(tmp_path / "missing")})["status"] == "error"
        assert execute("filter_create", {"path": str(tmp_path / "x"), "p": 1.5})["status"] == "error"
        assert execute("filter_restore", {"path": "a"})["status"] == "error"
        assert execute("nope", {})["status"] == "error"

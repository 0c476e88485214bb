import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import toy_model
from gmdm.filter_bank import FilterBank, init_filters
from gmdm.gmm_core import MeanGrid
from gmdm.metrics_io import (
    ParseError,
    credible_interval,
    expert_bin_density,
    histogram_range,
    load_model,
    load_model_meta,
    marginal_histogram,
    nmse_kappa,
    read_csv,
    read_image,
    read_pgm,
    save_model,
    write_csv,
    write_image,
    write_pgm,
)
from gmdm.patch_model import PatchModel


def same_bits(a, b):
    return np.array_equal(np.asarray(a).view(np.uint64), np.asarray(b).view(np.uint64))


class TestModelFile:
    @given(st.integers(0, 2**32 - 1), st.sampled_from([(4, 3, 3), (9, 8, 5), (4, 2, 2)]))
    def test_roundtrip_bit_exact(self, tmp_path_factory, seed, dims):
        rng = np.random.default_rng(seed)
        a, J, L = dims
        m = toy_model(rng, a=a, J=J, L=L, gamma=rng.uniform(0.1, 3), sigma0=rng.uniform(0.01, 1),
                      logit_scale=10 ** rng.uniform(-3, 3))
        path = tmp_path_factory.mktemp("m") / "m.gmdm"
        save_model(m, path, {"seed": seed})
        back = load_model(path)
        assert same_bits(back.K, m.K) and same_bits(back.logits, m.logits)
        assert (back.grid.L, back.grid.gamma, back.grid.sigma0) == (m.grid.L, m.grid.gamma, m.grid.sigma0)
        assert load_model_meta(path) == {"seed": seed}

    def test_no_tmp_left_behind(self, tmp_path, small_model):
        save_model(small_model, tmp_path / "x.gmdm")
        assert [p.name for p in tmp_path.iterdir()] == ["x.gmdm"]

    def test_json_error_offset_in_bytes(self, tmp_path):
        p = tmp_path / "bad.gmdm"
        text = '{"é": }'
        p.write_text(text, encoding="utf-8")
        with pytest.raises(ParseError) as err:
            load_model(p)
        assert err.value.offset == len('{"é": '.encode())
        assert str(p) in str(err.value)

    def test_not_utf8(self, tmp_path):
        p = tmp_path / "bad.gmdm"
        p.write_bytes(b'{"a"\xff}')
        with pytest.raises(ParseError) as err:
            load_model(p)
        assert err.value.offset == 4

    @pytest.mark.parametrize(
        "edit",
        [
            lambda d: d.update(format="other"),
            lambda d: d.update(version=99),
            lambda d: d.pop("logits"),
            lambda d: d.update(J=5),
            lambda d: d.update(b=4),
            lambda d: d.update(gamma=-1.0),
        ],
    )
    def test_invalid_fields(self, tmp_path, small_model, edit):
        p = tmp_path / "m.gmdm"
        save_model(small_model, p)
        d = json.loads(p.read_text())
        edit(d)
        p.write_text(json.dumps(d))
        with pytest.raises(ParseError):
            load_model(p)

    def test_non_orthogonal_filters_rejected(self, tmp_path, small_model):
        p = tmp_path / "m.gmdm"
        save_model(small_model, p)
        d = json.loads(p.read_text())
        d["filters"][0][0] += 1.0
        p.write_text(json.dumps(d))
        with pytest.raises(ValueError):
            load_model(p)


class TestPgm:
    def test_known_bytes_8bit(self, tmp_path):
        p = tmp_path / "a.pgm"
        write_pgm(p, np.array([[0.0, 1.0, 0.5]]))
        assert p.read_bytes() == b"P5\n3 1\n255\n\x00\xff\x80"
        np.testing.assert_allclose(read_pgm(p), [[0.0, 1.0, 128 / 255]])

    def test_known_bytes_16bit(self, tmp_path):
        p = tmp_path / "a.pgm"
        write_pgm(p, np.array([[1.0], [0.0]]), bits=16)
        assert p.read_bytes() == b"P5\n1 2\n65535\n\xff\xff\x00\x00"
        np.testing.assert_array_equal(read_pgm(p), [[1.0], [0.0]])

    def test_comments_and_scale(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# made by hand\n2 1 # size\n15\n\x00\x0f")
        np.testing.assert_array_equal(read_pgm(p), [[0.0, 1.0]])
        write_pgm(p, np.array([[0.25]]), scale=2.0)
        assert p.read_bytes()[-1] == 128

    def test_16bit_exact_roundtrip(self, tmp_path):
        img = np.arange(65536, dtype=float).reshape(256, 256) / 65535
        p = tmp_path / "r.pgm"
        write_pgm(p, img, bits=16)
        np.testing.assert_array_equal(read_pgm(p), img)

    @pytest.mark.parametrize(
        "data,offset",
        [
            (b"P2\n1 1\n255\n\x00", 0),
            (b"P5\nx 1\n255\n\x00", 3),
            (b"P5\n2 2\n255\n\x00\x00", 13),
            (b"P5\n1 1\n70000\n\x00", 7),
            (b"P5\n1 1\n070000\n\x00", 7),
            (b"P5\n1 1\n10\n\x0b", 10),
        ],
    )
    def test_parse_errors(self, tmp_path, data, offset):
        p = tmp_path / "bad.pgm"
        p.write_bytes(data)
        with pytest.raises(ParseError) as err:
            read_pgm(p)
        assert err.value.offset == offset

    def test_write_rejects(self, tmp_path):
        for img, kw in ((np.zeros((2, 2)), dict(bits=12)), (np.zeros(3), {}), (np.full((1, 1), np.nan), {})):
            with pytest.raises(ValueError):
                write_pgm(tmp_path / "x.pgm", img, **kw)

    def test_png_through_pillow(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (5, 6)) / 255
        write_image(tmp_path / "x.png", img)
        np.testing.assert_array_equal(read_image(tmp_path / "x.png"), img)


def test_csv_roundtrip(tmp_path):
    rows = [[1, 0.1 + 0.2, "a"], [2, 1e-300, "b"]]
    write_csv(tmp_path / "t.csv", ["step", "loss", "tag"], rows)
    header, back = read_csv(tmp_path / "t.csv")
    assert header == ["step", "loss", "tag"]
    assert back == [[1.0, 0.1 + 0.2, "a"], [2.0, 1e-300, "b"]]


class TestMarginals:
    grid = MeanGrid(5, 1.0)

    def test_density_integrates_to_one(self, rng):
        P = rng.normal(0, 0.3, (5000, 4))
        h = marginal_histogram(P, np.array([1.0, -1.0, 0.0, 0.0]), 0.1, 50, rng, self.grid)
        assert np.sum(h.density * h.widths) == pytest.approx(1.0)
        half = histogram_range(self.grid, 2.0, 0.1)
        assert h.edges[0] == -half and h.edges[-1] == half

    def test_constant_patches_single_bin(self, rng):
        P = np.full((100, 4), 0.7)
        h = marginal_histogram(P, np.array([1.0, -1.0, 0.0, 0.0]), 0.0, 11, rng, self.grid)
        assert h.counts.max() == 100 and np.count_nonzero(h.counts) == 1

    def test_bins_validated(self, rng):
        with pytest.raises(ValueError):
            marginal_histogram(np.zeros((3, 4)), np.ones(4), 0.0, 9, rng, self.grid)

    def test_fixed_seed_reproducible(self):
        P = np.random.default_rng(0).random((100, 4))
        k = np.array([1.0, -1.0, 0.0, 0.0])
        a = marginal_histogram(P, k, 0.2, 20, np.random.default_rng(1), self.grid)
        b = marginal_histogram(P, k, 0.2, 20, np.random.default_rng(1), self.grid)
        np.testing.assert_array_equal(a.counts, b.counts)

    def test_credible_interval_trims_tails(self):
        from gmdm.metrics_io import MarginalHistogram

        h = MarginalHistogram(0, 0.0, np.arange(11.0), np.array([5, 0, 10, 20, 30, 20, 10, 0, 0, 5]))
        assert credible_interval(h, 0.04) == (0, 10)
        assert credible_interval(h, 0.06) == (2, 7)

    def test_expert_bin_density_normalised(self, rng):
        m = toy_model(rng, zero_mean=True, L=5)
        edges = np.linspace(-12, 12, 2001)
        assert np.sum(expert_bin_density(m, 1, 0.2, edges) * np.diff(edges)) == pytest.approx(1.0, abs=1e-9)


class TestNmse:
    def model(self):
        K = init_filters(2, seed=0).K
        return PatchModel(FilterBank(K), np.random.default_rng(1).normal(0, 1.5, (3, 3)), MeanGrid(3, 1.0))

    def histograms(self, m, s, n=200_000, bins=100):
        rng = np.random.default_rng(2)
        P = m.sample(0.0, rng, n)
        return [marginal_histogram(P, m.K[:, j], s, bins, rng, m.grid, j) for j in range(m.J)]

    @pytest.mark.parametrize("s", [0.0, 0.2])
    def test_self_consistency(self, s):
        m = self.model()
        assert nmse_kappa(m, self.histograms(m, s), 0.01)[s] < 1e-3

    def test_wrong_model_scores_worse(self):
        m = self.model()
        other = PatchModel(m.bank, -m.logits, m.grid)
        h = self.histograms(m, 0.0)
        assert nmse_kappa(other, h, 0.01)[0.0] > 10 * nmse_kappa(m, h, 0.01)[0.0]

    def test_kappa_validated(self):
        m = self.model()
        with pytest.raises(ValueError):
            nmse_kappa(m, self.histograms(m, 0.0, n=1000), 0.5)

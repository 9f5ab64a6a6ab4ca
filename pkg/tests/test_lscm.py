import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csgrid.errors import ConfigError, FormatError, ShapeError, TruncatedFileError, UnrecognizedFormatError
from csgrid.lscm import (AngularGrid, AntennaConfig, BeamPatternMatrix, build_beam_pattern, dbm_to_mw,
                         default_beam_pattern, dft_precoder, forward_rsrp, load_beam_pattern, mw_to_dbm,
                         save_beam_pattern, steering_vector)


def antenna(n_y=2, n_z=2, power=1.0, d=0.5, precoder=None, gain=None):
    precoder = dft_precoder(n_y, n_z) if precoder is None else precoder
    return AntennaConfig(power, precoder, n_y, n_z, d, d, 1.0, gain)


class TestSteeringVector:
    def test_broadside_is_all_ones(self):
        v = steering_vector(antenna(3, 4, d=0.7), (math.pi / 2, 0.0))
        np.testing.assert_allclose(v, np.ones(12), atol=1e-15)

    def test_single_element(self):
        np.testing.assert_allclose(steering_vector(antenna(1, 1, precoder=[[1.0]]), (0.3, 1.1)), [1.0])

    @given(st.floats(0, math.pi), st.floats(-math.pi, math.pi), st.integers(1, 5), st.integers(1, 5))
    def test_unit_modulus(self, theta, phi, n_y, n_z):
        v = steering_vector(antenna(n_y, n_z), (theta, phi))
        assert v.shape == (n_y * n_z,)
        np.testing.assert_allclose(np.abs(v), 1.0, atol=1e-12)

    def test_flattening_order(self):
        cfg = antenna(2, 3, d=0.5)
        theta, phi = 1.0, 0.4
        v = steering_vector(cfg, (theta, phi))
        for y in range(2):
            for z in range(3):
                phase = 2 * math.pi * (0.5 * y * math.sin(theta) * math.sin(phi) + 0.5 * z * math.cos(theta))
                assert v[y * 3 + z] == pytest.approx(np.exp(-1j * phase), abs=1e-14)

    def test_zero_wavelength_rejected(self):
        with pytest.raises(ConfigError):
            AntennaConfig(1.0, [[1.0]], 1, 1, 0.5, 0.5, 0.0)


class TestBeamPattern:
    def test_single_element_power_two(self):
        cfg = AntennaConfig(2.0, [[1.0]], 1, 1, 0.5, 0.5, 1.0, gain=np.ones(4))
        A = build_beam_pattern(cfg, AngularGrid.uniform(2, 2)).A
        np.testing.assert_allclose(A, 2.0 * np.ones((1, 4)))

    def test_power_is_linear(self):
        grid = AngularGrid.uniform(3, 5)
        a1 = build_beam_pattern(antenna(power=1.0), grid).A
        a2 = build_beam_pattern(antenna(power=2.0), grid).A
        np.testing.assert_allclose(a2, 2 * a1, rtol=1e-15)

    def test_default_shape_and_nonnegative(self):
        beam = default_beam_pattern()
        assert (beam.M, beam.N) == (32, 256)
        assert beam.A.min() >= 0
        assert np.linalg.matrix_rank(beam.A) == 32

    def test_precoder_row_mismatch(self):
        cfg = AntennaConfig(1.0, np.ones((3, 2)), 2, 2, 0.5, 0.5, 1.0)
        with pytest.raises(ShapeError):
            build_beam_pattern(cfg, AngularGrid.uniform(2, 2))

    def test_negative_gain_rejected(self):
        with pytest.raises(ConfigError):
            antenna(gain=[-1.0, 1.0])

    def test_grid_indexing_roundtrip(self):
        grid = AngularGrid.uniform(4, 6)
        for n in range(grid.N):
            assert grid.flat_index(*grid.unflatten(n)) == n


class TestForward:
    def test_identity(self):
        y_mw, y_dbm = forward_rsrp(np.eye(3), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(y_mw, [1.0, 2.0, 3.0])

    def test_dbm_definition(self):
        assert mw_to_dbm(np.array([100.0]))[0] == pytest.approx(20.0)

    def test_zero_caps_hits_floor(self):
        _, y_dbm = forward_rsrp(default_beam_pattern(2, 2, 2, 2), np.zeros(4), 1e-12)
        np.testing.assert_allclose(y_dbm, -120.0)

    def test_batch_matches_rows(self, rng):
        A = rng.random((5, 7))
        X = rng.random((4, 7))
        y_mw, _ = forward_rsrp(A, X)
        for i in range(4):
            np.testing.assert_allclose(y_mw[i], A @ X[i])

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            forward_rsrp(np.eye(3), np.ones(4))

    @given(st.floats(-100, 50))
    def test_dbm_roundtrip(self, v):
        assert mw_to_dbm(dbm_to_mw(np.array([v])))[0] == pytest.approx(v, abs=1e-9)


class TestBeamFile:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        A = rng.random((4, 9))
        save_beam_pattern(BeamPatternMatrix(A), tmp_path / "a.bin")
        loaded = load_beam_pattern(tmp_path / "a.bin")
        assert loaded.source == "loaded"
        assert loaded.A.tobytes() == A.tobytes()

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"XXXXX" + bytes(32))
        with pytest.raises(UnrecognizedFormatError):
            load_beam_pattern(tmp_path / "x.bin")

    def test_truncated(self, tmp_path, rng):
        save_beam_pattern(BeamPatternMatrix(rng.random((3, 3))), tmp_path / "a.bin")
        raw = (tmp_path / "a.bin").read_bytes()
        (tmp_path / "a.bin").write_bytes(raw[:-8])
        with pytest.raises(TruncatedFileError):
            load_beam_pattern(tmp_path / "a.bin")

    def test_negative_entries_rejected(self, tmp_path):
        save_beam_pattern(BeamPatternMatrix(np.array([[1.0, -1.0]])), tmp_path / "a.bin")
        with pytest.raises(FormatError):
            load_beam_pattern(tmp_path / "a.bin")

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lacim.numeric import LOG_STD_HI, LOG_STD_LO, RngStream
from lacim.scm import (
    EnvDataset,
    Intervention,
    ScmDims,
    ToyParams,
    build_scm,
    build_toy_spurious,
    domain_offset,
    export_dataset,
    import_dataset,
    sample_env,
    sample_interventional,
)


class TestBuild:
    def test_dims_invariant(self):
        with pytest.raises(ValueError):
            ScmDims(q_s=3, q_z=2, q_x=4)  # latents must not outnumber x
        ScmDims(q_s=2, q_z=2, q_x=4)  # equality is the stock setup

    def test_dims_domain_confounder_match(self):
        with pytest.raises(ValueError):
            ScmDims(q_d=2, q_c=3, q_x=16)

    def test_same_seed_same_scm(self):
        a = build_scm(3, m=5)
        b = build_scm(3, m=5)
        np.testing.assert_array_equal(a.a_mu, b.a_mu)
        np.testing.assert_array_equal(a.a_sig, b.a_sig)
        for pa, pb in zip(a.f_x_mu.params(), b.f_x_mu.params()):
            np.testing.assert_array_equal(pa.value, pb.value)

    def test_different_seed_differs(self):
        assert np.any(build_scm(3).a_mu != build_scm(4).a_mu)

    def test_env_count_validated(self):
        with pytest.raises(ValueError):
            build_scm(0, m=0)


class TestSampling:
    def test_domain_offset_zero_noise(self):
        np.testing.assert_array_equal(domain_offset(1, np.zeros((3, 2))), 10.0 * np.ones((3, 2)))
        np.testing.assert_array_equal(domain_offset(4, np.zeros((1, 2))), 40.0 * np.ones((1, 2)))

    def test_confounder_mean_tracks_environment(self):
        # E[c | env e] = 10 e with per-coordinate std sqrt(4 + 1)
        scm = build_scm(0, m=5)
        n = 100_000
        for e in (1, 3, 5):
            ds = sample_env(scm, e, n, RngStream(0, (1, e)))
            se = np.sqrt(5.0 / n)
            assert np.all(np.abs(ds.c.mean(axis=0) - 10.0 * e) < 3.0 * se), f"env {e}"

    def test_shapes_and_env_label(self):
        scm = build_scm(1, m=3)
        ds = sample_env(scm, 2, 17, RngStream(0, 0))
        assert ds.x.shape == (17, 4) and ds.y.shape == (17, 2)
        assert ds.s.shape == (17, 2) and ds.z.shape == (17, 2) and ds.c.shape == (17, 2)
        assert ds.env == 2 and ds.n == 17

    def test_env_out_of_range(self):
        scm = build_scm(1, m=3)
        with pytest.raises(ValueError):
            sample_env(scm, 0, 5, RngStream(0, 0))
        with pytest.raises(ValueError):
            sample_env(scm, 4, 5, RngStream(0, 0))

    def test_deterministic_given_stream(self):
        scm = build_scm(5, m=5)
        a = sample_env(scm, 2, 50, RngStream(7, 1))
        b = sample_env(scm, 2, 50, RngStream(7, 1))
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)

    def test_latent_params_formula(self):
        scm = build_scm(2, m=5)
        c = np.array([[1.5, -2.0], [0.0, 0.5]])
        mean, log_std = scm.latent_params(c)
        np.testing.assert_allclose(mean, c @ scm.a_mu, rtol=1e-15)
        np.testing.assert_allclose(log_std, np.clip(c @ scm.a_sig, LOG_STD_LO, LOG_STD_HI), rtol=1e-15)

    def test_log_std_clamped_for_extreme_confounder(self):
        scm = build_scm(2, m=5)
        _, log_std = scm.latent_params(np.array([[1e6, 1e6]]))
        assert np.all(log_std <= LOG_STD_HI) and np.all(log_std >= LOG_STD_LO)

    def test_noise_free_observation_is_deterministic(self):
        scm = build_scm(3, m=5)
        ds = sample_env(scm, 1, 200, RngStream(1, 2), obs_noise=False)
        mu_x, _ = scm.observation_params(ds.s, ds.z)
        mu_y, _ = scm.outcome_params(ds.s)
        np.testing.assert_array_equal(ds.x, mu_x)
        np.testing.assert_array_equal(ds.y, mu_y)

    def test_all_finite(self):
        scm = build_scm(11, m=5)
        for e in range(1, 6):
            ds = sample_env(scm, e, 500, RngStream(3, e))
            for block in (ds.x, ds.y, ds.s, ds.z, ds.c):
                assert np.all(np.isfinite(block))


class TestInterventional:
    def test_do_mean_matches_mechanism(self):
        # interventional mean of x equals the conditional mean given the same
        # latents, which is just the shared mechanism; 4 sigma MC band
        scm = build_scm(4, m=5)
        s_star = np.array([0.5, -1.0])
        z_star = np.array([2.0, 0.3])
        n = 100_000
        x, y = sample_interventional(scm, Intervention(s=s_star, z=z_star), n, RngStream(0, 9))
        mu_x, log_std_x = scm.observation_params(s_star.reshape(1, -1), z_star.reshape(1, -1))
        mu_y, log_std_y = scm.outcome_params(s_star.reshape(1, -1))
        tol_x = 4.0 * np.exp(log_std_x[0]) / np.sqrt(n)
        tol_y = 4.0 * np.exp(log_std_y[0]) / np.sqrt(n)
        assert np.all(np.abs(x.mean(axis=0) - mu_x[0]) < tol_x)
        assert np.all(np.abs(y.mean(axis=0) - mu_y[0]) < tol_y)

    def test_outcome_only_intervention(self):
        scm = build_scm(4, m=5)
        x, y = sample_interventional(scm, Intervention(s=np.array([0.1, 0.2])), 10, RngStream(0, 0))
        assert x is None and y.shape == (10, 2)

    def test_wrong_width_rejected(self):
        scm = build_scm(4, m=5)
        with pytest.raises(ValueError):
            sample_interventional(scm, Intervention(s=np.zeros(3)), 5, RngStream(0, 0))


class TestToy:
    def test_alignment_fraction_matches_strength(self):
        train, test = build_toy_spurious(0, n_per_env=20_000, n_test=20_000)
        for ds, rho in zip(train, (0.95, 0.99)):
            y_sign = 2.0 * ds.y - 1.0
            frac = float(np.mean(ds.c[:, 0] == y_sign))
            assert abs(frac - rho) < 3.0 * np.sqrt(rho * (1 - rho) / ds.n) + 1e-3
        y_sign = 2.0 * test.y - 1.0
        frac = float(np.mean(test.c[:, 0] == y_sign))
        assert abs(frac - 0.1) < 0.01

    def test_class_conditional_means(self):
        params = ToyParams()
        train, _ = build_toy_spurious(1, n_per_env=50_000, params=params)
        ds = train[0]
        pos = ds.s[ds.y == 1].mean(axis=0)
        neg = ds.s[ds.y == 0].mean(axis=0)
        assert np.all(np.abs(pos - params.s_mean) < 0.05)
        assert np.all(np.abs(neg + params.s_mean) < 0.05)
        # z's class-conditional mean is attenuated by the alignment rate rho:
        # E[z | y] = (2 rho - 1) * z_mean * sign(y)
        zpos = ds.z[ds.y == 1].mean(axis=0)
        expected = (2 * 0.95 - 1.0) * params.z_mean
        assert np.all(np.abs(zpos - expected) < 0.06)

    def test_labels_binary_and_balanced(self):
        train, test = build_toy_spurious(2, n_per_env=10_000)
        for ds in train + [test]:
            assert set(np.unique(ds.y)) <= {0, 1}
            assert abs(ds.y.mean() - 0.5) < 0.03

    def test_env_labels(self):
        train, test = build_toy_spurious(0, m=2, n_per_env=10, n_test=10)
        assert [ds.env for ds in train] == [1, 2] and test.env == 3

    def test_strength_validation(self):
        with pytest.raises(ValueError):
            build_toy_spurious(0, correlation_strengths=(0.95, 1.2))
        with pytest.raises(ValueError):
            build_toy_spurious(0, m=3, correlation_strengths=(0.9, 0.9))

    def test_deterministic(self):
        a_train, a_test = build_toy_spurious(7, n_per_env=64, n_test=64)
        b_train, b_test = build_toy_spurious(7, n_per_env=64, n_test=64)
        np.testing.assert_array_equal(a_train[0].x, b_train[0].x)
        np.testing.assert_array_equal(a_test.y, b_test.y)


class TestCsvRoundTrip:
    def test_regression_bitwise(self, tmp_path):
        scm = build_scm(6, m=5)
        ds = sample_env(scm, 3, 40, RngStream(2, 0))
        path = tmp_path / "env3.csv"
        export_dataset(ds, path)
        back = import_dataset(path)
        for name in ("x", "y", "s", "z", "c"):
            assert getattr(ds, name).tobytes() == getattr(back, name).tobytes(), name
        assert back.env == 3

    def test_header_layout(self, tmp_path):
        scm = build_scm(6, m=5)
        ds = sample_env(scm, 1, 2, RngStream(2, 1))
        path = tmp_path / "env.csv"
        export_dataset(ds, path)
        header = path.read_text().splitlines()[0]
        assert header == "x0,x1,x2,x3,y0,y1,s0,s1,z0,z1,c0,c1,env"

    def test_classification_roundtrip(self, tmp_path):
        train, _ = build_toy_spurious(3, n_per_env=25)
        path = tmp_path / "toy.csv"
        export_dataset(train[0], path)
        back = import_dataset(path, classification=True)
        np.testing.assert_array_equal(back.y, train[0].y)
        assert back.y.dtype == np.int64
        assert back.x.tobytes() == train[0].x.tobytes()

    def test_empty_dataset_roundtrip(self, tmp_path):
        dims = ScmDims()
        ds = EnvDataset(
            x=np.zeros((0, dims.q_x)),
            y=np.zeros((0, dims.q_y)),
            s=np.zeros((0, dims.q_s)),
            z=np.zeros((0, dims.q_z)),
            c=np.zeros((0, dims.q_c)),
            env=1,
        )
        path = tmp_path / "empty.csv"
        export_dataset(ds, path)
        back = import_dataset(path)
        assert back.n == 0 and back.x.shape == (0, 4)

    def test_wrong_column_count_names_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x0,y0,s0,z0,c0,env\n1,2,3,4,5,1\n1,2,3\n")
        with pytest.raises(ValueError, match="row 3"):
            import_dataset(path)

    def test_bad_float_names_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x0,y0,s0,z0,c0,env\n1,2,oops,4,5,1\n")
        with pytest.raises(ValueError, match="row 2"):
            import_dataset(path)

    def test_missing_block_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x0,y0,s0,c0,env\n")
        with pytest.raises(ValueError, match="z"):
            import_dataset(path)

    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 7))
    @settings(max_examples=20, deadline=None)
    def test_roundtrip_random_magnitudes(self, tmp_path_factory, seed, n):
        gen = np.random.default_rng(seed)
        scales = 10.0 ** gen.uniform(-200, 200, size=(n, 1))
        ds = EnvDataset(
            x=gen.normal(size=(n, 2)) * scales,
            y=gen.normal(size=(n, 1)),
            s=gen.normal(size=(n, 1)),
            z=gen.normal(size=(n, 1)),
            c=gen.normal(size=(n, 1)),
            env=1,
        )
        path = tmp_path_factory.mktemp("rt") / "ds.csv"
        export_dataset(ds, path)
        back = import_dataset(path)
        assert back.x.tobytes() == ds.x.tobytes()

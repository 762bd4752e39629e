import numpy as np
import pytest

from nacnet.autodiff import Tape, Tensor
from nacnet.errors import IncompatibleConfig, InsufficientPoints, IoError, VersionMismatch
from nacnet.network import (
    ForwardOptions,
    ModelConfig,
    ModelParams,
    forward_on_tape,
    init_params,
    load_params,
    nac_block,
    nacnet_forward,
    noise_head_names,
    save_params,
    set_layer,
)
from helpers import rng_for

CFG = ModelConfig.desk(dtype="float64")


@pytest.fixture(scope="module")
def params():
    return init_params(CFG, seed=11)


def random_input(rng, n=32, dim=4, dtype=np.float64):
    return rng.uniform(-1.0, 1.0, (n, dim)).astype(dtype)


class TestSetLayer:
    def test_singleton_mean(self):
        rng = rng_for(600)
        t = Tape()
        f = Tensor(rng.standard_normal((1, 5)))
        elem = Tensor(rng.standard_normal((5, 3)))
        agg = Tensor(rng.standard_normal((5, 3)))
        bias = Tensor(rng.standard_normal((1, 3)))
        out = set_layer(t, f, elem, agg, bias)
        expected = f.data @ (elem.data + agg.data) + bias.data
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_zero_aggregate_is_elementwise(self):
        rng = rng_for(601)
        t = Tape()
        f = Tensor(rng.standard_normal((6, 5)))
        elem = Tensor(rng.standard_normal((5, 3)))
        bias = Tensor(np.zeros((1, 3)))
        out = set_layer(t, f, elem, Tensor(np.zeros((5, 3))), bias)
        np.testing.assert_allclose(out.data, f.data @ elem.data, rtol=1e-12)

    def test_permutation_equivariance_bitwise(self):
        rng = rng_for(602)
        f = rng.standard_normal((30, 5))
        elem = Tensor(rng.standard_normal((5, 3)))
        agg = Tensor(rng.standard_normal((5, 3)))
        bias = Tensor(rng.standard_normal((1, 3)))
        perm = rng.permutation(30)
        base = set_layer(Tape(), Tensor(f), elem, agg, bias).data
        permuted = set_layer(Tape(), Tensor(f[perm]), elem, agg, bias).data
        np.testing.assert_allclose(permuted, base[perm], atol=1e-13)


class TestNacBlock:
    def test_mute_noise_identity(self, params):
        rng = rng_for(610)
        x = Tensor(random_input(rng))
        out = nac_block(Tape(), x, None, params, 0, mute_noise=True)
        assert out.x_hat is x
        assert out.delta is None

    def test_zero_init_heads(self, params):
        rng = rng_for(611)
        x = Tensor(random_input(rng))
        out = nac_block(Tape(), x, None, params, 0)
        np.testing.assert_array_equal(out.y_hat.data, 0.5)
        np.testing.assert_array_equal(out.w.data, 0.0)
        np.testing.assert_array_equal(out.delta.data, 0.0)

    def test_permutation_equivariance(self, params):
        rng = rng_for(612)
        x = random_input(rng, n=40)
        perm = rng.permutation(40)
        base = nac_block(Tape(), Tensor(x), None, params, 1)
        permuted = nac_block(Tape(), Tensor(x[perm]), None, params, 1)
        np.testing.assert_allclose(permuted.latent.data, base.latent.data[perm], atol=1e-10)
        np.testing.assert_allclose(permuted.y_hat.data, base.y_hat.data[perm], atol=1e-12)

    def test_muted_noise_head_gets_zero_gradient(self, params):
        rng = rng_for(613)
        tape = Tape()
        x = Tensor(random_input(rng, n=16))
        fwd = forward_on_tape(tape, x, params, ForwardOptions(mute_noise=True))
        loss = tape.sum(tape.square(fwd.model))
        noise_params = [params.tensors[n] for n in noise_head_names(CFG)]
        grads = tape.backward(loss, params=noise_params)
        assert all(not g.any() for g in grads.values())


class TestForward:
    def test_too_few_points(self, params):
        rng = rng_for(620)
        with pytest.raises(InsufficientPoints):
            nacnet_forward(random_input(rng, n=7), params)

    def test_permutation_invariance_of_model(self, params):
        rng = rng_for(621)
        x = random_input(rng, n=50)
        base = nacnet_forward(x, params)
        for _ in range(3):
            perm = rng.permutation(50)
            out = nacnet_forward(x[perm], params)
            diff = min(
                np.abs(out.e_vec - base.e_vec).max(),
                np.abs(out.e_vec + base.e_vec).max(),
            )
            assert diff < 1e-6
            np.testing.assert_array_equal(out.y_hat, base.y_hat[perm])
            np.testing.assert_array_equal(out.x_hat, base.x_hat[perm])

    def test_duplication_invariance(self, params):
        rng = rng_for(622)
        x = random_input(rng, n=24)
        base = nacnet_forward(x, params)
        doubled = nacnet_forward(np.concatenate([x, x]), params)
        assert np.abs(doubled.e_vec - base.e_vec).max() < 1e-6
        np.testing.assert_allclose(doubled.c[:24] * 2.0, base.c, rtol=1e-6)

    def test_confidences_sum_to_one(self, params):
        rng = rng_for(623)
        out = nacnet_forward(random_input(rng, n=40), params)
        assert abs(out.c.sum() - 1.0) < 1e-6
        assert (out.c >= 0).all()
        assert not out.fallback_uniform

    def test_x_hat_matches_delta(self, params):
        rng = rng_for(624)
        x = random_input(rng, n=20)
        out = nacnet_forward(x, params)
        np.testing.assert_array_equal(out.x_hat, x - out.delta)

    def test_per_block_outputs(self, params):
        rng = rng_for(625)
        out = nacnet_forward(
            random_input(rng, n=20), params, ForwardOptions(all_blocks=True)
        )
        assert len(out.per_block) == 3
        np.testing.assert_allclose(out.per_block[-1]["e_vec"], out.e_vec, atol=1e-12)

    def test_pruning_halves_per_block(self, params):
        rng = rng_for(626)
        x = random_input(rng, n=64)
        out = nacnet_forward(x, params, ForwardOptions(prune="halve-per-block"))
        # 64 -> 32 -> 16 survivors feed the final head.
        assert np.count_nonzero(out.c) == 16
        assert out.c.sum() == pytest.approx(1.0, abs=1e-6)
        assert out.y_hat.shape == (64,)

    def test_line_head(self):
        cfg = ModelConfig.desk(head="line2d", dtype="float64")
        line_params = init_params(cfg, seed=3)
        rng = rng_for(627)
        out = nacnet_forward(rng.uniform(-1, 1, (30, 2)), line_params)
        assert out.e_vec.shape == (3,)
        assert np.hypot(out.line[0], out.line[1]) == pytest.approx(1.0, rel=1e-9)

    def test_float32_default_runs(self):
        cfg = ModelConfig.desk()
        p32 = init_params(cfg, seed=5)
        rng = rng_for(628)
        out = nacnet_forward(rng.uniform(-1, 1, (16, 4)), p32)
        assert out.e_vec.dtype == np.float32


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, params):
        path = tmp_path / "model.nacn"
        save_params(path, params, extra={"trained_stage": "1"})
        loaded, extra = load_params(path)
        assert extra == {"trained_stage": "1"}
        second = tmp_path / "model2.nacn"
        save_params(second, loaded, extra=extra)
        assert path.read_bytes() == second.read_bytes()

    def test_float32_values_survive_exactly(self, tmp_path):
        cfg = ModelConfig.desk()
        p = init_params(cfg, seed=9)
        path = tmp_path / "m.nacn"
        save_params(path, p)
        loaded, _ = load_params(path)
        for name, t in p.tensors.items():
            np.testing.assert_array_equal(loaded.tensors[name].data, t.data)

    def test_width_mismatch_rejected(self, tmp_path):
        p64 = init_params(ModelConfig.desk(), seed=1)
        path = tmp_path / "m.nacn"
        save_params(path, p64)
        raw = bytearray(path.read_bytes())
        # Corrupt the width entry in the config block.
        idx = raw.find(b"width=64")
        raw[idx : idx + 8] = b"width=32"
        path.write_bytes(bytes(raw))
        with pytest.raises(IncompatibleConfig):
            load_params(path)

    def test_version_mismatch(self, tmp_path):
        p = init_params(ModelConfig.desk(), seed=1)
        path = tmp_path / "m.nacn"
        save_params(path, p)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatch):
            load_params(path)

    def test_truncated_file(self, tmp_path):
        p = init_params(ModelConfig.desk(), seed=1)
        path = tmp_path / "m.nacn"
        save_params(path, p)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(IoError):
            load_params(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            load_params(tmp_path / "absent.nacn")

import numpy as np
import pytest

from ppmcount.autodiff import Tape, Tensor, backward, gradient_check
from ppmcount.confmap import multi_stage_loss
from ppmcount.network import Model, NetworkConfig, image_tensor, layer_specs, load_model, parameter_count, save_model

TINY = NetworkConfig(input_size=16, stages=2, backbone_widths=(2, 3, 4), ppm_scales=(1, 2),
                     ppm_channels=2, stage1_widths=(3, 4), refine_width=3)
SMALL = NetworkConfig(input_size=64, stages=4, backbone_widths=(4, 4, 8), ppm_channels=4,
                      stage1_widths=(8, 8), refine_width=4)


def images(n, size, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(n, size, size, 3), dtype=np.uint8)


class TestConfig:
    def test_defaults(self):
        cfg = NetworkConfig()
        assert (cfg.input_size, cfg.stages, cfg.ppm_out_channels, cfg.map_size) == (512, 4, 2304, 64)

    def test_text_round_trip(self):
        assert NetworkConfig.from_text(SMALL.to_text()) == SMALL

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            NetworkConfig.from_text("colour=3\n")

    @pytest.mark.parametrize("kwargs", [dict(stages=0), dict(input_size=60), dict(refine_kernel=4),
                                        dict(input_size=40), dict(ppm_scales=(2, 1))])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            NetworkConfig(**kwargs)

    def test_stage2_input_channels(self):
        specs = {name: cin for name, cin, _, _ in layer_specs(NetworkConfig())}
        assert specs["stage2.conv1"] == 256 + 4 * 512 + 1

    def test_parameter_count_matches_model(self):
        m = Model(SMALL)
        assert parameter_count(SMALL) == sum(p.data.size for p in m.params.values())


class TestShapes:
    def test_toy_backbone(self):
        m = Model(NetworkConfig(input_size=64, backbone_widths=(4, 4, 256), ppm_channels=4,
                                stage1_widths=(4, 4), refine_width=4))
        assert m.backbone_forward(image_tensor(images(1, 64))).shape == (1, 256, 8, 8)

    def test_ppm_minimum_size_and_channels(self):
        cfg = NetworkConfig(input_size=48, backbone_widths=(2, 2, 5), ppm_channels=3,
                            stage1_widths=(2, 2), refine_width=2)
        m = Model(cfg)
        out = m.ppm_forward(Tensor(np.random.default_rng(0).normal(size=(2, 5, 6, 6))))
        assert out.shape == (2, 5 + 4 * 3, 6, 6)
        with pytest.raises(ValueError):
            m.ppm_forward(Tensor(np.zeros((1, 5, 5, 5))))

    def test_ppm_constant_input_is_spatially_constant(self):
        m = Model(NetworkConfig(input_size=48, backbone_widths=(2, 2, 5), ppm_channels=3,
                                stage1_widths=(2, 2), refine_width=2))
        feats = np.broadcast_to(np.arange(5.0)[None, :, None, None], (1, 5, 6, 6)).copy()
        out = m.ppm_forward(Tensor(feats)).data
        assert np.allclose(out, out[:, :, :1, :1])

    def test_forward_maps(self):
        maps = Model(SMALL)(image_tensor(images(2, 64)))
        assert len(maps) == 4
        for c in maps:
            assert c.shape == (2, 1, 8, 8)
            assert np.all((c.data > 0) & (c.data < 1))

    def test_single_stage(self):
        cfg = NetworkConfig(**{**SMALL.__dict__, "stages": 1})
        assert len(Model(cfg)(image_tensor(images(1, 64)))) == 1

    def test_stage_argument_checks(self):
        m = Model(SMALL)
        feats = Tensor(np.zeros((1, SMALL.ppm_out_channels, 8, 8)))
        with pytest.raises(ValueError):
            m.stage_forward(2, feats)
        with pytest.raises(ValueError):
            m.stage_forward(5, feats, feats)

    def test_bad_image(self):
        with pytest.raises(ValueError):
            Model(SMALL).backbone_forward(Tensor(np.zeros((1, 3, 60, 60))))


class TestBehaviour:
    def test_deterministic(self):
        x = image_tensor(images(1, 64))
        a = [c.data for c in Model(SMALL, seed=3)(x)]
        b = [c.data for c in Model(SMALL, seed=3)(x)]
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)

    def test_stage_causality(self):
        x = image_tensor(images(1, 64))
        m = Model(SMALL)
        before = [c.data.copy() for c in m(x)]
        m.params["stage3.conv2.w"].data += 0.5
        after = [c.data for c in m(x)]
        for t in (0, 1):
            np.testing.assert_array_equal(before[t], after[t])
        assert not np.array_equal(before[2], after[2])

    def test_every_stage_reaches_backbone(self):
        m = Model(TINY, seed=1)
        x = image_tensor(images(2, 16))
        for t in range(TINY.stages):
            with Tape():
                maps = m(x)
                loss = multi_stage_loss([maps[t]], [np.full((2, 1, 2, 2), 0.5)])
            backward(loss)
            g = m.params["backbone.conv1_1.w"].grad
            assert g is not None and np.abs(g).sum() > 0
            for p in m.params.values():
                p.grad = None

    def test_full_model_gradient_check(self):
        m = Model(TINY, seed=2)
        x = image_tensor(images(2, 16, seed=5))
        rng = np.random.default_rng(0)
        for name, p in m.params.items():
            if name.endswith(".b"):  # zero biases put dead units exactly on the relu kink
                p.data = rng.normal(0.0, 0.1, size=p.shape)
        targets = [rng.random((2, 1, 2, 2)) for _ in range(TINY.stages)]

        def loss_of(_):
            return multi_stage_loss(m(x), targets)

        worst = 0.0
        for name, p in m.params.items():
            coords = rng.choice(p.data.size, size=min(6, p.data.size), replace=False)
            worst = max(worst, gradient_check(loss_of, p, 1e-5, coords))
        assert worst < 1e-4


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        m = Model(SMALL, seed=4)
        save_model(m, tmp_path / "m.pkc")
        assert (tmp_path / "m.cfg").exists()
        back = load_model(tmp_path / "m.pkc")
        assert back.config == SMALL
        for k, v in m.params.items():
            np.testing.assert_array_equal(v.data, back.params[k].data)
        x = image_tensor(images(1, 64))
        np.testing.assert_array_equal(m(x)[-1].data, back(x)[-1].data)

    def test_config_mismatch_names_shapes(self, tmp_path):
        save_model(Model(SMALL), tmp_path / "m.pkc")
        other = NetworkConfig(**{**SMALL.__dict__, "refine_width": 5})
        (tmp_path / "m.cfg").write_text(other.to_text())
        with pytest.raises(ValueError, match="checkpoint/config mismatch.*shape"):
            load_model(tmp_path / "m.pkc")


@pytest.mark.slow
class TestFullSize:
    def test_backbone_512(self):
        m = Model(NetworkConfig())
        assert m.backbone_forward(image_tensor(images(1, 512))).shape == (1, 256, 64, 64)

import numpy as np
import pytest

from splatstream.anchors import init_hierarchy
from splatstream.checkpoint import CheckpointError, load_model, save_model
from splatstream.decoder import SeparateMLPs, SharedMLP
from splatstream.rasterizer import RenderSettings
from splatstream.residuals import LatentDecoders
from splatstream.trainer import SceneModel

from conftest import make_camera


def build_model(rng, k=6, separate=False, with_decoders=False):
    h = init_hierarchy(rng.uniform(-1, 1, (150, 3)), (6.0, 1.5), delta=0.8, k=k)
    h.config.l_max = h.config.levels - 1
    # make the state non-trivial
    h.features[:] = rng.normal(0, 0.2, h.features.shape).astype(np.float32)
    h.dynamic[rng.random(len(h)) < 0.2] = True
    h.promoted[rng.random(len(h)) < 0.3] = True
    mlp_cls = SeparateMLPs if separate else SharedMLP
    model = SceneModel(hierarchy=h, mlp=mlp_cls(k=k, seed=9))
    if with_decoders:
        model.decoders = LatentDecoders.create(32, k, seed=4)
    model.snap_to_storage()
    return model


class TestCheckpointRoundTrip:
    @pytest.mark.parametrize("separate,with_dec", [
        (False, False), (False, True), (True, False), (True, True),
    ])
    def test_round_trip_exact(self, rng, tmp_path, separate, with_dec):
        model = build_model(rng, separate=separate, with_decoders=with_dec)
        path = tmp_path / "model.slod"
        save_model(model, path)
        back = load_model(path)
        h1, h2 = model.hierarchy, back.hierarchy
        assert np.array_equal(h1.ids, h2.ids)
        assert np.array_equal(h1.levels, h2.levels)
        assert np.array_equal(h1.centers, h2.centers)
        assert np.array_equal(h1.features, h2.features)
        assert np.array_equal(h1.offsets, h2.offsets)
        assert np.array_equal(h1.raw_scales, h2.raw_scales)
        assert np.array_equal(h1.dynamic, h2.dynamic)
        assert np.array_equal(h1.promoted, h2.promoted)
        for key in ("delta", "d_max", "d_min", "levels", "l_max", "k",
                    "grad_threshold", "delta_l", "opacity_prune"):
            assert getattr(h1.config, key) == getattr(h2.config, key)
        for k1, v1 in model.mlp.params().items():
            assert np.array_equal(v1, back.mlp.params()[k1]), k1
        if with_dec:
            assert np.array_equal(model.decoders.d_feat, back.decoders.d_feat)
            assert np.array_equal(model.decoders.d_off, back.decoders.d_off)
        else:
            assert back.decoders is None

    def test_render_identical_after_reload(self, rng, tmp_path):
        model = build_model(rng)
        path = tmp_path / "model.slod"
        save_model(model, path)
        back = load_model(path)
        cam = make_camera()
        st = RenderSettings()
        assert np.array_equal(model.render_view(cam, st), back.render_view(cam, st))

    def test_header_magic(self, rng, tmp_path):
        model = build_model(rng)
        path = tmp_path / "model.slod"
        save_model(model, path)
        data = path.read_bytes()
        assert data[:4] == b"SLOD"

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.slod"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="bad magic"):
            load_model(path)

    def test_unknown_version_rejected(self, rng, tmp_path):
        model = build_model(rng)
        path = tmp_path / "model.slod"
        save_model(model, path)
        data = bytearray(path.read_bytes())
        data[4] = 42
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="unknown version"):
            load_model(path)

    def test_voxel_index_rebuilt(self, rng, tmp_path):
        model = build_model(rng)
        path = tmp_path / "model.slod"
        save_model(model, path)
        back = load_model(path)
        assert back.hierarchy.voxel_index() == model.hierarchy.voxel_index()

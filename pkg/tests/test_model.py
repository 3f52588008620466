import numpy as np
import pytest

from panelnet.autodiff import nn
from panelnet.autodiff import tensor as T
from panelnet.autodiff.gradcheck import gradient_check
from panelnet.autodiff.tensor import Tensor
from panelnet.errors import ConfigError, ShapeError
from panelnet.model import (Local2Global, ModelConfig, PanelBlock, PanelNet, WindowBlock, patchify,
                            unpatchify)

TINY = dict(height=32, width=64, interval=32, stride=16, stem_channels=2,
            stage_channels=(2, 2, 2, 2), stage_blocks=(1, 1, 1, 1), token_dim=8,
            window_stages=((1, 1),), panel_blocks=1, panel_heads=2,
            decoder_channels=(2, 2, 2, 2, 2, 2), geo_hidden=2, head_hidden=4,
            boundary_length=64)


def test_bottleneck_arithmetic():
    cfg = ModelConfig()
    assert cfg.bottleneck_shape == (8, 16, 4)
    for h in (128, 256, 512, 1024):
        for i in (32, 64, 128, 256):
            if i > 1024:
                continue
            cb, hb, wb = ModelConfig(height=h, width=1024, interval=i, stride=32,
                                     window_stages=((1, 1),)).bottleneck_shape
            assert cb * hb * wb == 512


@pytest.mark.parametrize("bad", [
    dict(height=100), dict(interval=48, stride=16), dict(stride=48), dict(task="normals"),
    dict(window_stages=((3, 1),)), dict(panel_heads=7), dict(ref_panel_index=99),
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**bad)


def test_desk_shapes():
    cfg = ModelConfig.desk()
    model = PanelNet(cfg)
    rgb = np.random.default_rng(0).random((3, 128, 256)).astype(np.float32)
    out = model(rgb)
    n = cfg.num_panels
    assert out["panel_depth"].shape == (n, 1, 128, 64)
    assert out["confidence"].shape == (n, 1, 128, 64)
    assert out["depth"].shape == (1, 128, 256)
    assert np.all(out["depth"].data > 0) and np.all(out["depth"].data < cfg.max_depth)
    assert np.all((out["confidence"].data > 0) & (out["confidence"].data < 1))
    skips, fb = model.encoder(T.reshape(Tensor(rgb[:, :, :64]), (1, 3, 128, 64)))
    assert [s.shape[1:] for s in skips] == [(16, 32, 16), (32, 16, 8), (64, 8, 4), (128, 4, 2)]
    assert fb.shape == (1,) + cfg.bottleneck_shape


@pytest.mark.parametrize("task,key,shape", [("segmentation", "logits", (4, 32, 64)),
                                            ("layout", "boundary", (64,))])
def test_task_heads(task, key, shape):
    model = PanelNet(ModelConfig(task=task, **TINY))
    out = model(np.random.default_rng(1).random((3, 32, 64)))
    assert out[key].shape == shape
    if task == "layout":
        b = out["boundary"].data
        assert np.all((b > np.pi / 2) & (b < np.pi))
        assert out["room_height"].data[0] > 0


def test_patchify_round_trip(rng):
    x = Tensor(rng.standard_normal((3, 2, 4, 6)))
    tokens = patchify(x, 2)
    assert tokens.shape == (3, 6, 8)
    assert np.array_equal(unpatchify(tokens, 2, 2, 4, 6).data, x.data)
    # token (row 0, col 1) holds the 2x2 patch at columns 2..3
    assert np.array_equal(tokens.data[0, 1].reshape(2, 2, 2), x.data[0, :, 0:2, 2:4])


def test_l2g_identity_at_init(rng):
    cfg = ModelConfig.desk()
    l2g = Local2Global(rng, cfg)
    fb = Tensor(rng.standard_normal((cfg.num_panels,) + cfg.bottleneck_shape).astype(np.float32))
    assert np.allclose(l2g(fb).data, fb.data, atol=1e-6)


def test_panel_block_permutation_equivariance(rng):
    blk = PanelBlock(rng, 6, 16, 4, zero_out=False)
    x = rng.standard_normal((6, 16)).astype(np.float32)
    perm = rng.permutation(6)
    a = blk(Tensor(x)).data[perm]
    b = blk(Tensor(x[perm])).data
    assert np.allclose(a, b, atol=1e-6)


def test_window_block_shape_and_identity(rng):
    blk = WindowBlock(rng, 4, 4, 2, 2, 2)
    x = Tensor(rng.standard_normal((3, 4, 4, 2)).astype(np.float32))
    assert np.allclose(blk(x).data, x.data, atol=1e-6)
    with pytest.raises(ShapeError):
        PanelBlock(rng, 6, 16, 4)(Tensor(np.zeros((5, 16))))


def test_parameter_names_are_stable():
    names = [n for n, _ in PanelNet(ModelConfig.desk()).named_parameters()]
    assert "encoder.stage1.block0.conv1.weight" in names
    assert "l2g.window.0.block.attn.qkv.weight" in names
    assert len(names) == len(set(names))


def test_depth_head_prior():
    model = PanelNet(ModelConfig.desk())
    out = model(np.full((3, 128, 256), 0.5, dtype=np.float32))
    assert 0.5 < float(np.median(out["depth"].data)) < 8


@pytest.mark.slow
def test_end_to_end_gradcheck():
    model = PanelNet(ModelConfig(**TINY), zero_out=False).to(np.float64)
    rgb = np.random.default_rng(3).random((3, 32, 64))
    w = np.random.default_rng(4).standard_normal((1, 32, 64))
    params = [p for name, p in model.named_parameters()
              if name.startswith(("geometry.fc1", "encoder.stem1.conv", "l2g.panel", "decoder.head",
                                  "decoder.confidence", "decoder.up5"))]

    def f(x, *ps):
        return T.sum_(T.mul(model(x)["depth"], Tensor(w)))

    report = gradient_check(f, [Tensor(rgb)] + params, eps=1e-6, max_entries=12)
    assert report.passed, report

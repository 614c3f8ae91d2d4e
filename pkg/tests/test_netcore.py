import pytest
import torch

from surfchart.errors import (CheckpointCorruptError, ConfigurationError,
                              IncompatibleCheckpointError, ShapeMismatchError)
from surfchart.netcore import (NetConfig, SurfaceModel, image_chart, load_model, model_to_bytes,
                               save_model)

from conftest import small_net


def _model(**kw):
    torch.manual_seed(0)
    return SurfaceModel(small_net(**kw)).double()


def _images(b, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, 3, 32, 32, generator=g, dtype=torch.float64)


def test_single_view_output_shapes_and_ranges():
    m = _model(predict_hidden=True)
    out, code = m.run(_images(2))
    assert out.nocs.shape == (2, 3, 32, 32)
    assert out.mask_logits.shape == (2, 32, 32)
    assert out.chart.shape == (2, 2, 32, 32)
    assert out.nocs_hidden.shape == (2, 3, 32, 32) and out.chart_hidden.shape == (2, 2, 32, 32)
    for t in (out.nocs, out.chart, out.nocs_hidden, out.chart_hidden):
        assert t.min() >= 0 and t.max() <= 1
    assert code.shape == (2, m.config.code_dim)
    xyz = m.surface_at(code, torch.rand(2, 17, 2, dtype=torch.float64))
    assert xyz.shape == (2, 17, 3)
    assert xyz.min() >= 0 and xyz.max() <= 1


def test_without_hidden_head_there_are_no_hidden_outputs():
    out, _ = _model().run(_images(1))
    assert out.nocs_hidden is None and out.chart_hidden is None


def test_wrong_image_shape_raises():
    m = _model()
    with pytest.raises(ShapeMismatchError):
        m.run(torch.rand(1, 3, 16, 32, dtype=torch.float64))
    with pytest.raises(ShapeMismatchError):
        m.run(torch.rand(1, 4, 32, 32, dtype=torch.float64))


def test_sp_dimension_checks():
    m = _model()
    code = torch.zeros(1, m.config.code_dim + 1, dtype=torch.float64)
    with pytest.raises(ShapeMismatchError):
        m.surface_at(code, torch.zeros(1, 3, 2, dtype=torch.float64))
    with pytest.raises(ShapeMismatchError):
        m.sp_forward(torch.zeros(1, m.config.code_dim, dtype=torch.float64),
                     torch.zeros(1, 3, 5, dtype=torch.float64))


def test_sp_gradient_matches_finite_differences():
    m = _model(amp_dims=(32, 64, 64), sp_width=256)
    code = torch.randn(1, m.config.code_dim, dtype=torch.float64)
    uv = torch.rand(1, 4, 2, dtype=torch.float64, requires_grad=True)
    f = lambda x: m.surface_at(code, x).sum()
    (g,) = torch.autograd.grad(f(uv), uv)
    num = torch.zeros_like(uv)
    h = 1e-6
    with torch.no_grad():
        for i in range(uv.numel()):
            d = torch.zeros_like(uv).view(-1)
            d[i] = h
            d = d.view_as(uv)
            num.view(-1)[i] = (f(uv + d) - f(uv - d)) / (2 * h)
    assert num.norm() > 0
    assert ((g - num).norm() / num.norm()).item() < 1e-4


def test_surface_mlp_has_residual_pairs():
    m = _model(sp_depth=9)
    assert len(m.sp.hidden) == 7  # input + 7 hidden + output
    assert m.uv_amplifier is not None
    dims = [l.out_features for l in m.uv_amplifier if isinstance(l, torch.nn.Linear)]
    assert dims == list(m.config.amp_dims)


def test_no_amplifier_feeds_raw_uv():
    m = _model(use_uv_amplifier=False)
    assert m.uv_amplifier is None
    assert m.config.uv_dim == 2 and m.config.code_dim == 256
    _, code = m.run(_images(1))
    assert m.surface_at(code, torch.rand(1, 3, 2, dtype=torch.float64)).shape == (1, 3, 3)


def test_parameter_groups_partition_the_model():
    m = _model(multiview=True)
    a = {id(p) for p in m.nocs_uv_parameters()}
    b = {id(p) for p in m.surface_parameters()}
    assert not a & b
    assert a | b == {id(p) for p in m.parameters()}


def test_fuse_is_elementwise_max_and_order_free():
    codes = torch.randn(4, 10, dtype=torch.float64)
    fused = SurfaceModel.fuse_multiview(codes)
    assert torch.equal(fused, codes.max(dim=0).values)
    assert torch.equal(fused, SurfaceModel.fuse_multiview(codes[torch.randperm(4)]))
    assert torch.equal(SurfaceModel.fuse_multiview(list(codes)), fused)
    with pytest.raises(ValueError):
        SurfaceModel.fuse_multiview([])


def test_multiview_code_concatenates_view_and_pooled_codes():
    m = _model(multiview=True).eval()
    imgs = _images(3)
    out, code = m.run(imgs[None])
    c = m.config.code_dim
    assert code.shape == (3, 2 * c)
    pooled = code[:, c:]
    assert torch.allclose(pooled, pooled[0].expand_as(pooled))
    assert torch.allclose(pooled[0], code[:, :c].max(dim=0).values)
    # warm-up without pooling: the second half repeats the view's own code
    _, code_nf = m.run(imgs[None], fuse=False)
    assert torch.equal(code_nf[:, :c], code_nf[:, c:])
    # view order only permutes the outputs
    perm = torch.tensor([2, 0, 1])
    out_p, code_p = m.run(imgs[perm][None])
    assert torch.allclose(code_p, code[perm], atol=1e-12)
    assert torch.allclose(out_p.nocs, out.nocs[perm], atol=1e-12)


def test_forward_multi_evaluates_every_pixel_by_default():
    m = _model(multiview=True).eval()
    out, xyz = m.forward_multi(_images(2))
    assert xyz.shape == (2, 32 * 32, 3)
    with pytest.raises(ShapeMismatchError):
        _model().forward_multi(_images(2))


def test_image_chart_spans_mask_bounding_box():
    logits = -torch.ones(1, 8, 8, dtype=torch.float64)
    logits[0, 2:6, 1:5] = 1
    chart = image_chart(logits)[0]
    u, v = chart[0], chart[1]
    assert u[3, 1] == pytest.approx(0.5 / 4) and u[3, 4] == pytest.approx(3.5 / 4)
    assert v[2, 3] == pytest.approx(0.5 / 4) and v[5, 3] == pytest.approx(3.5 / 4)
    assert torch.all(u[:, 1:] >= u[:, :-1])


def test_image_chart_mode_replaces_learned_chart():
    m = _model(chart_mode="image")
    out, _ = m.run(_images(1))
    assert torch.equal(out.chart, image_chart(out.mask_logits))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        NetConfig(resolution=(30, 32), n_pool=2)
    with pytest.raises(ConfigurationError):
        NetConfig(chart_mode="sphere")
    with pytest.raises(ConfigurationError):
        NetConfig(sp_depth=2)
    cfg = small_net(multiview=True)
    assert NetConfig.from_dict(cfg.to_dict()) == cfg


def test_save_load_round_trip_is_bit_identical(tmp_path):
    m = _model(multiview=True)
    m.run(_images(2)[None])  # moves batch-norm statistics off their initial values
    path = tmp_path / "m.ckpt"
    save_model(m, path)
    loaded = load_model(path)
    assert model_to_bytes(loaded) == model_to_bytes(m) == path.read_bytes()
    for (k, a), (_, b) in zip(m.state_dict().items(), loaded.state_dict().items()):
        assert a.dtype == b.dtype and a.shape == b.shape and torch.equal(a, b), k


def test_load_with_mismatched_config_names_the_key(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(_model(), path)
    with pytest.raises(IncompatibleCheckpointError, match="channel_scale"):
        load_model(path, expected=small_net(channel_scale=0.25))


def test_truncated_or_flipped_checkpoint_is_corrupt(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(_model(), path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointCorruptError):
        load_model(path)
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(CheckpointCorruptError):
        load_model(path)


def test_missing_checkpoint_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "nope.ckpt")

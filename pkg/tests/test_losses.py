import math

import numpy as np
import pytest
import torch

from surfchart.errors import ConfigurationError, ShapeMismatchError
from surfchart.losses import (LossWeights, consistency_loss, consistency_losses, mask_loss,
                              mine_pairs, nocs_loss, surface_loss, total_multi, total_single)

H = 1e-6


def central_difference(fn, args, wrt):
    """Numerical gradient of scalar ``fn(*args)`` with respect to ``args[wrt]``."""
    x = args[wrt].detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        keep = flat[i].item()
        flat[i] = keep + H
        up = fn(*[x if k == wrt else a for k, a in enumerate(args)]).item()
        flat[i] = keep - H
        down = fn(*[x if k == wrt else a for k, a in enumerate(args)]).item()
        flat[i] = keep
        gflat[i] = (up - down) / (2 * H)
    return grad


def analytic(fn, args, wrt):
    x = args[wrt].detach().clone().requires_grad_(True)
    out = fn(*[x if k == wrt else a for k, a in enumerate(args)])
    (g,) = torch.autograd.grad(out, x)
    return g


def rel_error(fn, args, wrt):
    ga, gn = analytic(fn, args, wrt), central_difference(fn, args, wrt)
    return ((ga - gn).norm() / gn.norm().clamp_min(1e-12)).item()


def _rand(gen, *shape):
    return torch.rand(*shape, generator=gen, dtype=torch.float64)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


def test_nocs_loss_gradient(gen):
    for _ in range(5):
        pred, gt = _rand(gen, 2, 5, 6, 3), _rand(gen, 2, 5, 6, 3)
        mask = _rand(gen, 2, 5, 6) < 0.6
        assert rel_error(lambda p, g, m: nocs_loss(p, g, m).value, (pred, gt, mask), 0) < 1e-4


def test_mask_loss_gradient(gen):
    for _ in range(5):
        logits = (_rand(gen, 2, 5, 6) - 0.5) * 6
        gt = _rand(gen, 2, 5, 6) < 0.5
        assert rel_error(mask_loss, (logits, gt), 0) < 1e-4


def test_surface_loss_gradient(gen):
    for _ in range(5):
        pred, gt = _rand(gen, 3, 20, 3), _rand(gen, 3, 20, 3)
        assert rel_error(lambda p, g: surface_loss(p, g).value, (pred, gt), 0) < 1e-4


def _pairs_for(n_views, n, seed):
    rng = np.random.default_rng(seed)
    # coarse values so that exact duplicates across views exist
    maps = [np.round(rng.random((1, n, 3)) * 3) / 3 for _ in range(n_views)]
    masks = [np.ones((1, n), bool) for _ in range(n_views)]
    return mine_pairs(maps, masks, eps_corr=1e-3, rng=rng)


def test_consistency_loss_gradient(gen):
    pairs = _pairs_for(3, 40, 1)
    assert len(pairs) > 0
    pred = _rand(gen, 3, 40, 3)
    assert rel_error(lambda x: consistency_loss(pairs, x).value, (pred,), 0) < 1e-4


def test_total_single_gradient(gen):
    w = LossWeights()
    mask = _rand(gen, 1, 4, 4) < 0.6

    def fn(pred, logits, xyz):
        ln = nocs_loss(pred, gt, mask).value
        lm = mask_loss(logits, mask)
        ls = surface_loss(xyz, xyz_gt).value
        return total_single(ln, lm, ls, w)

    gt, xyz_gt = _rand(gen, 1, 4, 4, 3), _rand(gen, 1, 10, 3)
    args = (_rand(gen, 1, 4, 4, 3), _rand(gen, 1, 4, 4) - 0.5, _rand(gen, 1, 10, 3))
    for wrt in range(3):
        assert rel_error(fn, args, wrt) < 1e-4


def test_total_multi_gradient(gen):
    w = LossWeights.multiview()
    pairs = _pairs_for(3, 30, 2)
    xyz_gt = _rand(gen, 3, 30, 3)

    def fn(xyz):
        l_i = w.w2 * surface_loss(xyz, xyz_gt).value
        return total_multi(l_i, consistency_losses(pairs, xyz), w)

    assert rel_error(fn, (_rand(gen, 3, 30, 3),), 0) < 1e-4


def test_nocs_loss_value_and_empty_mask():
    pred = torch.zeros(1, 2, 2, 3, dtype=torch.float64)
    gt = torch.ones(1, 2, 2, 3, dtype=torch.float64)
    mask = torch.tensor([[[True, False], [False, False]]])
    assert nocs_loss(pred, gt, mask).value.item() == 1.0
    term = nocs_loss(pred, gt, torch.zeros_like(mask))
    assert term.empty and term.value.item() == 0.0


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        nocs_loss(torch.zeros(1, 2, 2, 3), torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 2))
    with pytest.raises(ShapeMismatchError):
        surface_loss(torch.zeros(4, 3), torch.zeros(5, 3))


def test_surface_loss_is_not_squared():
    a = torch.zeros(2, 3, dtype=torch.float64)
    b = torch.tensor([[3.0, 4.0, 0.0], [0.0, 0.0, 1.0]], dtype=torch.float64)
    assert surface_loss(a, b).value.item() == pytest.approx(3.0)


def test_total_weights():
    w = LossWeights()
    assert total_single(1.0, 1.0, 1.0, w) == pytest.approx(0.1 * (0.7 + 0.3) + 0.9)
    assert total_multi(1.0, [2.0, 4.0], w) == pytest.approx(1.0 + 0.9 / 2 * 6.0)
    assert total_multi(1.0, [2.0], LossWeights(w3=0.0)) == 1.0
    mv = LossWeights.multiview()
    assert (mv.wn, mv.wm, mv.w1, mv.w2, mv.w3) == (0.1, 0.1, 0.1, 0.9, 0.9)


def test_loss_weights_validation():
    with pytest.raises(ConfigurationError):
        LossWeights(w1=-1)
    with pytest.raises(ConfigurationError):
        LossWeights(w3=math.nan)
    with pytest.raises(ConfigurationError):
        LossWeights(eps_corr=0)


def _brute_pairs(maps, masks, eps):
    out = set()
    for a in range(len(maps)):
        for b in range(a + 1, len(maps)):
            ia, ib = np.flatnonzero(masks[a].ravel()), np.flatnonzero(masks[b].ravel())
            ya, yb = maps[a].reshape(-1, 3), maps[b].reshape(-1, 3)
            for i in ia:
                d = np.sqrt(((yb[ib] - ya[i]) ** 2).sum(1))
                k = int(np.argmin(d))
                if d[k] < eps:
                    out.add((a, b, int(i), int(ib[k])))
    return out


def test_mine_pairs_matches_nearest_neighbour_loop():
    rng = np.random.default_rng(3)
    for _ in range(10):
        maps = [rng.random((6, 7, 3)) for _ in range(3)]
        masks = [rng.random((6, 7)) < 0.7 for _ in range(3)]
        pairs = mine_pairs(maps, masks, eps_corr=0.15, rng=rng)
        got = {(int(a), int(b), int(pa[0] * 7 + pa[1]), int(pb[0] * 7 + pb[1]))
               for a, b, pa, pb in zip(pairs.view_a, pairs.view_b, pairs.pixel_a, pairs.pixel_b)}
        assert got == _brute_pairs(maps, masks, 0.15)
        d = np.linalg.norm(pairs.gt_a - pairs.gt_b, axis=1)
        assert np.all(d < 0.15)


def test_mine_pairs_rows_index_the_samples():
    rng = np.random.default_rng(4)
    maps = [rng.random((5, 5, 3)) for _ in range(2)]
    masks = [np.ones((5, 5), bool), np.ones((5, 5), bool)]
    masks[0][0] = False
    samples = [rng.integers(0, 25, size=30), rng.integers(0, 25, size=30)]
    pairs = mine_pairs(maps, masks, 0.3, samples=samples, rng=rng)
    assert len(pairs) > 0
    for a, b, ra, rb, pa, pb in zip(pairs.view_a, pairs.view_b, pairs.row_a, pairs.row_b,
                                    pairs.pixel_a, pairs.pixel_b):
        assert samples[a][ra] == pa[0] * 5 + pa[1]
        assert samples[b][rb] == pb[0] * 5 + pb[1]
        assert masks[a].ravel()[samples[a][ra]]


def test_mine_pairs_cap_is_seeded():
    rng = np.random.default_rng(5)
    maps = [np.round(rng.random((8, 8, 3)) * 2) / 2 for _ in range(2)]
    masks = [np.ones((8, 8), bool)] * 2
    a = mine_pairs(maps, masks, 1e-3, max_pairs=5, rng=np.random.default_rng(9))
    b = mine_pairs(maps, masks, 1e-3, max_pairs=5, rng=np.random.default_rng(9))
    assert len(a) == 5
    np.testing.assert_array_equal(a.row_a, b.row_a)


def test_consistency_losses_one_term_per_view_pair():
    maps = [np.zeros((1, 2, 3)), np.zeros((1, 2, 3)), np.ones((1, 2, 3))]
    masks = [np.ones((1, 2), bool)] * 3
    pairs = mine_pairs(maps, masks, 1e-3)
    pred = torch.rand(3, 2, 3, dtype=torch.float64)
    terms = consistency_losses(pairs, pred)
    assert len(terms) == 3
    assert terms[1].item() == 0.0 and terms[2].item() == 0.0
    assert terms[0].item() > 0
    empty = consistency_loss(pairs.select(0, 2), pred)
    assert empty.empty


def test_mine_pairs_needs_two_views():
    with pytest.raises(ConfigurationError):
        mine_pairs([np.zeros((2, 2, 3))], [np.ones((2, 2), bool)], 1e-3)

"""
The evaluation metrics on hand-made predictions
===============================================

Ground truth scores perfectly on the error metrics. Blurring a box-union
view removes its depth jumps, which the discontinuity score notices even
though the Chamfer error barely moves.
"""
import numpy as np
from scipy import ndimage

from surfchart.metrics import (consistency_error, corr_error, discontinuity_histogram,
                               discontinuity_score, recon_error)
from surfchart.synthcam import NocsMap, generate_shape, render_view, sample_camera

shape = generate_shape("box-union", seed=2)
rng = np.random.default_rng(3)
views = [render_view(shape, sample_camera(rng, (64, 64))) for _ in range(3)]
gt = views[0].nocs_visible

# a smoothed copy: same mask, jumps averaged away
blurred = np.stack([ndimage.gaussian_filter(gt.coords[..., c], 1.5) for c in range(3)], -1)
weight = ndimage.gaussian_filter(gt.valid.astype(float), 1.5)[..., None]
smooth = NocsMap(np.where(weight > 0, blurred / np.maximum(weight, 1e-9), 0), gt.valid)

h_gt = discontinuity_histogram(gt)
for name, pred in (("ground truth", gt), ("smoothed", smooth)):
    print(f"{name:13s} E_rec {recon_error(pred, gt):.2e}  E_corr {corr_error(pred, gt):.2e}  "
          f"S_cont {discontinuity_score(discontinuity_histogram(pred), h_gt):.3f}")

# Ground truth against itself does not score 1: the score is a normalized
# dot product of raw counts, so it equals the sum of squared bin shares.
shares = h_gt.counts / h_gt.total
print("self score equals sum of squared shares:", np.isclose((shares ** 2).sum(),
                                                             discontinuity_score(h_gt, h_gt)))

# identical maps agree across views up to the matching threshold; at 64x64
# three random views share few pixels closer than 1e-3, so use 1e-2 here
gts = [v.nocs_visible for v in views]
print("E_cons of ground truth:", f"{consistency_error(gts, gts, eps=1e-2):.2e}")

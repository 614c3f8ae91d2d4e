"""
From a chart to a textured mesh
===============================

Inference unwraps the predicted foreground into uv space, colors the occupied
uv cells from the input image, evaluates the surface network on them, and
connects neighbouring cells only where the 3D step stays below 0.05. The
model here is untrained, so the geometry is arbitrary; the pipeline and its
guarantees are the same.
"""
import tempfile
from pathlib import Path

import numpy as np
import torch

from surfchart.chart2mesh import reconstruct, write_reconstruction
from surfchart.netcore import NetConfig, SurfaceModel
from surfchart.synthcam import generate_shape, render_view, sample_camera

torch.manual_seed(0)
model = SurfaceModel(NetConfig(channel_scale=0.25)).eval()
view = render_view(generate_shape("swept-profile", 4), sample_camera(np.random.default_rng(2)))

rec, = reconstruct(model, [view.rgb], uv_res=64, final_res=256)
mesh = rec.mesh
print(f"occupied uv cells {rec.occupancy.n_occupied}, vertices {mesh.n_vertices}, "
      f"faces {len(mesh.faces)}")
print("vertices inside the unit cube:", bool(((mesh.xyz >= 0) & (mesh.xyz <= 1)).all()))
longest = mesh.edge_lengths().max() if len(mesh.edges) else 0.0
print(f"longest kept edge {longest:.4f}")

out = Path(tempfile.mkdtemp())
print("wrote", write_reconstruction([rec], out), "to", out)

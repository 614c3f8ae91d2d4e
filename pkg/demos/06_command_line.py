"""
The command line, stage by stage
================================

Each subcommand is one pipeline stage. This script drives them through
``surfchart.cli.main`` so it runs anywhere the package is installed; the
same arguments work with the ``surfchart`` executable.
"""
import tempfile
from pathlib import Path

from surfchart.cli import main

work = Path(tempfile.mkdtemp())
data, run = work / "data", work / "runs" / "demo"
small = ["--net.channel_scale", "0.25", "--loss.K", "512"]

steps = [
    ["synth", "--shapes", "2", "--views", "5", "--res", "64", "--out", str(data)],
    ["train", "--data", str(data), "--run", str(run), "--epochs1", "2", "--epochs2", "2"] + small,
    ["infer", "--checkpoint", str(run / "ckpt_4"), "--data", str(data), "--shape", "shape_000",
     "--out", str(work / "recon"), "--infer.uv_res", "64", "--infer.final_res", "256"],
    ["eval", "--data", str(data), "--checkpoint", str(run / "ckpt_4"), "--out", str(work / "eval")],
    # ground truth evaluated as a prediction
    ["eval", "--data", str(data), "--predictions", str(data), "--out", str(work / "eval_gt")],
]
for argv in steps:
    print("$ surfchart", " ".join(argv))
    print("exit", main(argv))

print((run / "config.ini").read_text().splitlines()[:12])

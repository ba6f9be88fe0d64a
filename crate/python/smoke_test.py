#!/usr/bin/env python3
"""Smoke test for the seid_py extension module.

Builds the cdylib with cargo if needed, loads it, and exercises the main
entry points end to end. Run from the repository root:

    python3 python/smoke_test.py
"""

import math
import shutil
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def ensure_module():
    lib = ROOT / "target" / "debug" / "libseid_py.so"
    if not lib.exists():
        subprocess.run(["cargo", "build", "-p", "seid-py"], cwd=ROOT, check=True)
    dest = ROOT / "python" / "seid_py.so"
    if not dest.exists() or lib.stat().st_mtime > dest.stat().st_mtime:
        shutil.copyfile(lib, dest)
    sys.path.insert(0, str(ROOT / "python"))


def main():
    ensure_module()
    import seid_py

    # model building + describe
    model = seid_py.desk_model(0)
    rows = model.describe()
    assert rows[0][0] == "Conv", rows[0]
    assert rows[-1][2] == "10", rows[-1]
    assert model.feature_width() == 32
    assert model.param_count() > 0

    big = seid_py.build("growth_rate=48\n")
    outputs = [r[2] for r in big.describe()]
    assert "31*31*240" in outputs and "7*7*372" in outputs, outputs

    # inference on synthetic data
    images, labels, channels = seid_py.synthetic_faces(3, 2, 64, 0.1, False, 7)
    n = len(labels)
    probs = model.classify(images, n, channels, 64, 64)
    classes = model.num_classes()
    for i in range(n):
        row = probs[i * classes:(i + 1) * classes]
        assert abs(sum(row) - 1.0) < 1e-9, sum(row)

    feats = model.extract(images, n, channels, 64, 64)
    width = model.feature_width()
    assert len(feats) == n * width

    # metrics
    sim = seid_py.cosine_similarity([1.0, 0.0], [1.0, 1.0])
    assert abs(sim - 1 / math.sqrt(2)) < 1e-9, sim
    genuine = [0.9, 0.8, 0.95, 0.85]
    impostor = [0.1, 0.2, 0.15, 0.05, 0.3, 0.25]
    tar, threshold, achieved, small = seid_py.tar_at_far(genuine, impostor, 0.01)
    assert tar == 1.0 and small, (tar, small)
    acc, _ = seid_py.verification_accuracy(genuine * 3, impostor * 2, 2, 0)
    assert acc == 1.0, acc
    roc = seid_py.roc_curve(genuine, impostor)
    assert seid_py.roc_auc(roc) == 1.0

    # gradient check
    assert "se_block" in seid_py.grad_check_components()
    err, ok = seid_py.grad_check("se_block", 1e-5, 1e-4)
    assert ok, err

    print("smoke test passed")


if __name__ == "__main__":
    main()

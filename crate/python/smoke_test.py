"""Smoke test for the ldp extension module.

Build and stage the module first:

    cargo build --release -p ldp-py --features extension-module
    cp target/release/libldp.so python/ldp.so

Then run `python3 python/smoke_test.py [artifact_dir]`. When an artifact
directory from the CLI pipeline (ae.ldp, det.ldp, patch.ldp) is given, the
trained models are exercised too.
"""

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
import ldp  # noqa: E402


def check_losses():
    flat = ldp.Image.filled(8, 8, (0.3, 0.6, 0.9))
    # Only the smoothing term under the square root remains on a flat patch.
    assert abs(ldp.tv_loss(flat) - 7 * 7 * 3 * 1e-4) < 1e-9
    assert ldp.nps_loss(flat, [(0.3, 0.6, 0.9)]) == 0.0
    assert ldp.kl_loss([0.0, 0.0], [0.0, 0.0]) == 0.0
    mu, s = 0.7, 1.3
    want = 0.5 * (mu * mu + s * s - 1.0) - math.log(s)
    assert abs(ldp.kl_loss([mu], [math.log(s)]) - want) < 1e-12


def check_ap():
    gt = [[(0.5, 0.5, 0.2, 0.4)], [(0.3, 0.3, 0.2, 0.2)]]
    preds = [[(0.5, 0.5, 0.2, 0.4, 0.9)], [(0.8, 0.8, 0.1, 0.1, 0.95)]]
    # The false positive outranks the hit: precision 1/2 at recall 1/2.
    assert abs(ldp.compute_ap(gt, preds) - 0.25) < 1e-12


def check_scenes():
    scenes = ldp.synthetic_scenes(3, seed=5)
    assert len(scenes) == 3
    image, objects = scenes[0]
    assert (image.height, image.width) == (64, 64)
    assert len(image.data) == 64 * 64 * 3
    assert all(0.0 <= v <= 1.0 for v in image.data)
    assert objects and all(len(o) == 5 for o in objects)
    return [img for img, _ in ldp.synthetic_scenes(40, seed=11)]


def check_artifacts(root, images):
    assert ldp.artifact_kind(os.path.join(root, "det.ldp")) == "detector"
    det = ldp.Detector.load(os.path.join(root, "det.ldp"))
    ae = ldp.Autoencoder.load(os.path.join(root, "ae.ldp"))
    patch = ldp.load_patch(os.path.join(root, "patch.ldp"))
    z = ae.encode(images[0])
    h, w, d = ae.latent_shape
    assert len(z) == h * w * d
    print("reconstruction mse", round(ae.reconstruction_mse(images[:8]), 5))
    print("detection loss", round(det.detection_loss(images[:8]), 4))
    report = ldp.evaluate_patch(det, patch, images, seed=1)
    print("evaluation", {k: round(v, 3) for k, v in report.items()})
    assert report["clean_map"] == 100.0


def main():
    check_losses()
    check_ap()
    images = check_scenes()
    if len(sys.argv) > 1:
        check_artifacts(sys.argv[1], images)
    print("smoke test ok")


if __name__ == "__main__":
    main()

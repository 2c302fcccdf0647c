"""Compare refinement of a blurred depth initialization with and without the contrastive edge loss.

Counts the ground-truth depth edges (one-pixel ratio edges) that survive in
the refined maps. Run with ``python3 demos/edge_retention.py``.
"""

from __future__ import annotations

from stereo_refine import RefinerConfig, edge_mask, refine
from stereo_refine.refine import STEREO_LEARNING_RATE
from stereo_refine.synth import PRESETS, make_bundle, perturb, scene_preset


def retained(depths, truth):
    return int(sum((edge_mask(d, 1, kind="ratio") & edge_mask(t, 1, kind="ratio")).sum()
                   for d, t in zip(depths, truth)))


def main():
    print("scene     true edges  in blurred init  no edge loss  contrastive loss")
    for preset in PRESETS:
        sb = make_bundle(scene_preset(preset, seed=0))
        left = perturb(sb.gt_left, noise=0.1, blur=2.0, seed=1)
        right = perturb(sb.gt_right, noise=0.1, blur=2.0, seed=2)
        bundle = sb.video_bundle(left, right)
        counts = []
        for w_edge in (0.0, 1e4):
            cfg = RefinerConfig(epochs=100, learning_rate=STEREO_LEARNING_RATE, edge="contrastive", w_edge=w_edge)
            counts.append(retained(refine(bundle, cfg).depths_left, sb.gt_left))
        total = retained(sb.gt_left, sb.gt_left)
        print(f"{preset:8s}  {total:10d}  {retained(left, sb.gt_left):15d}  {counts[0]:12d}  {counts[1]:16d}")


if __name__ == "__main__":
    main()

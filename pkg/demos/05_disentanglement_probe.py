"""Measure what the two disentangled features know about landmark locations.

A bias-free linear probe predicts each landmark's response-map cell from the
flattened feature.  On a trained model the landmark-related feature z_l keeps
that information while the landmark-free feature z_t is adversarially
scrubbed toward chance.  Channel-sum dumps of both features land in
demo_out/probe for visual comparison (z_l shows bright landmark peaks).
"""

from pathlib import Path

import numpy as np

from adld import evaluation as ev
from adld import networks as nets
from adld import synthdata as sd
from adld import tensor as T
from adld import training as tr
from adld.tensor import Tensor

out = Path("demo_out/probe")
out.mkdir(parents=True, exist_ok=True)

src = [sd.build_sample("source", i, 62, 64) for i in range(700)]
tgt = [sd.build_sample("target", i, 63, 64) for i in range(700)]

config = tr.TrainConfig(mode="adld", image_size=64, width_scale=0.25, batch_size=8,
                        epochs=2, iters_per_epoch=150, seed=11)
final = tr.train(config, src, tgt, out)
params, _, _ = nets.load_checkpoint(final)

d = config.image_size // 4
chance = 1.0 / (d * d)
for kind in ("z_l", "z_t"):
    feats, labels = ev.extract_features(src[:600], params, kind)
    acc = ev.probe_disentanglement(feats, labels, d)
    print(f"{kind}: probe top-1 cell accuracy {acc:.4f}  ({acc / chance:.1f}x chance)")

# dump one sample's features for the eyeball check
rec = src[0]
from adld import geometry as geo

crop, _ = geo.center_crop(rec.load_image(), rec.landmarks, 64)
x = nets.encode_rich(Tensor(crop.data[None]), params, training=False)
maps = nets.detect_landmarks(x, params, training=False)
z_l = nets.landmark_related_feature(maps)
z_t = nets.encode_texture(x, params, training=False)
ev.dump_feature_channelsum(z_l.data[0], out / "z_l.pgm")
ev.dump_feature_channelsum(z_t.data[0], out / "z_t.pgm")
print(f"feature dumps: {out / 'z_l.pgm'}, {out / 'z_t.pgm'}")

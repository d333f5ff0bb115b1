"""Train the full framework for a few minutes at desk scale and watch the
losses move.

Uses small in-memory datasets, narrow networks (width_scale 0.25), and input
size 64.  Expect the landmark classification, adversarial, reconstruction and
cross-cycle losses to all fall within a few hundred iterations; the SVG at
the end plots the curves.
"""

from pathlib import Path

from adld import synthdata as sd
from adld import training as tr
from adld.cli import main as adld_cli

out = Path("demo_out/tiny_run")
out.mkdir(parents=True, exist_ok=True)

src = [sd.build_sample("source", i, 42, 64) for i in range(400)]
tgt = [sd.build_sample("target", i, 43, 64) for i in range(400)]

config = tr.TrainConfig(
    mode="adld",
    image_size=64,
    width_scale=0.25,
    batch_size=8,
    epochs=2,
    iters_per_epoch=100,
    seed=7,
)
final = tr.train(config, src, tgt, out)
print(f"final checkpoint: {final}")

rows = tr.read_metrics(out / "metrics.csv")
for it in (1, 50, 100, 200):
    row = rows[it - 1]
    print(
        f"iter {row['iter']:>3}: landmark {row['L_l_src']:.2f}, adversarial(d) {row['L_adl_d']:.4f}, "
        f"reconstruction {row['L_r_s']:.3f}, cycle {row['L_cc_s']:.3f}, total {row['total']:.1f}"
    )

adld_cli([
    "plot",
    "--metrics", str(out / "metrics.csv"),
    "--out", str(out / "losses.svg"),
    "--series", "L_l_src,L_adl_d,L_r_s,L_cc_s",
])
print(f"loss curves: {out / 'losses.svg'}")

"""Re-style backbone features of one image with statistics from another domain."""
import numpy as np

from dgobb.detector import Backbone
from dgobb.style import adain_transfer, channel_stats
from dgobb.synth import DOMAIN_STYLES, SceneSpec, apply_domain_style, generate_scene


def main():
    scene = generate_scene(SceneSpec(), np.random.default_rng(0), "demo")
    target = apply_domain_style(scene, DOMAIN_STYLES["B"])
    enc = Backbone.frozen((8, 16, 32, 32), seed=0)
    src_blocks = enc.forward(scene.image[None])
    tgt_blocks = enc.forward(target.image[None])
    for i, (f, g) in enumerate(zip(src_blocks, tgt_blocks), start=1):
        f, g = f.data[0], g.data[0]
        style = channel_stats(g)
        out = adain_transfer(f, style).data
        err = np.abs(channel_stats(out).mu - style.mu).max()
        print(f"block {i}: source sigma {channel_stats(f).sigma.mean():.4f} -> "
              f"hallucinated {channel_stats(out).sigma.mean():.4f} (target {style.sigma.mean():.4f}), "
              f"max mu error {err:.1e}")


if __name__ == "__main__":
    main()

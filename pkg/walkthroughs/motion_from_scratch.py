"""Render one synthetic gesture and save the motion image between its first and last frames."""

import sys

import numpy as np
from PIL import Image

from rc3d.datagen import generate_sample, make_scene_spec
from rc3d.flow import farneback_flow, motion_image, to_gray

label = int(sys.argv[1]) if len(sys.argv) > 1 else 0
rng = np.random.default_rng(label)
video = generate_sample(make_scene_spec(label, rng), rng)
first, last = video.rgb[0], video.rgb[-1]

flow = farneback_flow(to_gray(first), to_gray(last))
moving = flow.magnitude > 0.5
if moving.any():
    print(f"class {label}: {moving.sum()} moving pixels, mean displacement "
          f"u={flow.u[moving].mean():+.2f} v={flow.v[moving].mean():+.2f} px")
else:
    print(f"class {label}: no motion above half a pixel")

img = motion_image(first, last)
Image.fromarray((img.transpose(1, 2, 0) * 255).round().astype(np.uint8)).save(f"motion_{label:02d}.png")

"""Print parameter counts of the three trunk families at both scale profiles."""

import numpy as np

from rc3d.models import PROFILES, build_c3d, build_p3da, build_rc3d

for name, profile in PROFILES.items():
    for kind, build in (("c3d", build_c3d), ("p3da", build_p3da), ("rc3d", build_rc3d)):
        net = build(profile, np.random.default_rng(0))
        print(f"{name:6s} {kind:5s} {net.num_parameters():>12,}")
        del net

"""Estimating a waiting-time surface from scattered trip observations.

We fake a feeder service whose expected wait grows from 200 s near the hub
to 500 s at the edge of its service area, observe it at 150 random points,
and let ordinary kriging reconstruct the field at a handful of centroids.
"""

import math

import numpy as np

from sms_access.geometry import Point
from sms_access.geostat import experimental_variogram, fit_bounded_linear, krige

rng = np.random.default_rng(7)

hub = Point(0.0, 0.0)


def true_wait(p):
    return 200.0 + 300.0 * min(math.hypot(p.x, p.y) / 8000.0, 1.0)


points = [Point(float(x), float(y)) for x, y in rng.uniform(-8000, 8000, size=(150, 2))]
samples = [(p, true_wait(p) + float(rng.normal(0, 15))) for p in points]

# 1. The experimental semivariogram: how dissimilar are observations at a
#    given separation? Bins are 250 m wide here.
ev = experimental_variogram(samples, lag_increment=250.0, max_lag=6000.0)
print("lag [m]   mean semivariance [s^2]   pairs")
for b in ev.bins[:12]:
    print(f"{b.lag:7.0f}   {b.semivariance:22.1f}   {b.pair_count:5d}")

# 2. A bounded linear model: rises to the sill at the range, flat beyond.
model = fit_bounded_linear(ev, range_m=3000.0)
print(f"\nfitted sill {model.sill:.1f} s^2 at range {model.range_m:.0f} m")

# 3. Kriging at centroids: a weighted average of nearby observations whose
#    weights sum to one and honor the variogram.
print("\ncentroid          estimate   truth   |err|  samples")
for cx in (-6000.0, -3000.0, 0.0, 3000.0, 6000.0):
    c = Point(cx, 1500.0)
    system = krige(c, samples, model)
    t = true_wait(c)
    print(
        f"({c.x:7.0f},{c.y:5.0f})  {system.estimate:7.1f}  {t:6.1f}  {abs(system.estimate - t):6.1f}  {len(system.weights):5d}"
    )
print("\nweights of the last solve sum to", round(float(system.weights.sum()), 12))

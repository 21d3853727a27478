"""Print the cosine-scale lower bound over a grid of class counts and target posteriors."""

from mmcosine.losses import default_scale, scale_lower_bound

PS = (0.5, 0.9, 0.99, 0.999)

print(f"{'C':>5} " + " ".join(f"p={p:<7}" for p in PS) + "  default s (p=0.9)")
for c in (2, 3, 6, 10, 20, 31, 60, 100):
    row = " ".join(f"{scale_lower_bound(c, p):9.4f}" for p in PS)
    print(f"{c:>5} {row}  {default_scale(c):.1f}")

"""Average precision on a hand-sized example, with the PR points it is built from."""

from gelanvit import metrics as M

gts = [M.GtBox("img", 0, 0, 0, 10, 10), M.GtBox("img", 0, 20, 20, 30, 30)]
dets = [
    M.Detection("img", 0, 0.9, 0, 0, 10, 10),  # hits the first box
    M.Detection("img", 0, 0.8, 50, 50, 60, 60),  # false positive
    M.Detection("img", 0, 0.7, 20, 20, 30, 30),  # hits the second box
]

curve = M.pr_curve(dets, gts, 0.5)
for rank, (rec, prec) in enumerate(curve.points, 1):
    print(f"rank {rank}: recall {rec:.3f} precision {prec:.3f}")
print(f"AP50 = {M.ap_u(dets, gts, 0.5):.6f}  (0.5 * 1 + 0.5 * 2/3 = {0.5 + 0.5 * 2 / 3:.6f})")
print()
print(M.evaluate_detections(dets, gts, 1, ("satellite",)).format())

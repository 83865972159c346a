"""Parameter, GFLOPs and capacity-ledger comparison of the shipped mini models at 640x640."""

from gelanvit import zoo as Z

print(f"{'model':<20} {'width':>6} {'params':>10} {'GFLOPs@640':>11}")
for name in Z.SHIPPED:
    spec = Z.zoo_spec(name)
    rep = Z.count_flops(spec, (640, 640))
    print(f"{name:<20} {spec.width_scale:>6g} {rep.total_params:>10,} {rep.gflops_at_640:>11.4f}")

for name in Z.SHIPPED:
    print()
    print(name)
    print(Z.capacity_report(Z.zoo_spec(name)).format())

vit = Z.zoo_spec("gelan-vit-mini")
stripped = Z.capacity_report(Z.without_path(vit, "global")).c_local
reference = Z.capacity_report(Z.zoo_spec("gelan-t-mini", width_scale=vit.width_scale)).c_local
print()
print("ViT-mini without its global path, local capacity:", stripped)
print("GELAN-t-mini at the same width, local capacity:  ", reference)

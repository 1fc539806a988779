"""Parameter and multiply-add budgets: what does GCT cost compared with SE?

Run: python3 demos/cost_accounting.py
"""
from gctnet.analysis import count_flops
from gctnet.network import miniresnet, resnet50

shape = (1, 3, 224, 224)
base = count_flops(resnet50(), shape)
rows = [("ResNet-50", base),
        ("+ GCT before every conv", count_flops(resnet50(placement="before_conv"), shape)),
        ("+ SE per block (r=16)", count_flops(resnet50(se_blocks=True), shape))]

print(f"{'network':26s} {'params (M)':>11s} {'GMACs':>8s} {'added params':>13s}")
for name, rep in rows:
    print(f"{name:26s} {rep.total_params / 1e6:11.3f} {rep.total_macs / 1e9:8.3f} "
          f"{rep.total_params - base.total_params:13,d}")
print("\nconvention:", base.convention)

# the desk-scale network used for training experiments
small = count_flops(miniresnet(), (1, 3, 32, 32))
gct = count_flops(miniresnet(placement="before_conv"), (1, 3, 32, 32))
print(f"\nminiresnet: {small.total_params:,d} params, {small.total_macs / 1e6:.1f} MMACs per image; "
      f"GCT adds {gct.total_params - small.total_params} params "
      f"and {gct.total_macs - small.total_macs:,d} MACs")

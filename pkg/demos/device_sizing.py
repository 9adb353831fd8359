"""
Sizing the SP2 core for a device
================================

Fit LUT cost per SP2 lane from measured synthesis points, then grow the SP2
core until 70% of the LUTs are used. The fixed core keeps every DSP busy.
"""

from msq.fpga import characterize, device_cost_model, get_device, peak_throughput

for name in ("XC7Z020", "XC7Z045"):
    device = get_device(name)
    cost = device_cost_model(device)
    chosen, table = characterize(device)
    print(f"{name}: {cost.lut_per_sp2_lane:.2f} LUT per SP2 lane, base {cost.base_lut:.0f}, "
          f"fit residual {cost.max_residual:g}")
    for row in table:
        mark = "*" if row["chosen"] else " "
        print(f"  {mark} sp2={row['blk_out_sp2']:3d} ratio {row['ratio']:6s} "
              f"LUT {row['lut_util']:.1%}  peak {row['peak_gops']:.1f} GOPS")
    print(f"  -> train with pr_sp2 = {chosen.pr_sp2:.4g}, peak {peak_throughput(chosen):.1f} GOPS")

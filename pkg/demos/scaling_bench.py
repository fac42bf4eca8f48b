"""Time the hybrid backbone against plain full attention.

The hybrid stack processes fixed-size chunks and carries a constant-size
state (fast weights plus one chunk of cached keys and values), so its cost
grows linearly with sequence length. Full attention over the whole sequence
grows quadratically. The fitted log-log slopes make this visible.

Run with ``python3 demos/scaling_bench.py`` (about half a minute).
"""

from hybridmem.blocks import StackConfig
from hybridmem.evaluation import bench_scaling

rep = bench_scaling(["hybrid", "full_attention"], [64, 128, 256, 512], chunk_size=16, overlap=2,
                    repeats=3, base=StackConfig(tokens_per_frame=8))

print(f"{'frames':>7} {'config':<15} {'seconds':>9} {'state bytes':>12}")
for n, cfg, t, b in rep.rows():
    print(f"{n:>7} {cfg:<15} {t:>9.4f} {b:>12}")
for cfg, slope in rep.slopes.items():
    print(f"log-log slope {cfg:<15} {slope:.2f}")

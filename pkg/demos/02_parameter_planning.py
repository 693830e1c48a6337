"""Whole-model parameter budgets: counting methods and budget-matched search.

Rebuilds the adapter-weight memory table for the 7B preset from its layer
shapes, compares the baseline counting rules, and searches for
partially-shared configurations that hit a LoRA-rank-2 budget.
"""

from prolora.adapter import AdapterConfig
from prolora.planner import (
    PRESETS,
    count_lora,
    count_prolora,
    count_tied_lora,
    count_vera,
    format_param_count,
    megabytes,
    solve_budget,
)

arch = PRESETS["llama2-7b"]

print(f"architecture {arch.name!r}: {len(arch.layers)} linear-layer shapes")
for layer in arch.layers:
    print(f"   {layer.name:>5}: {layer.h:>6} -> {layer.o:<6} x{layer.count}")
print()

print("full low-rank pairs at increasing rank (params / 32-bit storage):")
for rank in (2, 16, 64):
    params = count_lora(arch, rank)
    print(f"   rank {rank:>2}: {params:>12,}  {format_param_count(params):>8}  "
          f"{megabytes(params):>4} MB")
print()

print("baseline methods at rank 256:")
print(f"   scaling-vectors only : {format_param_count(count_vera(arch, 256))}")
print(f"   tied q/k/v factors   : {format_param_count(count_tied_lora(arch, 256))}")
print()

budget = count_lora(arch, 2)
print(f"budget search: <= {budget:,} params (+0.2% tolerance), m = n, rank <= 64")
cands = solve_budget(arch, budget, tolerance=0.002)
print(f"   {len(cands)} candidate configs; the highest-rank few:")
for c in cands[:5]:
    print(f"   r={c.r:>2} u={c.u} m=n={c.m:>2}  -> {c.params:,}")
picked = next(c for c in cands if (c.r, c.u, c.m) == (8, 1, 7))
print(f"   the budget-parity pick: r=8 u=1 m=n=7 -> {picked.params:,} "
      f"({picked.params / budget - 1:+.3%} vs rank-2 budget)")
print()

print("sanity: fully-unshared counting collapses to the plain rule:")
for rank in (2, 8):
    a = count_prolora(arch, AdapterConfig(r=rank, u=rank))
    b = count_lora(arch, rank)
    print(f"   r=u={rank}: {a:,} == {b:,} -> {a == b}")

"""Learn to read digits from sums alone.

Each training item is a pair of noisy 8x8 glyphs labelled only with their sum.
A single rule, digit(x; d1) & digit(y; d2) => addition(; d1 + d2), ties the
sum to the latent digits. The full model trains the task network, the concept
network and the rule weight together; the baseline drops the logic terms and
fits the sum directly.

    python3 demos/digit_addition.py [seed]
"""

import sys

from nesymln.tasks import gen_digit_dataset, make_addition_rules
from nesymln.trainer import TrainConfig, evaluate, train

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
rules = make_addition_rules(1)
tr = gen_digit_dataset(seed, 300, 0.1)
te = gen_digit_dataset(seed + 1000, 1000, 0.1, "test")
print(f"{len(tr)} training pairs, {len(te)} test pairs, rule:\n  {rules.rules[0].render()}")

common = dict(seed=seed, em_rounds=60, batch=32, lr_theta1=2e-3, lr_theta2=2e-3)
full = train(TrainConfig(**common), tr, rules)
base = train(TrainConfig(alpha=1.0, beta=0.0, gamma=0.0, **common), tr, rules)

print("\nround  objective  o_logic   train_acc")
for r in full.diagnostics[::10] + full.diagnostics[-1:]:
    print(f"{r['round']:5d}  {r['objective']:9.4f}  {r['o_logic']:8.4f}  {r['train_acc']:.3f}")

print(f"\ntest accuracy, full model:     {evaluate(full.checkpoint, te).acc:.3f}")
print(f"test accuracy, neural only:    {evaluate(base.checkpoint, te).acc:.3f}")
print(f"learned rule weight:           {full.checkpoint.weights}")
full.checkpoint.save(f"digit_seed{seed}.ckpt")
print(f"checkpoint written to digit_seed{seed}.ckpt")

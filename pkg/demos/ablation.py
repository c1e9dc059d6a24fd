"""Compare the full objective with its ablations on digit addition.

The training objective is alpha * O_task + beta * O_logic - gamma * L_cro.
Each variant switches off one part: -SRM drops the logic terms, -NRM halves the
task term, and -OI drops the cross term.

    python3 demos/ablation.py [seed]
"""

import sys

from nesymln.tasks import gen_digit_dataset, make_addition_rules
from nesymln.trainer import TrainConfig, ablation_variants, evaluate, train

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
rules = make_addition_rules(1)
tr = gen_digit_dataset(seed, 300, 0.1)
te = gen_digit_dataset(seed + 1000, 1000, 0.1, "test")

print("variant  alpha  beta  gamma  test_acc")
for name, a, b, g in ablation_variants():
    cfg = TrainConfig(seed=seed, alpha=a, beta=b, gamma=g, em_rounds=60, batch=32, lr_theta1=2e-3, lr_theta2=2e-3)
    acc = evaluate(train(cfg, tr, rules).checkpoint, te).acc
    print(f"{name:7s}  {a:5.1f}  {b:4.1f}  {g:5.1f}  {acc:.3f}")

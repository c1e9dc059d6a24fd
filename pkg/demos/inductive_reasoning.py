"""Reuse a model trained on one-digit sums to add two-digit numbers.

The concept network learned digit(x; d) while training on single-digit pairs.
Swapping in a rewritten rule that combines four digits as 10*a + b + 10*c + d
answers a task never seen in training, with no further training. If each digit
is read correctly with probability p, the four-glyph answer is correct with
probability about p^4.

    python3 demos/inductive_reasoning.py [checkpoint]

Run digit_addition.py first, or pass any checkpoint from `nesymln train`.
"""

import sys

from nesymln.inference import infer_inductive
from nesymln.tasks import gen_digit_probe, gen_multidigit_dataset, make_addition_rules
from nesymln.trainer import Checkpoint, evaluate

path = sys.argv[1] if len(sys.argv) > 1 else "digit_seed0.ckpt"
ck = Checkpoint.load(path)
nets = ck.networks()

x, d = gen_digit_probe(2000, 2000, 0.1)
p = float((nets.concept.forward(nets.task.encode(x))[0]["digit"][:, 0].argmax(1) == d).mean())
print(f"single-glyph digit accuracy p = {p:.4f}, so p^4 = {p ** 4:.4f}")

two = make_addition_rules(2)
print(f"rewritten rule:\n  {two.rules[0].render()}")
test = gen_multidigit_dataset(3000, 2000, 0.1)
print(f"two-digit addition accuracy:  {evaluate(ck, test, 'inductive', two).acc:.4f}")

res = infer_inductive(two, nets, test.items[0])
print(f"\nreasoning for one item (true sum {test.labels[0]}):")
print(res.render())

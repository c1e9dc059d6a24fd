"""Classify animals never seen in training, and say why.

Each class is defined by a rule over shared attributes, for example
likecat(x) & tawny(x) & spot(x) => leopard(x). Training sees only some classes
and learns the attribute predicates through their rules. Unseen classes are then
scored by the product of their body atoms, and the top-ranked rule is the
explanation for the prediction.

    python3 demos/zero_shot.py [seed]
"""

import sys

from nesymln.inference import classify_by_rules
from nesymln.tasks import (
    DEFAULT_TEST_CLASSES,
    DEFAULT_TRAIN_CLASSES,
    class_rules_by_head,
    default_attribute_rules,
    gen_attribute_dataset,
)
from nesymln.trainer import TrainConfig, train

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
rules = default_attribute_rules()
data = gen_attribute_dataset(seed, 60, rules, DEFAULT_TEST_CLASSES, noise=0.05)
print(f"seen classes:   {', '.join(DEFAULT_TRAIN_CLASSES)}")
print(f"unseen classes: {', '.join(DEFAULT_TEST_CLASSES)}")

ck = train(TrainConfig(seed=seed, em_rounds=60, batch=32, lr_theta1=1e-2, lr_theta2=1e-2),
           data["train"], rules).checkpoint
test = data["test"]
labels, ranked = classify_by_rules(ck.networks(), test.items, rules, classes=list(DEFAULT_TEST_CLASSES))

correct = [i for i, lab in enumerate(labels) if lab == test.labels[i]]
generating = {c: class_rules_by_head(rules)[c][0].id for c in DEFAULT_TEST_CLASSES}
faithful = sum(ranked[i][0].rule.id == generating[test.labels[i]] for i in correct)
print(f"\nzero-shot accuracy: {len(correct) / len(test):.3f}")
print(f"generating rule ranked first on {faithful}/{len(correct)} correct items")

i = correct[0]
print(f"\nitem 0 is a {test.labels[i]}; top candidates:")
for r in ranked[i][:3]:
    print(f"  {r.posterior:.3f}  {r.rule.render()}")

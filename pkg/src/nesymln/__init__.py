"""Neural-symbolic learning: a task network and a concept network trained
jointly with a Markov logic network through variational EM.

Modules:

* ``logic``      rule language and Łukasiewicz operators
* ``grounding``  instantiating rules over constants
* ``mln``        exact small-graph inference, pseudo-likelihood, weight learning
* ``neural``     task and concept networks with hand-written gradients
* ``bilevel``    pseudo-label nodes bridged to ground atoms, mean field, ELBO
* ``inference``  rule-based explanations and inductive evaluation
* ``tasks``      synthetic digit-addition and attribute zero-shot tasks
* ``trainer``    EM loop, evaluation and checkpoints
* ``cli``        command-line front end
"""

from .logic import RuleSet, parse_rules, render_rules
from .grounding import MlnGraph, ground_rules
from .mln import compile_graph, conditional, log_joint_unnormalized, partition_exact, pseudo_log_likelihood
from .neural import ConceptNetwork, TaskNetwork
from .bilevel import attach_levels, elbo, mean_field
from .inference import classify_by_rules, explain_transductive, infer_inductive
from .tasks import (
    default_attribute_rules,
    gen_attribute_dataset,
    gen_digit_dataset,
    gen_multidigit_dataset,
    make_addition_rules,
)
from .trainer import Checkpoint, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "RuleSet",
    "parse_rules",
    "render_rules",
    "MlnGraph",
    "ground_rules",
    "compile_graph",
    "conditional",
    "log_joint_unnormalized",
    "partition_exact",
    "pseudo_log_likelihood",
    "TaskNetwork",
    "ConceptNetwork",
    "attach_levels",
    "elbo",
    "mean_field",
    "classify_by_rules",
    "explain_transductive",
    "infer_inductive",
    "default_attribute_rules",
    "gen_attribute_dataset",
    "gen_digit_dataset",
    "gen_multidigit_dataset",
    "make_addition_rules",
    "Checkpoint",
    "TrainConfig",
    "evaluate",
    "train",
]

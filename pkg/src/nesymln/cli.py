"""Command-line entry point.

Commands::

    gen-data   write a synthetic dataset file (and optionally its rule file)
    train      run variational EM; writes OUT/final and OUT/diagnostics.tsv
    eval       score a checkpoint, transductive or inductive
    explain    report the best supporting rule for each input item
    infer      evaluate a rewritten rule on input items
    ablate     train the full model and its three ablations, print a table

Training settings come from, in increasing priority: ``TrainConfig``
defaults, a ``--config`` file of ``key = value`` lines, then flags.

Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 numeric
divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .grounding import GroundingCapError
from .inference import (
    UnboundHeadError,
    UntrainedPredicateError,
    classify_by_rules,
    explain_transductive,
    infer_inductive,
)
from .logic import LukDomainError, RuleParseError, parse_rules, render_rules
from .mln import DivergenceError
from .tasks import (
    DEFAULT_TEST_CLASSES,
    DatasetFormatError,
    UncoverableClassError,
    default_attribute_rules,
    gen_attribute_dataset,
    gen_digit_dataset,
    gen_multidigit_dataset,
    load_dataset,
    make_addition_rules,
    save_dataset,
)
from .trainer import (
    ABLATIONS,
    Checkpoint,
    CheckpointError,
    TrainConfig,
    diagnostics_tsv,
    evaluate,
    predict_transductive,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("nesymln")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config -------------------------------------------------------------------

def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"--config {path}: {exc.strerror or exc}") from None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise DataError(f"--config {path}:{n}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


_FLAG_FIELDS = ("seed", "alpha", "beta", "gamma", "em_rounds", "batch", "lr_theta1", "lr_theta2", "lr_w")


def resolve_config(args) -> TrainConfig:
    """Defaults, then the config file, then explicit flags."""
    values: dict = {}
    if getattr(args, "config", None):
        values.update(read_config(args.config))
    for name in _FLAG_FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    try:
        return TrainConfig.from_dict(values)
    except (ValueError, TypeError) as exc:
        raise DataError(f"bad training config: {exc}") from None


# -- helpers ------------------------------------------------------------------

def _existing(path, flag) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{flag} {path}: no such file")
    return p


def _read_rules(path, flag="--rules"):
    text = _existing(path, flag).read_text(encoding="utf-8")
    try:
        return parse_rules(text)
    except RuleParseError as exc:
        raise DataError(f"{flag} {path}: {exc}") from None


def _read_data(path, split=None, flag="--data"):
    _existing(path, flag)
    try:
        return load_dataset(path, split)
    except DatasetFormatError as exc:
        raise DataError(f"{flag} {path}: {exc}") from None


def _load_checkpoint(path) -> Checkpoint:
    p = _existing(path, "--checkpoint")
    try:
        return Checkpoint.load(p)
    except CheckpointError as exc:
        raise DataError(f"--checkpoint {path}: {exc}") from None


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"--out {path}: {exc.strerror or exc}") from None
    return p


def _inductive_rules(args, ck: Checkpoint):
    if args.rules:
        return _read_rules(args.rules)
    if ck.task_pack().kind == "digit":
        return make_addition_rules(args.digits or 2)
    return default_attribute_rules()


def _write(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if args.task == "digit":
        if args.digits == 2:
            splits = [gen_multidigit_dataset(args.seed, args.n_test, args.noise, "test")]
            rules = make_addition_rules(2)
        else:
            splits = [gen_digit_dataset(args.seed, args.n, args.noise, "train"),
                      gen_digit_dataset(args.seed + 1, args.n_test, args.noise, "test")]
            rules = make_addition_rules(1)
        header = {}
    else:
        rules = _read_rules(args.rules) if args.rules else default_attribute_rules()
        try:
            ds = gen_attribute_dataset(args.seed, args.n, rules, list(DEFAULT_TEST_CLASSES)
                                       if not args.rules else None, args.noise)
        except UncoverableClassError as exc:
            raise DataError(str(exc)) from None
        splits = [ds["train"], ds["test"]]
        header = {"classes": ",".join(ds["train"].meta["classes"]),
                  "test_classes": ",".join(ds["test"].meta["classes"])}
    save_dataset(out, splits, header)
    if args.rules_out:
        _write(args.rules_out, render_rules(rules))
    print(f"wrote {sum(len(s) for s in splits)} items to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    rules = _read_rules(args.rules)
    _, data = _read_data(args.data, "train")
    out = _out_dir(args.out)
    _write(out / "config.txt", "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items()))
    meta = {"data": str(Path(args.data).resolve())}
    try:
        res = train(cfg, data, rules, meta=meta)
    except DivergenceError as exc:
        exc.checkpoint.save(out / "last_good")
        print(f"error: training diverged ({exc}); last good state in {out / 'last_good'}", file=sys.stderr)
        return EXIT_DIVERGED
    res.checkpoint.save(out / "final")
    _write(out / "diagnostics.tsv", diagnostics_tsv(res.diagnostics))
    last = res.diagnostics[-1]
    print(f"trained {cfg.em_rounds} rounds: objective {last['objective']:.6f} train_acc {last['train_acc']:.4f}")
    print(f"checkpoint {out / 'final'}")
    return EXIT_OK


def _eval_data(args, ck: Checkpoint):
    path = args.data or ck.meta.get("data")
    if not path:
        raise UsageError("eval: --data is required (the checkpoint does not record its dataset)")
    _, ds = _read_data(path, args.split)
    return ds


def cmd_eval(args) -> int:
    ck = _load_checkpoint(args.checkpoint)
    ds = _eval_data(args, ck)
    rules = _inductive_rules(args, ck) if args.mode == "inductive" else (
        _read_rules(args.rules) if args.rules else None)
    try:
        m = evaluate(ck, ds, args.mode, rules)
    except CheckpointError as exc:
        raise DataError(str(exc)) from None
    d = m.as_dict()
    text = "".join(f"{k}\t{v!r}\n" for k, v in d.items())
    text += f"mode\t{args.mode}\nsplit\t{ds.split}\nn\t{len(ds)}\n"
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(Path(args.checkpoint).name + ".metrics.tsv")
    _write(out, text)
    print(f"acc {d['acc']:.4f} ({args.mode}, {len(ds)} items) -> {out}")
    return EXIT_OK


def _input_items(args):
    _, splits = _read_data(args.input, flag="--input")
    if args.split:
        if args.split not in splits:
            raise DataError(f"--input {args.input}: no {args.split!r} split")
        return splits[args.split]
    return next(iter(splits.values()))


def cmd_explain(args) -> int:
    ck = _load_checkpoint(args.checkpoint)
    nets = ck.networks()
    ds = _input_items(args)
    pack = nets.pack
    blocks = []
    limit = len(ds) if args.limit is None else min(args.limit, len(ds))
    for i in range(limit):
        item = ds.items[i]
        if pack.kind == "attribute" and args.rules:
            rules = _read_rules(args.rules)
            labels, _ = classify_by_rules(nets, item[None], rules)
            ex = explain_transductive(nets, item, rules, prediction=labels[0])
        else:
            label = pack.labels[int(predict_transductive(ck, item[None], nets)[0])]
            ex = explain_transductive(nets, item, prediction=label)
        blocks.append(f"item\t{i}\ntruth\t{ds.labels[i]}\n" + ex.render())
    report = "\n".join(blocks)
    if args.out:
        _write(args.out, report)
    sys.stdout.write(report)
    return EXIT_OK


def cmd_infer(args) -> int:
    ck = _load_checkpoint(args.checkpoint)
    nets = ck.networks()
    rules = _inductive_rules(args, ck)
    ds = _input_items(args)
    limit = len(ds) if args.limit is None else min(args.limit, len(ds))
    blocks = []
    for i in range(limit):
        res = infer_inductive(rules, nets, ds.items[i])
        blocks.append(f"item\t{i}\ntruth\t{ds.labels[i]}\n" + res.render())
    report = "\n".join(blocks)
    if args.out:
        _write(args.out, report)
    sys.stdout.write(report)
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    rules = _read_rules(args.rules)
    _, splits = _read_data(args.data)
    if "train" not in splits:
        raise DataError(f"--data {args.data}: no 'train' split")
    test = splits.get(args.split or "test", splits["train"])
    rows = ["variant\talpha\tbeta\tgamma\tacc"]
    for name, a, b, g in ABLATIONS:
        cfg = TrainConfig.from_dict({**base.to_dict(), "alpha": a, "beta": b, "gamma": g})
        try:
            res = train(cfg, splits["train"], rules)
        except DivergenceError as exc:
            print(f"error: variant {name} diverged ({exc})", file=sys.stderr)
            return EXIT_DIVERGED
        acc = evaluate(res.checkpoint, test).acc
        rows.append(f"{name}\t{a:g}\t{b:g}\t{g:g}\t{acc:.4f}")
    table = "\n".join(rows) + "\n"
    if args.out:
        _write(args.out, table)
    sys.stdout.write(table)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--config", help="file of 'key = value' training settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--em-rounds", dest="em_rounds", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr-theta1", dest="lr_theta1", type=float)
    p.add_argument("--lr-theta2", dest="lr_theta2", type=float)
    p.add_argument("--lr-w", dest="lr_w", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="nesymln", description="Neural-symbolic learning with Markov logic.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log each training round")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--task", choices=("digit", "attribute"), default="digit")
    p.add_argument("--digits", type=int, choices=(1, 2), default=1)
    p.add_argument("--n", type=int, default=300, help="training items (per class for attribute data)")
    p.add_argument("--n-test", dest="n_test", type=int, default=1000)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rules", help="class rules for attribute data")
    p.add_argument("--rules-out", dest="rules_out", help="also write the matching rule file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--rules", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset file (default: the one used for training)")
    p.add_argument("--split", default="test")
    p.add_argument("--mode", choices=("transductive", "inductive"), default="transductive")
    p.add_argument("--rules", help="rule set; the rewritten one in inductive mode")
    p.add_argument("--digits", type=int, choices=(1, 2), help="built-in addition rules for inductive mode")
    p.add_argument("--out", help="metrics file (default: CHECKPOINT.metrics.tsv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="explain predictions with rules")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="dataset file of items to explain")
    p.add_argument("--split")
    p.add_argument("--rules", help="class rules for zero-shot attribute items")
    p.add_argument("--limit", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("infer", help="apply a rewritten rule to new inputs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--split")
    p.add_argument("--rules", help="rewritten rule file")
    p.add_argument("--digits", type=int, choices=(1, 2))
    p.add_argument("--limit", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="compare the full model with its ablations")
    p.add_argument("--rules", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--out")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return ap


_DATA_ERRORS = (DataError, RuleParseError, DatasetFormatError, CheckpointError, GroundingCapError,
                UncoverableClassError, UnboundHeadError, UntrainedPredicateError, LukDomainError,
                OSError, json.JSONDecodeError, ValueError)


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        if args.command is None:
            raise UsageError("nesymln: a command is required (see --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""``mote`` command line: data generation, training, recording, maps, projection and experiments.

Settings are resolved in three layers: built-in defaults, then the YAML file
given with ``--config`` (top-level keys or a section named after the
subcommand), then explicit command-line flags. The resolved settings are
written next to the outputs of every run.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import analysis
from ._io import atomic_write_text, csv_text
from .dataset import (
    BehaviorClass,
    LabeledPrompt,
    PromptTemplate,
    classify_response,
    generate_dataset,
    generate_language_dataset,
    read_jsonl,
    split_heldout,
    write_jsonl,
)
from .exceptions import ConfigurationError, InputError, MoteError, NumericError
from .ftri import FtriSelector, prompt_activation_map
from .model import ForwardTrace, ModelConfig, generate_many, init_model, load_model, save_model
from .projection import TsneConfig, tsne
from .routing import TuningConfig, limit_per_layer, parse_expert_tuples, read_tuning_file
from .study import STEERING_MODEL
from .svg import heatmap_svg, scatter_svg
from .trainer import TrainConfig, eval_quality, train

log = logging.getLogger("mote")

DEFAULTS = {
    "gen-data": {"template": "behavior", "out": "data/behavior.jsonl", "heldout_fraction": 0.0, "seed": 0,
                 "ratio": None},
    "train": {"data": ["behavior", "neutral:train"], "out": "run/model.npz", "seed": 0,
              "model": dict(STEERING_MODEL), "steps": 3000, "batch_size": 64, "learning_rate": 3e-3,
              "aux_balance_coeff": 0.01, "stop_accuracy": None},
    "record": {"checkpoint": "run/model.npz", "data": "behavior", "out": "run/traces.jsonl", "max_new": 3},
    "ftri": {"traces": "run/traces.jsonl", "target": "REFUSED", "n": 10, "scope": "prompt", "aggregation": "count",
             "out_dir": "run/ftri"},
    "project": {"traces": "run/traces.jsonl", "perplexity": 30.0, "iterations": 1000, "seed": 0,
                "scope": "prompt", "aggregation": "count", "out_dir": "run/projection"},
    "experiment": {"checkpoint": "run/model.npz", "data": "behavior", "control_seeds": [0, 1, 2, 3, 4],
                   "classes": "behavior", "out": "run/experiment.json"},
    "quality": {"checkpoint": "run/model.npz", "data": "neutral:heldout", "out": "run/quality.json"},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(path: str | None, command: str) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{p}: invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{p}: top level must be a mapping")
    section = raw.get(command, {})
    flat = {k: v for k, v in raw.items() if k not in DEFAULTS}
    return {**flat, **(section or {})}


def resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    from_file = _load_config(args.config, command)
    unknown = set(from_file) - set(cfg) - {"suppress", "stimulate", "tuning_file", "tuning_mode", "heldout_fraction"}
    if unknown:
        raise ConfigurationError(f"unknown {command} settings: {sorted(unknown)}")
    cfg.update(from_file)
    for key, value in vars(args).items():
        if key not in ("config", "command", "func", "verbose") and value is not None:
            cfg[key] = value
    return cfg


def _emit_config(cfg: dict, out: Path) -> None:
    atomic_write_text(out, yaml.safe_dump(cfg, sort_keys=True))


# -- data helpers -------------------------------------------------------------


def load_prompts(spec) -> list[LabeledPrompt]:
    """A ``.jsonl`` path, a bundled template name, or ``name:train`` / ``name:heldout``.

    Named splits withhold 25% of the combinations with seed 0, matching
    ``gen-data --heldout-fraction 0.25``.
    """
    if isinstance(spec, (list, tuple)):
        return [p for s in spec for p in load_prompts(s)]
    spec = str(spec)
    if spec.endswith(".jsonl"):
        return read_jsonl(spec)
    name, _, split = spec.partition(":")
    prompts = generate_language_dataset() if name == "language" else generate_dataset(PromptTemplate.load(name))
    if not split:
        return prompts
    stratify = name != "neutral"
    train_part, held = split_heldout(prompts, 0.25, seed=0, stratify=stratify)
    if split == "train":
        return train_part
    if split == "heldout":
        return held
    raise ConfigurationError(f"unknown split {split!r} in {spec!r}")


def tuning_from(cfg: dict, k: int | None = None) -> TuningConfig:
    supp, stim = [], []
    if cfg.get("tuning_file"):
        t = read_tuning_file(cfg["tuning_file"], cfg.get("tuning_mode") or "suppress")
        supp += t.suppressed
        stim += t.stimulated
    if cfg.get("suppress"):
        supp += parse_expert_tuples(str(cfg["suppress"]))
    if cfg.get("stimulate"):
        stim += parse_expert_tuples(str(cfg["stimulate"]))
    if k is not None and stim:
        stim = list(limit_per_layer(stim, k))
    return TuningConfig(suppressed=tuple(supp), stimulated=tuple(stim))


def _trace_json(p: LabeledPrompt, tr: ForwardTrace, cls: BehaviorClass) -> dict:
    return {
        "prompt_id": p.prompt_id,
        "class": cls.name,
        "tokens": tr.tokens.tolist(),
        "is_prompt": tr.is_prompt.astype(int).tolist(),
        "expert_ids": tr.expert_ids.tolist(),
        "gate_weights": np.round(tr.gate_weights, 12).tolist(),
    }


def read_traces(path) -> tuple[list[str], list[BehaviorClass], list[ForwardTrace], int]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"trace file not found: {path}")
    ids, labels, traces = [], [], []
    n_experts = 0
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            if "n_routed_experts" in d:
                n_experts = int(d["n_routed_experts"])
                continue
            traces.append(ForwardTrace(np.array(d["tokens"]), np.array(d["expert_ids"]), np.array(d["gate_weights"]),
                                       np.array(d["is_prompt"], dtype=bool)))
            ids.append(d["prompt_id"])
            labels.append(BehaviorClass[d["class"]])
        except (KeyError, ValueError, TypeError) as exc:
            raise InputError(f"{path}:{n}: malformed trace record ({exc})") from exc
    if not traces:
        raise InputError(f"{path}: no traces")
    return ids, labels, traces, n_experts


# -- subcommands ----------------------------------------------------------------


def cmd_gen_data(cfg: dict) -> int:
    name = cfg["template"]
    if name == "language":
        prompts = generate_language_dataset(ratio=tuple(cfg["ratio"]) if cfg["ratio"] else None, seed=cfg["seed"])
    else:
        prompts = generate_dataset(PromptTemplate.load(name))
    out = Path(cfg["out"])
    if cfg["heldout_fraction"]:
        train_part, held = split_heldout(prompts, cfg["heldout_fraction"], seed=cfg["seed"], stratify=name != "neutral")
        write_jsonl(out, train_part)
        write_jsonl(out.with_name(out.stem + ".heldout.jsonl"), held)
        print(f"wrote {len(train_part)} train and {len(held)} held-out prompts")
    else:
        write_jsonl(out, prompts)
        print(f"wrote {len(prompts)} prompts to {out}")
    _emit_config(cfg, out.with_name(out.stem + ".config.yaml"))
    return 0


def cmd_train(cfg: dict) -> int:
    data = load_prompts(cfg["data"])
    vocab = max(max(p.tokens + p.completion) for p in data) + 1
    mcfg = ModelConfig(**{"vocab_size": max(64, vocab), **cfg["model"], "seed": cfg["seed"]}).validate()
    tcfg = TrainConfig(steps=cfg["steps"], batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"],
                       aux_balance_coeff=cfg["aux_balance_coeff"], seed=cfg["seed"],
                       stop_accuracy=cfg["stop_accuracy"], eval_every=100)
    model, report = train(init_model(mcfg), data, tcfg)
    out = Path(cfg["out"])
    save_model(out, model)
    atomic_write_text(out.with_suffix(".loss.csv"), report.loss_csv())
    summary = {"steps_run": report.steps_run, "train_accuracy": report.train_accuracy,
               "max_expert_load": float(report.expert_load.max())}
    atomic_write_text(out.with_suffix(".report.json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit_config(cfg, out.with_suffix(".config.yaml"))
    print(f"trained {report.steps_run} steps, train accuracy {report.train_accuracy:.3f}; checkpoint {out}")
    return 0


def cmd_record(cfg: dict) -> int:
    model = load_model(cfg["checkpoint"])
    prompts = load_prompts(cfg["data"])
    tuning = tuning_from(cfg, model.config.top_k)
    tokens, traces = generate_many(model, [p.tokens for p in prompts], cfg["max_new"], tuning)
    lines = [json.dumps({"n_routed_experts": model.config.n_routed_experts, "tuning": tuning.to_dict()})]
    for p, t, tr in zip(prompts, tokens, traces):
        lines.append(json.dumps(_trace_json(p, tr, classify_response(t[len(p.tokens):]))))
    out = Path(cfg["out"])
    atomic_write_text(out, "\n".join(lines) + "\n")
    _emit_config(cfg, out.with_suffix(".config.yaml"))
    print(f"recorded {len(traces)} traces to {out}")
    return 0


def _maps(traces, n_experts, cfg):
    return [prompt_activation_map(t, n_experts, cfg["scope"], cfg["aggregation"]) for t in traces]


def cmd_ftri(cfg: dict) -> int:
    _, labels, traces, E = read_traces(cfg["traces"])
    try:
        target = BehaviorClass[str(cfg["target"]).upper()]
    except KeyError:
        raise ConfigurationError(f"unknown target class {cfg['target']!r}") from None
    sel = FtriSelector(target=target, n_experts=int(cfg["n"]), scope=cfg["scope"], aggregation=cfg["aggregation"])
    sel.fit(_maps(traces, E, cfg), labels)
    out = Path(cfg["out_dir"])
    name = target.name.lower()
    sel.save(out / f"{name}_ftri.csv", out / f"{name}_experts.txt")
    svg = heatmap_svg(sel.differential_map_.values, sel.experts_, f"{target.name} differential map")
    atomic_write_text(out / f"{name}_ftri.svg", svg)
    _emit_config(cfg, out / "ftri.config.yaml")
    for a, v in sel.distinctive_:
        print(f"({a.layer}, {a.expert})  {v:+.4f}")
    return 0


def cmd_project(cfg: dict) -> int:
    ids, labels, traces, E = read_traces(cfg["traces"])
    X = np.stack([m.normalized().reshape(-1) for m in _maps(traces, E, cfg)])
    emb = tsne(X, TsneConfig(perplexity=float(cfg["perplexity"]), iterations=int(cfg["iterations"]),
                             seed=int(cfg["seed"])))
    out = Path(cfg["out_dir"])
    rows = [(i, float(x), float(y), c.name) for i, (x, y), c in zip(ids, emb.coords, labels)]
    atomic_write_text(out / "embedding.csv", csv_text(("prompt_id", "x", "y", "class_label"), rows))
    atomic_write_text(out / "embedding.svg", scatter_svg(emb.coords, [c.name for c in labels]))
    _emit_config(cfg, out / "project.config.yaml")
    print(f"embedded {len(ids)} points, KL {emb.kl:.4f}")
    return 0


def cmd_experiment(cfg: dict) -> int:
    model = load_model(cfg["checkpoint"])
    prompts = load_prompts(cfg["data"])
    tuning = tuning_from(cfg, model.config.top_k)
    if tuning.empty:
        log.warning("empty tuning: the transition matrix will be diagonal")
    classes = analysis.LANGUAGE_CLASSES if cfg["classes"] == "language" else analysis.BEHAVIOR_CLASSES
    report = analysis.run_experiment(model, prompts, tuning, [int(s) for s in cfg["control_seeds"] or []],
                                     classes=classes)
    out = Path(cfg["out"])
    atomic_write_text(out, report.to_json())
    _emit_config(cfg, out.with_suffix(".config.yaml"))
    print(report.summary())
    return 0


def cmd_quality(cfg: dict) -> int:
    model = load_model(cfg["checkpoint"])
    prompts = load_prompts(cfg["data"])
    tuning = tuning_from(cfg, model.config.top_k)
    before = eval_quality(model, prompts)
    after = eval_quality(model, prompts, tuning)
    out = Path(cfg["out"])
    result = {"accuracy_untuned": before, "accuracy_tuned": after, "change_points": 100 * (after - before),
              "tuning": tuning.to_dict(), "n_prompts": len(prompts)}
    atomic_write_text(out, json.dumps(result, indent=2, sort_keys=True) + "\n")
    _emit_config(cfg, out.with_suffix(".config.yaml"))
    print(f"accuracy {before:.4f} -> {after:.4f} ({100 * (after - before):+.2f} points)")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "record": cmd_record,
    "ftri": cmd_ftri,
    "project": cmd_project,
    "experiment": cmd_experiment,
    "quality": cmd_quality,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mote", description="Toy mixture-of-experts expert tuning lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=False, tuning=False, scope=False):
        p.add_argument("--config", help="YAML settings file")
        if seed:
            p.add_argument("--seed", type=int)
        if tuning:
            p.add_argument("--tuning-file", dest="tuning_file", help="file with a (layer, expert) tuple list")
            p.add_argument("--tuning-mode", dest="tuning_mode", choices=("suppress", "stimulate"))
            p.add_argument("--suppress", help='tuple list, e.g. "[(0, 3), (2, 7)]"')
            p.add_argument("--stimulate", help="tuple list")
        if scope:
            p.add_argument("--scope", choices=("prompt", "full"))
            p.add_argument("--aggregation", choices=("count", "weight"))

    p = sub.add_parser("gen-data", help="write a prompt dataset as JSON lines")
    common(p, seed=True)
    p.add_argument("--template")
    p.add_argument("--out")
    p.add_argument("--heldout-fraction", dest="heldout_fraction", type=float)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p, seed=True)
    p.add_argument("--data", nargs="+")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("record", help="generate and record gate decisions")
    common(p, tuning=True)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--out")

    p = sub.add_parser("ftri", help="differential map and distinctive experts")
    common(p, scope=True)
    p.add_argument("--traces")
    p.add_argument("--target")
    p.add_argument("--n", type=int)
    p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("project", help="t-SNE of activation maps")
    common(p, seed=True, scope=True)
    p.add_argument("--traces")
    p.add_argument("--perplexity", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("experiment", help="baseline vs tuned transition matrix with random controls")
    common(p, tuning=True)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--classes", choices=("behavior", "language"))
    p.add_argument("--control-seeds", dest="control_seeds", type=int, nargs="*")
    p.add_argument("--out")

    p = sub.add_parser("quality", help="answer accuracy with and without tuning")
    common(p, tuning=True)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args.command, args)
        return COMMANDS[args.command](cfg)
    except ConfigurationError as exc:
        print(f"mote {args.command}: configuration error: {exc}", file=sys.stderr)
        return 1
    except InputError as exc:
        print(f"mote {args.command}: data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"mote {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 3
    except MoteError as exc:
        print(f"mote {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

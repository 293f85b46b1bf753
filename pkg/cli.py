#!/usr/bin/env python3
"""Command-line entry point for the text-attributed graph pre-training pipeline.

Typical desk run:

    python cli.py gen-synth --data-dir data/synthetic
    python cli.py pretrain --max-steps 200
    python cli.py embed
    python cli.py fewshot --ways 3 --shots 3 --tasks 500

Every subcommand resolves a RunConfig (profile < --config file < UNIGRAPH_*
environment < flags) and writes a `.manifest.json` next to each artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence

import numpy as np
import torch
from dotenv import load_dotenv

from config import FIELD_TYPES, ConfigError, RunConfig, parse_config, write_manifest
from embedder import embed_all_nodes, parameter_checksum, read_embeddings_tsv, write_embeddings_tsv
from eval_harness import (
    ProbeConfig,
    chance_accuracy,
    fewshot_report,
    labeled_from_graph,
    linear_probe,
    sample_fewshot_tasks,
    write_report,
)
from graph_store import TextAttributedGraph, generate_synthetic_tag, load_tag, save_tag
from instruct_export import emit_instruction_dataset, get_template
from ppr_sampler import PprParams, approximate_ppr, top_k_context
from pretrainer import (
    CHECKPOINT_NAME,
    RUN_LOG_NAME,
    PretrainConfig,
    gradient_check,
    load_checkpoint,
    pretrain,
    tiny_gradcheck_setup,
)


LOGGER = logging.getLogger("cli")

NODES_FILE = "nodes.jsonl"
EDGES_FILE = "edges.jsonl"
SPLITS_FILE = "splits.json"
EMBEDDINGS_FILE = "embeddings.tsv"

COMMANDS = ("gen-synth", "pretrain", "embed", "sample-ppr", "probe", "fewshot", "emit-instructions", "gradcheck")

# Short spellings accepted by single subcommands, mapped to config keys.
ALIASES: Dict[str, Dict[str, str]] = {
    "sample-ppr": {"--alpha": "ppr_alpha", "--epsilon": "ppr_epsilon", "--topk": "ppr_topk"},
    "probe": {"--lr": "probe_lr", "--epochs": "probe_epochs"},
}


def configure_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def add_config_flags(parser: argparse.ArgumentParser, command: str) -> None:
    """One override flag per RunConfig key; unset flags stay out of the namespace."""
    aliases = ALIASES.get(command, {})
    group = parser.add_argument_group("config overrides")
    for key, kind in FIELD_TYPES.items():
        if _flag(key) in aliases:
            continue
        if kind is bool:
            group.add_argument(_flag(key), dest=key, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS)
        else:
            group.add_argument(_flag(key), dest=key, type=kind, default=argparse.SUPPRESS, metavar=kind.__name__.upper())
    for flag, key in aliases.items():
        kind = FIELD_TYPES[key]
        group.add_argument(flag, dest=key, type=kind, default=argparse.SUPPRESS, help=f"alias for {_flag(key)}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Pre-train a masked LM + GNN encoder on a text-attributed graph and evaluate its embeddings."
    )
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "gen-synth": "Write a synthetic labeled graph to --data-dir.",
        "pretrain": "Pre-train on the graph in --data-dir; checkpoint into --run-dir.",
        "embed": "Write node embeddings (TSV) from the checkpoint in --run-dir.",
        "sample-ppr": "Print the PPR contextual subgraph of one anchor.",
        "probe": "Linear probe over an embedding TSV.",
        "fewshot": "N-way K-shot prototype evaluation over an embedding TSV.",
        "emit-instructions": "Export an instruction-tuning JSONL dataset.",
        "gradcheck": "Finite-difference check of the fused loss gradients on a tiny model.",
    }
    for command in COMMANDS:
        sub = subparsers.add_parser(command, help=helps[command], description=helps[command])
        sub.add_argument("--config", type=Path, help="JSON config file (keys starting with '_' are comments).")
        sub.add_argument("--verbose", action="store_true", help="Enable debug logging and progress bars.")
        add_config_flags(sub, command)
        if command == "pretrain":
            sub.add_argument("--resume", action="store_true", help="Continue from the checkpoint in --run-dir.")
        if command == "sample-ppr":
            sub.add_argument("--anchor", type=int, required=True, help="Anchor node id (as in nodes.jsonl).")
        if command in ("embed", "sample-ppr", "probe", "fewshot", "emit-instructions", "gradcheck"):
            sub.add_argument("--out", type=Path, help="Output path (defaults under --run-dir).")
        if command in ("probe", "fewshot", "emit-instructions"):
            sub.add_argument("--embeddings", type=Path, help=f"Embedding TSV (default: <run-dir>/{EMBEDDINGS_FILE}).")
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    return build_parser().parse_args(argv)


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    return {key: getattr(args, key) for key in FIELD_TYPES if hasattr(args, key)}


def pretrain_config(cfg: RunConfig) -> PretrainConfig:
    return PretrainConfig(**{f.name: getattr(cfg, f.name) for f in fields(PretrainConfig)})


def ppr_params(cfg: RunConfig) -> PprParams:
    return PprParams(alpha=cfg.ppr_alpha, epsilon=cfg.ppr_epsilon, topk=cfg.ppr_topk)


def probe_config(cfg: RunConfig) -> ProbeConfig:
    return ProbeConfig(
        lr=cfg.probe_lr,
        epochs=cfg.probe_epochs,
        patience=cfg.probe_patience,
        eval_every=cfg.probe_eval_every,
        bias=cfg.probe_bias,
        seed=cfg.seed,
    )


def manifest_payload(cfg: RunConfig, command: str, **extra: Any) -> Dict[str, Any]:
    payload = {"command": command, "config": cfg.to_dict(), "seed": cfg.seed}
    payload.update(extra)
    return payload


def apply_runtime(cfg: RunConfig) -> None:
    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def load_graph(cfg: RunConfig) -> TextAttributedGraph:
    data_dir = Path(cfg.data_dir)
    splits = data_dir / SPLITS_FILE
    return load_tag(data_dir / NODES_FILE, data_dir / EDGES_FILE, splits if splits.exists() else None)


def _embeddings_path(args: argparse.Namespace, cfg: RunConfig) -> Path:
    return args.embeddings or Path(cfg.run_dir) / EMBEDDINGS_FILE


def cmd_gen_synth(args: argparse.Namespace, cfg: RunConfig) -> int:
    graph = generate_synthetic_tag(
        cfg.num_classes,
        cfg.nodes_per_class,
        cfg.intra_p,
        cfg.inter_p,
        seed=cfg.seed,
        words_per_node=cfg.words_per_node,
        noise_ratio=cfg.noise_ratio,
    )
    data_dir = Path(cfg.data_dir)
    paths = [data_dir / NODES_FILE, data_dir / EDGES_FILE, data_dir / SPLITS_FILE]
    save_tag(graph, *paths)
    for path in paths:
        write_manifest(path, manifest_payload(cfg, "gen-synth", num_nodes=graph.num_nodes,
                                              num_edges=graph.num_entries // 2))
    LOGGER.info("Wrote synthetic graph (%s nodes, %s edges) to %s", graph.num_nodes, graph.num_entries // 2, data_dir)
    return 0


def cmd_pretrain(args: argparse.Namespace, cfg: RunConfig) -> int:
    graph = load_graph(cfg)
    train_cfg = pretrain_config(cfg)
    run_dir = Path(cfg.run_dir)
    checkpoint = run_dir / CHECKPOINT_NAME

    state = None
    if args.resume and checkpoint.exists():
        state = load_checkpoint(checkpoint)
        schedule = {"epochs": train_cfg.epochs, "max_steps": train_cfg.max_steps,
                    "log_every": train_cfg.log_every, "checkpoint_every": train_cfg.checkpoint_every}
        if replace(state.config, **schedule) != train_cfg:
            raise ConfigError("checkpoint was trained with a different configuration; only the schedule may change")
        state.config = train_cfg
        LOGGER.info("Resuming from %s at step %s", checkpoint, state.step)
    elif args.resume:
        LOGGER.warning("No checkpoint at %s; starting from scratch", checkpoint)

    extra = manifest_payload(cfg, "pretrain")
    state, reports = pretrain(
        graph, train_cfg, ppr_params(cfg), run_dir=run_dir, state=state,
        manifest_extra=extra, show_progress=args.verbose,
    )
    write_manifest(run_dir / RUN_LOG_NAME, manifest_payload(cfg, "pretrain", final_step=state.step))
    if reports:
        LOGGER.info("Finished at step %s: loss %.4f", state.step, reports[-1].loss_total)
    return 0


def cmd_embed(args: argparse.Namespace, cfg: RunConfig) -> int:
    graph = load_graph(cfg)
    state = load_checkpoint(Path(cfg.run_dir) / CHECKPOINT_NAME)
    embeddings = embed_all_nodes(state, graph, ppr_params(cfg), pre_gnn=cfg.pre_gnn)
    out = args.out or Path(cfg.run_dir) / EMBEDDINGS_FILE
    write_embeddings_tsv(embeddings, out, id_map=graph.original_ids)
    write_manifest(out, manifest_payload(
        cfg, "embed", checkpoint_step=state.step, parameter_checksum=parameter_checksum(state),
        num_rows=len(embeddings.node_ids), dim=embeddings.dim,
    ))
    LOGGER.info("Wrote %s embedding(s) to %s", len(embeddings.node_ids), out)
    return 0


def cmd_sample_ppr(args: argparse.Namespace, cfg: RunConfig) -> int:
    graph = load_graph(cfg)
    params = ppr_params(cfg)
    anchor = graph.dense_id(args.anchor)
    scores = approximate_ppr(graph, anchor, params)
    context = top_k_context(scores, anchor, params.topk)
    ranked = [v for v in scores.ranked() if v in context]
    ids = graph.original_ids
    payload = {
        "anchor": args.anchor,
        "alpha": params.alpha,
        "epsilon": params.epsilon,
        "topk": params.topk,
        "nodes": [int(ids[v]) for v in ranked],
        "scores": [scores.score(v) for v in ranked],
        "max_residual_ratio": scores.max_residual_ratio(),
    }
    if args.out:
        write_report(payload, args.out)
        write_manifest(args.out, manifest_payload(cfg, "sample-ppr"))
    else:
        print(json.dumps(payload, indent=2))
    return 0


def cmd_probe(args: argparse.Namespace, cfg: RunConfig) -> int:
    graph = load_graph(cfg)
    dataset = labeled_from_graph(_remap_embeddings(args, cfg, graph), graph)
    train, valid, test = (dataset.split(name) for name in ("train", "valid", "test"))
    result = linear_probe(train, valid, test, probe_config(cfg))
    payload = result.to_dict()
    payload["chance_accuracy"] = chance_accuracy(test[1])
    out = args.out or Path(cfg.run_dir) / "probe_report.json"
    write_report(payload, out)
    write_manifest(out, manifest_payload(cfg, "probe"))
    LOGGER.info("Probe test accuracy %.4f (chance %.4f)", result.test_accuracy, payload["chance_accuracy"])
    return 0


def cmd_fewshot(args: argparse.Namespace, cfg: RunConfig) -> int:
    graph = load_graph(cfg)
    dataset = labeled_from_graph(_remap_embeddings(args, cfg, graph), graph)
    tasks = sample_fewshot_tasks(dataset, cfg.ways, cfg.shots, cfg.tasks, seed=cfg.seed, max_query=cfg.max_query)
    report = fewshot_report(tasks)
    payload = report.to_dict()
    out = args.out or Path(cfg.run_dir) / "fewshot_report.json"
    write_report(payload, out)
    write_manifest(out, manifest_payload(cfg, "fewshot"))
    LOGGER.info("%s-way %s-shot over %s tasks: %.4f +/- %.4f",
                report.ways, report.shots, report.num_tasks, report.mean, report.std)
    return 0


def cmd_emit_instructions(args: argparse.Namespace, cfg: RunConfig) -> int:
    graph = load_graph(cfg)
    template = get_template(cfg.template_domain)
    split_ids = (graph.splits or {}).get(cfg.instruction_split)
    split_edges = (graph.edge_splits or {}).get(cfg.instruction_split)
    if split_edges is not None and template.level != "edge":
        raise ValueError(f"split '{cfg.instruction_split}' lists edge pairs; '{template.domain}' needs node ids")
    if split_ids is None and split_edges is None:
        raise ValueError(f"graph has no '{cfg.instruction_split}' split")
    embeddings_path = _embeddings_path(args, cfg)
    embeddings = read_embeddings_tsv(embeddings_path)
    out = args.out or Path(cfg.run_dir) / f"instructions_{cfg.template_domain}.jsonl"
    count = emit_instruction_dataset(
        graph, embeddings, split_ids or (), template, out,
        ppr=ppr_params(cfg), neighbor_cap=cfg.neighbor_cap, inline=cfg.inline, split_edges=split_edges,
    )
    write_manifest(out, manifest_payload(cfg, "emit-instructions", records=count,
                                         embeddings=str(embeddings_path)))
    return 0


def cmd_gradcheck(args: argparse.Namespace, cfg: RunConfig) -> int:
    state, graph, anchors = tiny_gradcheck_setup(seed=cfg.seed)
    report = gradient_check(state, graph, anchors, tolerance=cfg.gradcheck_tolerance, seed=cfg.seed)
    if args.out:
        write_report(report.to_dict(), args.out)
        write_manifest(args.out, manifest_payload(cfg, "gradcheck"))
    if not report.passed:
        LOGGER.error("Gradient check failed: max relative error %.3e", report.max_rel_error)
        return 1
    return 0


def _remap_embeddings(args: argparse.Namespace, cfg: RunConfig, graph: TextAttributedGraph):
    """Read a TSV (input ids) and re-key its rows by dense graph id."""
    embeddings = read_embeddings_tsv(_embeddings_path(args, cfg))
    embeddings.node_ids = np.asarray([graph.dense_id(int(v)) for v in embeddings.node_ids.tolist()], dtype=np.int64)
    return embeddings


HANDLERS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "gen-synth": cmd_gen_synth,
    "pretrain": cmd_pretrain,
    "embed": cmd_embed,
    "sample-ppr": cmd_sample_ppr,
    "probe": cmd_probe,
    "fewshot": cmd_fewshot,
    "emit-instructions": cmd_emit_instructions,
    "gradcheck": cmd_gradcheck,
}


def run_command(command: str, cfg: RunConfig, args: argparse.Namespace) -> int:
    if command not in HANDLERS:
        raise ValueError(f"Unknown command: {command}")
    apply_runtime(cfg)
    return HANDLERS[command](args, cfg)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    configure_logging(args.verbose)
    load_dotenv()
    try:
        cfg = parse_config(args.config, overrides_from_args(args))
        return run_command(args.command, cfg, args)
    except KeyboardInterrupt:  # pragma: no cover - convenience
        LOGGER.warning("Cancelled by user")
        return 1
    except Exception as exc:
        LOGGER.debug("Command failed", exc_info=True)
        LOGGER.error("%s: %s", type(exc).__name__, str(exc).splitlines()[0] if str(exc) else "")
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""
CLI del toolkit G5: preprocess, train, reason y report.

Ejemplos:
    python g5_cli.py preprocess --config config/experiments/isolated.yaml
    python g5_cli.py train --config config/experiments/isolated.yaml --seed 1
    python g5_cli.py train --config config/experiments/mixed.yaml --portal-k 30
    python g5_cli.py train --config config/experiments/transfer.yaml --ratio 0.05 --checkpoint runs/.../final.g5ck
    python g5_cli.py reason --config config/experiments/zero_label.yaml --checkpoint runs/.../final.g5ck --strategy cccm
    python g5_cli.py report runs/metrics.csv
"""

from __future__ import annotations

import argparse
import math
import re
import statistics
import sys
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv
from pydantic import ValidationError

from apocalypse import CrossClassifierBank, cccm_fit, cdr_fit, prepare_target, reasoned_accuracy
from checkpoint_store import Checkpoint, load_checkpoint, save_checkpoint
from graph_io import GraphDataset, load_citation_graph, make_split
from logger_config import logger
from metrics import MetricRecord, export_metrics, read_metrics
from preprocess import cache_path, preprocess_graph
from src.errors import ConfigError, G5Error, IncompatibleVersionError, IntegrityError, NumericError
from src.messages import get_message
from src.settings import RunConfig
from training import (
    GraphData,
    RunMode,
    TaskSchedule,
    TrainingState,
    evaluate_splits,
    fine_tune,
    hybrid_pretrain,
    new_state,
    transfer_init,
)

METRICS_FILE = "metrics.csv"


# -- config resolution ------------------------------------------------------------

def resolve_config(args: argparse.Namespace) -> RunConfig:
    """YAML (+ env) first, then CLI flags on top."""
    config = RunConfig.load(getattr(args, "config", None))
    config = config.with_overrides(
        mode=getattr(args, "mode", None),
        seed=getattr(args, "seed", None),
        ratio=getattr(args, "ratio", None),
        out_dir=getattr(args, "out", None),
        universal_k=getattr(args, "portal_k", None),
        checkpoint=getattr(args, "checkpoint", None),
        pretrain=False if getattr(args, "no_pretrain", False) else None,
        **{"reasoning.strategy": getattr(args, "strategy", None)},
    )
    # sin preentrenamiento no hay checkpoint que fije k: manda el k del objetivo, salvo --portal-k
    if config.mode == "transfer" and not config.pretrain and getattr(args, "portal_k", None) is None:
        config = config.with_overrides(universal_k=int(config.graph(config.target_id()).k))
    return config


def make_run_id(config: RunConfig, strategy: Optional[str] = None) -> str:
    parts = [
        f"mode={config.mode}",
        f"sources={'+'.join(config.source_ids())}",
        f"target={config.target or '-'}",
        f"k={config.resolved_universal_k()}",
        f"ratio={config.ratio:g}",
        f"strategy={strategy or '-'}",
        f"seed={config.seed}",
    ]
    if config.mode == "transfer" and not config.pretrain:
        parts[1] = "sources=none"
    return ";".join(parts)


def parse_run_id(run_id: str) -> Dict[str, str]:
    fields: Dict[str, str] = {}
    for part in run_id.split(";"):
        key, _, value = part.partition("=")
        if key:
            fields[key] = value
    return fields


def run_dir(config: RunConfig, run_id: str) -> Path:
    slug = re.sub(r"[^A-Za-z0-9_.+-]+", "_", run_id.replace(";", "__").replace("=", "-"))
    return Path(config.out_dir) / slug


# -- data -----------------------------------------------------------------------------

def load_graph(config: RunConfig, graph_id: str) -> GraphDataset:
    settings = config.graph(graph_id)
    content, cites = settings.resolve_paths(config.data_dir)
    for path in (content, cites):
        if not path.is_file():
            raise ConfigError(f"dataset file not found for '{graph_id}': {path}")
    dataset = load_citation_graph(content, cites, graph_id)
    return make_split(dataset, config.seed, settings.split, settings.train_ratio, settings.val_ratio)


def prepare_graph(config: RunConfig, graph_id: str, lock_labels: bool = False) -> Tuple[GraphData, bool]:
    dataset = load_graph(config, graph_id)
    if lock_labels:
        dataset.guard.lock("zero-label target")
    k = int(config.graph(graph_id).k)
    batch, fresh = preprocess_graph(dataset, k, config.preprocess, config.cache_dir)
    return GraphData(dataset, batch), fresh


def _segment_epochs(config: RunConfig, graph_id: str, override: Optional[int]) -> int:
    if override is not None:
        return override
    return math.ceil(int(config.graph(graph_id).epochs) / config.schedule.rounds)


# -- commands -------------------------------------------------------------------------

def cmd_preprocess(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    for gid in config.involved_ids():
        data, fresh = prepare_graph(config, gid)
        path = cache_path(config.cache_dir, gid, data.batch.k, config.preprocess)
        key = "cache_fresh" if fresh else "cache_written"
        print(get_message(key, graph=gid, path=path))
    return 0


def _print_scores(graph_id: str, scores: Dict[str, float]) -> None:
    for split in ("train", "val", "test"):
        if split in scores:
            print(get_message("accuracy_line", graph=graph_id, split=split, value=scores[split]))


def _checkpoint_meta(config: RunConfig, state: TrainingState, run_id: str, **extra) -> Dict[str, object]:
    return {"run": run_id, "seed": config.seed, **state.schedule_position(), **extra}


def _checkpoint_hook(config: RunConfig, run_id: str):
    def _save(round_idx: int, state: TrainingState) -> None:
        path = run_dir(config, run_id) / f"round_{round_idx}.g5ck"
        save_checkpoint(state.model.to_checkpoint(_checkpoint_meta(config, state, run_id, round=round_idx)), path)

    return _save


def _pretrain_sources(config: RunConfig, sources: Sequence[str], run_id: str) -> TrainingState:
    graphs = {gid: prepare_graph(config, gid)[0] for gid in sources}
    state = new_state(config.model, config.resolved_universal_k(), graphs, config, run_id)
    schedule = TaskSchedule.from_config(config, list(sources))
    return hybrid_pretrain(state, list(sources), schedule, on_round_end=_checkpoint_hook(config, run_id))


def _finish_run(config: RunConfig, state: TrainingState, run_id: str) -> Path:
    final = run_dir(config, run_id) / "final.g5ck"
    save_checkpoint(state.model.to_checkpoint(_checkpoint_meta(config, state, run_id, mode=config.mode)), final)
    metrics_path = Path(config.out_dir) / METRICS_FILE
    rows = export_metrics(state.records, metrics_path)
    print(get_message("metrics_written", path=metrics_path, rows=rows))
    print(get_message("train_done", checkpoint=final))
    return final


def _train_isolated_or_mixed(config: RunConfig, run_id: str) -> TrainingState:
    sources = config.source_ids()
    state = _pretrain_sources(config, sources, run_id)
    if config.mode == "mixed":
        # ajuste fino supervisado por grafo sobre toda la pila
        for gid in sources:
            epochs = _segment_epochs(config, gid, config.schedule.finetune_epochs)
            g = config.graph(gid)
            fine_tune(state, gid, config.schedule.finetune_tasks, 1.0, config.seed, epochs, float(g.lr), config.model.weight_decay)
    for gid in sources:
        epoch = state.epochs_seen.get(f"{gid}/classify", 0)
        _print_scores(gid, evaluate_splits(state, gid, epoch))
    return state


def _train_transfer(config: RunConfig, run_id: str) -> TrainingState:
    target = config.target_id()
    target_data, _ = prepare_graph(config, target)
    if not config.pretrain:
        state = new_state(config.model, config.resolved_universal_k(), {target: target_data}, config, run_id)
    else:
        if config.checkpoint:
            checkpoint = load_checkpoint(config.checkpoint)
        else:
            pretrain_id = make_run_id(config.with_overrides(mode="mixed"))
            pretrained = _pretrain_sources(config, config.source_ids(), pretrain_id)
            checkpoint = pretrained.model.to_checkpoint(_checkpoint_meta(config, pretrained, pretrain_id))
        state = transfer_init(checkpoint, target_data, config, run_id, sources=[])
    g = config.graph(target)
    ft = config.schedule.finetune_epochs
    epochs = int(g.epochs) if ft is None else ft
    mode = RunMode("transfer", config.source_ids(), target, config.ratio)
    fine_tune(state, target, config.schedule.finetune_tasks, config.ratio, config.seed, epochs, float(g.lr), config.model.weight_decay, mode)
    epoch = state.epochs_seen.get(f"{target}/classify", 0)
    _print_scores(target, evaluate_splits(state, target, epoch))
    return state


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    strategy = config.reasoning.strategy if config.mode == "apocalypse" else None
    run_id = make_run_id(config, strategy)
    if getattr(args, "dry_run", False):
        print(get_message("dry_run_header"))
        print(f"  run: {run_id}")
        for line in TaskSchedule.from_config(config, config.source_ids()).describe():
            print(f"  {line}")
        return 0

    logger.info("Starting run %s", run_id)
    if config.mode in ("isolated", "mixed"):
        state = _train_isolated_or_mixed(config, run_id)
    elif config.mode == "transfer":
        state = _train_transfer(config, run_id)
    else:
        pretrain_id = make_run_id(config.with_overrides(mode="mixed"))
        state = _pretrain_sources(config, config.source_ids(), pretrain_id)
        checkpoint = state.model.to_checkpoint(_checkpoint_meta(config, state, pretrain_id))
        _finish_run(config, state, pretrain_id)
        return _reason(config, checkpoint, run_id)
    _finish_run(config, state, run_id)
    return 0


def _reason(config: RunConfig, checkpoint: Checkpoint, run_id: str) -> int:
    target = config.target_id()
    sources = list(config.sources)
    target_data, _ = prepare_graph(config, target, lock_labels=True)
    state = transfer_init(checkpoint, target_data, config, run_id, sources=sources)
    mode = RunMode("apocalypse", sources, target)
    reasoning = config.reasoning
    epochs = _segment_epochs(config, target, reasoning.finetune_epochs)
    reps = prepare_target(
        state, target, mode, reasoning.finetune_tasks, epochs,
        float(config.graph(target).lr), config.model.weight_decay,
    )
    bank = CrossClassifierBank.from_model(state, sources)
    num_classes = target_data.dataset.num_classes
    node_ids = list(target_data.dataset.node_ids)
    if reasoning.strategy == "cccm":
        reasoned = cccm_fit(reps, bank, num_classes, reasoning.epochs, reasoning.lr, config.seed,
                            config.model.head_depth, node_ids)
    else:
        reasoned = cdr_fit(reps, bank, num_classes, reasoning.epochs, reasoning.lr,
                           reasoning.routing_iterations, config.seed, config.model.head_depth, node_ids)

    labels_path = run_dir(config, run_id) / "reasoned_labels.csv"
    rows = reasoned.to_csv(labels_path)
    print(get_message("reason_labels_written", path=labels_path, rows=rows))

    accuracy = reasoned_accuracy(reasoned, target_data.dataset, "test")
    baseline = 1.0 / num_classes
    epoch = len(reasoned.loss_trace)
    for value_epoch, loss in enumerate(reasoned.loss_trace):
        state.record(target, reasoning.strategy, value_epoch, "train", "loss", loss)
    state.record(target, reasoning.strategy, epoch, "test", "accuracy", accuracy)
    state.record(target, reasoning.strategy, epoch, "test", "baseline", baseline)
    state.record(target, reasoning.strategy, epoch, "all", "mean_entropy", float(reasoned.entropy.mean()))
    metrics_path = Path(config.out_dir) / METRICS_FILE
    written = export_metrics(state.records, metrics_path)
    print(get_message("metrics_written", path=metrics_path, rows=written))
    print(get_message("reason_result", strategy=reasoning.strategy, target=target, accuracy=accuracy, baseline=baseline))
    return 0


def cmd_reason(args: argparse.Namespace) -> int:
    config = resolve_config(args).with_overrides(mode="apocalypse")
    run_id = make_run_id(config, config.reasoning.strategy)
    if getattr(args, "dry_run", False):
        print(get_message("dry_run_header"))
        print(f"  run: {run_id}")
        print(f"  target: {config.target_id()} sources: {', '.join(config.sources)} strategy: {config.reasoning.strategy}")
        return 0
    if not config.checkpoint:
        raise ConfigError(get_message("checkpoint_required"))
    return _reason(config, load_checkpoint(config.checkpoint), run_id)


# -- report ---------------------------------------------------------------------------

ReportKey = Tuple[str, str, str, str, str]


def collect_results(records: Sequence[MetricRecord], split: str = "test") -> Dict[ReportKey, List[float]]:
    """Final `split` accuracy per run, grouped by (source, target, k, ratio, strategy)."""
    last: Dict[Tuple[str, str, str], Tuple[int, float]] = {}
    for rec in records:
        if rec.metric != "accuracy" or rec.split != split:
            continue
        key = (rec.run, rec.graph, rec.task)
        if key not in last or rec.epoch >= last[key][0]:
            last[key] = (rec.epoch, rec.value)
    grouped: Dict[ReportKey, List[float]] = defaultdict(list)
    for (run, graph, _task), (_epoch, value) in sorted(last.items()):
        fields = parse_run_id(run)
        key = (fields.get("sources", "-"), graph, fields.get("k", "-"), fields.get("ratio", "-"), fields.get("strategy", "-"))
        grouped[key].append(value)
    return dict(sorted(grouped.items()))


def _render(header: List[str], rows: List[List[str]], fmt: str) -> str:
    if fmt == "csv":
        return "\n".join(",".join(row) for row in [header, *rows])
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in [header, *rows]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def render_report(grouped: Dict[ReportKey, List[float]], fmt: str = "text") -> str:
    header = ["source", "target", "k", "ratio", "strategy", "runs", "accuracy", "std"]
    rows = []
    for key, values in grouped.items():
        std = statistics.pstdev(values) if len(values) > 1 else 0.0
        rows.append([*key, str(len(values)), f"{statistics.mean(values):.3f}", f"{std:.3f}"])
    out = [_render(header, rows, fmt)]

    ratios = sorted({key[3] for key in grouped if key[3] != "-"}, key=float)
    if len(ratios) > 1:
        pairs = sorted({(key[0], key[1]) for key in grouped})
        pivot_rows = []
        for source, target in pairs:
            row = [source, target]
            for ratio in ratios:
                values = [v for key, vals in grouped.items() if key[:2] == (source, target) and key[3] == ratio for v in vals]
                row.append(f"{statistics.mean(values):.3f}" if values else "-")
            pivot_rows.append(row)
        out.append(_render(["source", "target", *[f"{float(r):.0%}" for r in ratios]], pivot_rows, fmt))
    return "\n\n".join(out)


def cmd_report(args: argparse.Namespace) -> int:
    records: List[MetricRecord] = []
    for path in args.paths:
        records.extend(read_metrics(path))
    grouped = collect_results(records, args.split)
    if not grouped:
        print(get_message("report_empty"))
        return 0
    print(render_report(grouped, args.format))
    return 0


# -- entry point ----------------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="Ruta al YAML de la corrida (por defecto config/g5.default.yaml)")
    p.add_argument("--mode", choices=["isolated", "mixed", "transfer", "apocalypse"])
    p.add_argument("--strategy", choices=["cccm", "cdr"])
    p.add_argument("--seed", type=int)
    p.add_argument("--ratio", type=float, help="Fracción del split de entrenamiento usada en el ajuste fino")
    p.add_argument("--out", help="Directorio de salida (checkpoints y métricas)")
    p.add_argument("--portal-k", dest="portal_k", type=int, help="Tamaño del portal universal k")
    p.add_argument("--checkpoint", help="Checkpoint preentrenado")
    p.add_argument("--no-pretrain", dest="no_pretrain", action="store_true", help="Transfer sin preentrenamiento")
    p.add_argument("--dry-run", dest="dry_run", action="store_true", help="Valida la config y muestra el plan")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="G5: preentrenamiento de grafos múltiples con Graph-Bert.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="Calcula y cachea intimidad, WL y saltos por grafo")
    _add_run_flags(p)
    p.set_defaults(handler=cmd_preprocess)

    p = sub.add_parser("train", help="Entrena según el modo configurado")
    _add_run_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("reason", help="Razonamiento sin etiquetas sobre el grafo objetivo")
    _add_run_flags(p)
    p.set_defaults(handler=cmd_reason)

    p = sub.add_parser("report", help="Agrega CSVs de métricas en tablas")
    p.add_argument("paths", nargs="+", help="Archivos metrics.csv")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--format", default="text", choices=["text", "csv"])
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        return int(args.handler(args))
    except NumericError as exc:
        print(get_message("numeric_error", error=exc), file=sys.stderr)
        return exc.exit_code
    except (IntegrityError, IncompatibleVersionError) as exc:
        print(get_message("io_error", error=exc), file=sys.stderr)
        return exc.exit_code
    except G5Error as exc:
        print(get_message("config_error", error=exc), file=sys.stderr)
        return exc.exit_code
    except ValidationError as exc:
        print(get_message("config_error", error=exc), file=sys.stderr)
        return 2
    except OSError as exc:
        print(get_message("io_error", error=exc), file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

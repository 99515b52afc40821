"""
Métricas de ejecución y exportación de resultados.

- record_metric / Timer: KPIs operativos (tiempo en ms, memoria best-effort)
  como líneas JSON vía logger.
- export_metrics / read_metrics: filas CSV append-only con cabecera
  `run,graph,task,epoch,split,metric,value` para reconstruir las tablas.
"""

import csv
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

from logger_config import logger
from src.errors import SchemaError

_use_psutil = False
try:
    import psutil  # optional
    _use_psutil = True
except Exception:
    _use_psutil = False


METRIC_COLUMNS = ("run", "graph", "task", "epoch", "split", "metric", "value")


def _get_memory_mb() -> Optional[float]:
    try:
        if _use_psutil:
            process = psutil.Process()
            rss = process.memory_info().rss
            return round(rss / (1024 * 1024), 2)
    except Exception:
        pass
    return None


def record_metric(name: str, value: float, labels: Optional[Dict[str, Any]] = None) -> None:
    payload = {
        "metric": name,
        "value": value,
    }
    if labels:
        payload.update(labels)
    try:
        logger.info("[METRIC] %s", json.dumps(payload, ensure_ascii=False, sort_keys=True))
    except Exception:
        logger.info("[METRIC] %s=%s labels=%s", name, value, labels)


class Timer:
    def __init__(self, name: str, labels: Optional[Dict[str, Any]] = None):
        self.name = name
        self.labels = labels or {}
        self.start = None
        self.elapsed_ms: Optional[float] = None

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        end = time.perf_counter()
        ms = round((end - (self.start or end)) * 1000, 2)
        self.elapsed_ms = ms
        mem = _get_memory_mb()
        labels = dict(self.labels)
        if mem is not None:
            labels["mem_mb"] = mem
        labels["error"] = bool(exc_type)
        record_metric(self.name, ms, labels)


@dataclass(frozen=True)
class MetricRecord:
    run: str
    graph: str
    task: str
    epoch: int
    split: str
    metric: str
    value: float

    def as_row(self) -> List[str]:
        # repr(float) es la representación más corta que re-parsea exacta
        return [self.run, self.graph, self.task, str(int(self.epoch)), self.split, self.metric, repr(float(self.value))]


def export_metrics(records: Iterable[MetricRecord], path: str | os.PathLike) -> int:
    """Append rows to `path`, writing the header only when the file is new or empty."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    rows = [record.as_row() for record in records]
    new_file = not target.exists() or target.stat().st_size == 0
    with target.open("a", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        if new_file:
            writer.writerow(METRIC_COLUMNS)
        writer.writerows(rows)
    return len(rows)


def read_metrics(path: str | os.PathLike) -> List[MetricRecord]:
    target = Path(path)
    with target.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        missing = [col for col in METRIC_COLUMNS if col not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{target}: missing metric columns {', '.join(missing)}")
        records = []
        for row in reader:
            records.append(
                MetricRecord(
                    run=row["run"],
                    graph=row["graph"],
                    task=row["task"],
                    epoch=int(row["epoch"]),
                    split=row["split"],
                    metric=row["metric"],
                    value=float(row["value"]),
                )
            )
    return records

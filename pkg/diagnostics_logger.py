import logging
from typing import Any, Dict, Optional


def emit_structured(payload: Dict[str, Any]) -> None:
    """Emite un dict como payload estructurado vía logging (diagnostics logger)."""
    logging.getLogger("diagnostics").info(payload)


def log_epoch_metrics(
    run_id: Optional[str],
    graph: str,
    task: str,
    epoch: int,
    loss: float,
    **extra,
) -> None:
    """Payload por época de entrenamiento; descarta claves con valor None."""
    p = {
        "event": "TRAIN_EPOCH",
        "run": run_id,
        "graph": graph,
        "task": task,
        "epoch": epoch,
        "loss": loss,
        "lr": extra.get("lr"),
        "round": extra.get("round"),
        "segment": extra.get("segment"),
        "labeled": extra.get("labeled"),
    }
    payload = {key: value for key, value in p.items() if value is not None}
    emit_structured(payload)


class Diagnostics:
    """Eventos estructurados con nivel (info/warn/error).

    El nombre del evento va en `event`; si el payload trae su propio `event`
    se conserva como `source_event`.
    """

    def _build(self, event: str, payload: Dict[str, Any] | None) -> Dict[str, Any]:
        p = {"event": event}
        if payload:
            for k, v in payload.items():
                if k == "event":
                    p["source_event"] = v
                else:
                    p[k] = v
        return p

    def info(self, event: str, payload: Dict[str, Any] | None = None) -> None:
        logging.getLogger("diagnostics").info(self._build(event, payload))

    def warn(self, event: str, payload: Dict[str, Any] | None = None) -> None:
        logging.getLogger("diagnostics").warning(self._build(event, payload))

    def error(self, event: str, payload: Dict[str, Any] | None = None) -> None:
        logging.getLogger("diagnostics").error(self._build(event, payload))


# Instancia global para uso sencillo
diagnostics = Diagnostics()

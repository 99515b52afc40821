"""Textos de salida del CLI, sobreescribibles desde `config/messages.yaml`."""

import os
from functools import lru_cache
from pathlib import Path
from typing import Dict

import yaml

from logger_config import logger


DEFAULT_MESSAGES: Dict[str, str] = {
    "cache_fresh": "cache fresh, skipped: {graph} ({path})",
    "cache_written": "cache written: {graph} ({path})",
    "dry_run_header": "Resolved schedule (dry run, nothing computed):",
    "train_done": "✅ Training finished. Checkpoint: {checkpoint}",
    "metrics_written": "Metrics appended to {path} ({rows} rows).",
    "accuracy_line": "{graph} {split} accuracy: {value:.3f}",
    "reason_result": "{strategy} on {target}: accuracy {accuracy:.3f} (random baseline {baseline:.3f})",
    "reason_labels_written": "Reasoned labels written to {path} ({rows} rows).",
    "checkpoint_required": "reasoning needs a pretrained checkpoint (--checkpoint or `checkpoint:` in config)",
    "report_empty": "No metric rows found in the given files.",
    "config_error": "❌ Configuration/contract error: {error}",
    "numeric_error": "❌ Numeric abort: {error}",
    "io_error": "❌ I/O error: {error}",
}


def _messages_path() -> Path:
    override = os.getenv("G5_MESSAGES_CONFIG_PATH")
    if override:
        return Path(override)
    return Path(__file__).resolve().parent.parent / "config" / "messages.yaml"


def _read_overrides(path: Path) -> Dict[str, str]:
    """Lee el bloque `messages:` (o la raíz) y descarta lo que no sea texto.

    Un archivo ausente o roto nunca tumba el CLI: se avisa y se usan los defaults.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        logger.debug("No messages file at %s; using built-in texts.", path)
        return {}
    except (OSError, yaml.YAMLError) as exc:
        logger.warning("Could not read messages from %s: %s", path, exc)
        return {}

    block = data.get("messages", data) if isinstance(data, dict) else None
    if not isinstance(block, dict):
        logger.warning("Messages file %s must map keys to strings; ignored.", path)
        return {}

    overrides: Dict[str, str] = {}
    for key, value in block.items():
        if isinstance(value, (str, int, float)):
            overrides[str(key)] = str(value)
        else:
            logger.warning("Message '%s' in %s is not a string; keeping default.", key, path)
    unknown = sorted(set(overrides) - set(DEFAULT_MESSAGES))
    if unknown:
        logger.debug("Extra message keys in %s: %s", path, ", ".join(unknown))
    return overrides


@lru_cache(maxsize=1)
def _load_messages() -> Dict[str, str]:
    return {**DEFAULT_MESSAGES, **_read_overrides(_messages_path())}


def get_message(key: str, **kwargs) -> str:
    messages = _load_messages()
    if key not in messages:
        raise KeyError(f"Message '{key}' not found in configuration.")
    template = messages[key]
    return template.format(**kwargs) if kwargs else template

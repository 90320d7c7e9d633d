"""In-process task implementations selectable with ``builtin NAME key=value ...``.

Each builtin receives its (already placeholder-bound) settings, the task's
working directory, the metrics file path and a log stream. It returns the
outputs it produced itself as ``{artifact name: path relative to workdir}``;
outputs declared with ``out`` in the flow are snapshotted as well. Builtins
signal bad configuration with BadSetting / DegenerateData.

Logs must not mention run ids or absolute paths, so that two runs of the same
builtin produce byte-identical log objects.
"""

from __future__ import annotations

import json
import math
import shutil
from pathlib import Path
from typing import Callable, TextIO

from dagdoc import toy
from dagdoc.errors import BadSetting

Builtin = Callable[[dict, Path, Path, TextIO], dict]
BUILTINS: dict[str, Builtin] = {}


def register(name: str):
    def deco(fn: Builtin) -> Builtin:
        BUILTINS[name] = fn
        return fn

    return deco


def _require(settings: dict, *keys: str) -> None:
    missing = [k for k in keys if k not in settings]
    if missing:
        raise BadSetting(f"missing setting(s): {', '.join(missing)}")


def _reject_unknown(settings: dict, *allowed: str) -> None:
    extra = sorted(set(settings) - set(allowed))
    if extra:
        raise BadSetting(f"unknown setting(s): {', '.join(extra)}")


def _int(settings: dict, key: str) -> int:
    try:
        return int(settings[key])
    except ValueError:
        raise BadSetting(f"{key}={settings[key]!r} is not an integer") from None


def _float(settings: dict, key: str) -> float:
    try:
        value = float(settings[key])
    except ValueError:
        raise BadSetting(f"{key}={settings[key]!r} is not a number") from None
    if not math.isfinite(value):
        raise BadSetting(f"{key}={settings[key]!r} is not finite")
    return value


def _dest(workdir: Path, rel: str) -> Path:
    dest = (workdir / rel).resolve()
    if workdir.resolve() not in dest.parents:
        raise BadSetting(f"dest {rel!r} escapes the task directory")
    dest.parent.mkdir(parents=True, exist_ok=True)
    return dest


def _write_metric(metrics: Path, epoch: int, name: str, value: float) -> None:
    with open(metrics, "a", encoding="utf-8") as fh:
        fh.write(json.dumps({"epoch": epoch, "name": name, "value": value}) + "\n")


@register("copy")
def copy_file(settings, workdir, metrics, log):
    """Copy ``src`` to ``dest`` inside the task directory."""
    _require(settings, "src", "dest")
    _reject_unknown(settings, "src", "dest")
    dest = _dest(workdir, settings["dest"])
    shutil.copyfile(settings["src"], dest)
    log.write(f"copied {dest.stat().st_size} bytes to {settings['dest']}\n")
    return {}


@register("clean_pairs")
def clean_pairs(settings, workdir, metrics, log):
    """Keep only rows of ``src`` that are two finite comma-separated numbers."""
    _require(settings, "src", "dest")
    _reject_unknown(settings, "src", "dest")
    kept, dropped = [], 0
    for line in Path(settings["src"]).read_text(encoding="utf-8").splitlines():
        parts = [p.strip() for p in line.split(",")]
        try:
            x, y = (float(p) for p in parts)
        except ValueError:
            dropped += 1
            continue
        if math.isfinite(x) and math.isfinite(y):
            kept.append(f"{parts[0]},{parts[1]}")
        else:
            dropped += 1
    _dest(workdir, settings["dest"]).write_text("x,y\n" + "".join(r + "\n" for r in kept), encoding="utf-8")
    log.write(f"kept {len(kept)} rows, dropped {dropped}\n")
    return {}


@register("summarize_pairs")
def summarize_pairs(settings, workdir, metrics, log):
    """Write count/mean/min/max of both columns of ``src`` as JSON to ``dest``.

    Rows that are not two finite numbers are counted as invalid, not fatal.
    """
    _require(settings, "src", "dest")
    _reject_unknown(settings, "src", "dest")
    pairs, invalid = [], 0
    for line in Path(settings["src"]).read_text(encoding="utf-8").splitlines():
        try:
            x, y = (float(p) for p in line.split(","))
        except ValueError:
            invalid += 1
            continue
        if math.isfinite(x) and math.isfinite(y):
            pairs.append((x, y))
        else:
            invalid += 1
    stats = {"count": len(pairs), "invalid": invalid}
    for i, col in enumerate(("x", "y")):
        vals = [p[i] for p in pairs]
        if vals:
            stats[col] = {"mean": sum(vals) / len(vals), "min": min(vals), "max": max(vals)}
    _dest(workdir, settings["dest"]).write_text(json.dumps(stats, sort_keys=True) + "\n", encoding="utf-8")
    log.write(f"summarized {len(pairs)} rows ({invalid} invalid)\n")
    return {}


@register("train_toy")
def train_toy(settings, workdir, metrics, log):
    """Fit the toy linear model; writes model.txt, summary.txt and per-epoch loss."""
    _require(settings, "epochs", "lr")
    _reject_unknown(settings, "epochs", "lr", "data", "data_file")
    epochs = _int(settings, "epochs")
    lr = _float(settings, "lr")
    if epochs < 1:
        raise BadSetting(f"epochs must be >= 1, got {epochs}")
    if lr <= 0:
        raise BadSetting(f"lr must be > 0, got {lr:g}")
    if ("data" in settings) == ("data_file" in settings):
        raise BadSetting("exactly one of data / data_file is required")
    if "data" in settings:
        text = settings["data"]
    else:
        text = Path(settings["data_file"]).read_text(encoding="utf-8")
    pairs = toy.parse_pairs(text)
    fit = toy.train_linear([p[0] for p in pairs], [p[1] for p in pairs], epochs, lr)
    with open(metrics, "a", encoding="utf-8") as fh:
        for epoch, loss in enumerate(fit.losses):
            fh.write(json.dumps({"epoch": epoch, "name": "loss", "value": loss}) + "\n")
    (workdir / "model.txt").write_text(fit.model_text(), encoding="utf-8")
    (workdir / "summary.txt").write_text(toy.summary_text(epochs, lr, fit), encoding="utf-8")
    log.write(f"trained on {len(pairs)} points for {epochs} epochs, final loss {fit.final_loss:.6g}\n")
    return {"model": "model.txt", "summary": "summary.txt"}


@register("evaluate_toy")
def evaluate_toy(settings, workdir, metrics, log):
    """Mean squared error of a toy ``model`` on ``data``; written to ``dest`` and as a metric."""
    _require(settings, "model", "data", "dest")
    _reject_unknown(settings, "model", "data", "dest")
    w, b = toy.load_model(Path(settings["model"]).read_text(encoding="utf-8"))
    pairs = toy.parse_pairs(Path(settings["data"]).read_text(encoding="utf-8"))
    if not pairs:
        raise BadSetting("evaluation data is empty")
    mse = sum((w * x + b - y) ** 2 for x, y in pairs) / len(pairs)
    _write_metric(metrics, 0, "eval_mse", mse)
    _dest(workdir, settings["dest"]).write_text(
        json.dumps({"mse": mse, "n": len(pairs)}, sort_keys=True) + "\n", encoding="utf-8"
    )
    log.write(f"eval mse {mse:.6g} over {len(pairs)} points\n")
    return {}

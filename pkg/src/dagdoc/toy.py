"""A deliberately tiny linear model used by the ``train_toy`` builtin.

Fits ``y = w*x + b`` by full-batch gradient descent on the mean squared error,
starting from ``w = b = 0``. Also runnable as a predict entrypoint::

    python -m dagdoc.toy predict model.txt < xs.txt
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass

import numpy as np

from dagdoc.errors import BadSetting, DegenerateData

_MODEL_RE = re.compile(r"\s*w=(\S+)\s+b=(\S+)\s*\Z")


@dataclass(frozen=True)
class ToyFit:
    w: float
    b: float
    losses: list[float]  # loss at the start of each epoch, before its update
    final_loss: float

    def model_text(self) -> str:
        return f"w={self.w:.12g} b={self.b:.12g}\n"


def train_linear(xs, ys, epochs: int, lr: float) -> ToyFit:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DegenerateData("x and y must be 1-d and equally long")
    if x.size < 2:
        raise DegenerateData(f"need at least 2 points, got {x.size}")
    if np.all(x == x[0]):
        raise DegenerateData("x has zero variance")
    if not isinstance(epochs, int) or epochs < 1:
        raise BadSetting(f"epochs must be an integer >= 1, got {epochs!r}")
    if not np.isfinite(lr) or lr <= 0:
        raise BadSetting(f"lr must be > 0, got {lr!r}")

    w = b = 0.0
    losses = []
    for _ in range(epochs):
        resid = w * x + b - y
        losses.append(float(np.mean(resid**2)))
        grad_w = 2.0 * float(np.mean(resid * x))
        grad_b = 2.0 * float(np.mean(resid))
        w -= lr * grad_w
        b -= lr * grad_b
    final = float(np.mean((w * x + b - y) ** 2))
    return ToyFit(w, b, losses, final)


def hessian_max_eigenvalue(xs) -> float:
    """Largest eigenvalue of the MSE Hessian in (w, b); lr < 1/L keeps loss monotone."""
    x = np.asarray(xs, dtype=np.float64)
    n = x.size
    h = (2.0 / n) * np.array([[np.sum(x * x), np.sum(x)], [np.sum(x), n]])
    return float(np.linalg.eigvalsh(h)[-1])


def summary_text(epochs: int, lr: float, fit: ToyFit) -> str:
    return (
        "model: linear regression y = w*x + b\n"
        "optimizer: full-batch gradient descent, zero initialization\n"
        "loss: mean squared error\n"
        "parameter count = 2\n"
        f"epochs = {epochs}\n"
        f"lr = {lr:g}\n"
        f"final loss = {fit.final_loss:.6g}\n"
    )


def parse_pairs(text: str) -> list[tuple[float, float]]:
    """Parse ``x,y`` pairs separated by newlines or ``;``; '#' lines and a header are skipped."""
    pairs = []
    chunks = [c.strip() for c in re.split(r"[;\n]", text)]
    for i, chunk in enumerate(chunks):
        if not chunk or chunk.startswith("#"):
            continue
        parts = [p.strip() for p in chunk.split(",")]
        try:
            if len(parts) != 2:
                raise ValueError
            pairs.append((float(parts[0]), float(parts[1])))
        except ValueError:
            if not pairs and all(not c or c.startswith("#") for c in chunks[:i]):
                continue  # header row
            raise DegenerateData(f"bad data pair {chunk!r}") from None
    return pairs


def load_model(text: str) -> tuple[float, float]:
    m = _MODEL_RE.match(text)
    if not m:
        raise ValueError(f"not a toy model: {text!r}")
    return float(m.group(1)), float(m.group(2))


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 2 or argv[0] != "predict":
        print("usage: python -m dagdoc.toy predict MODEL_FILE", file=sys.stderr)
        return 2
    with open(argv[1], encoding="utf-8") as fh:
        w, b = load_model(fh.read())
    for line in sys.stdin.read().split():
        print(f"{w * float(line) + b:.12g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

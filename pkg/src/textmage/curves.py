"""Per-epoch training curves and their CSV serialization."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import DataError


@dataclass
class CurvePoint:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float | None = None
    val_accuracy: float | None = None


def _fmt(value: float | None) -> str:
    return "" if value is None else format(value, ".9g")


def export_curves(curves: list[CurvePoint], path) -> None:
    """Write `epoch,train_loss,train_acc,val_loss,val_acc` rows, 9 significant digits."""
    path = Path(path)
    lines = ["epoch,train_loss,train_acc,val_loss,val_acc"]
    last_epoch = 0
    for point in curves:
        if point.epoch != last_epoch + 1:
            raise DataError(f"curve epochs must increase from 1, got {point.epoch} after {last_epoch}")
        last_epoch = point.epoch
        lines.append(",".join([
            str(point.epoch),
            _fmt(point.train_loss),
            _fmt(point.train_accuracy),
            _fmt(point.val_loss),
            _fmt(point.val_accuracy),
        ]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union
import csv
import json
import math

import numpy as np

CSV_HEADER = ("metric", "scope", "key", "value")


@dataclass
class MetricEntry:
    """One value of a report: scope is aggregate, per_layer, per_shard, matrix or table."""
    scope: str
    key: str
    value: float

    def to_row(self, metric: str) -> List[str]:
        return [metric, self.scope, self.key, _format(self.value)]


def _format(value: float) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return repr(float(value))


@dataclass
class MetricReport:
    """
    Result of one diagnostic with its provenance.

    Matrices are stored row-major as `matrix` entries keyed `L<layer>:<row>,<col>`
    with the row/column labels kept in `labels`.
    """
    metric: str
    entries: List[MetricEntry] = field(default_factory=list)
    steps: List[int] = field(default_factory=list)
    parameters: Dict[str, Any] = field(default_factory=dict)
    labels: Dict[str, List[str]] = field(default_factory=dict)
    config_hash: Optional[str] = None

    def add(self, scope: str, key: str, value: float) -> "MetricReport":
        self.entries.append(MetricEntry(scope=scope, key=str(key), value=value))
        return self

    def add_layers(self, per_layer: Mapping[int, float], aggregate: Optional[float] = None) -> "MetricReport":
        for layer, value in sorted(per_layer.items()):
            self.add("per_layer", f"layer={layer}", value)
        if aggregate is not None:
            self.add("aggregate", "all", aggregate)
        return self

    def add_matrix(self, name: str, matrix: np.ndarray, labels: Sequence[str]) -> "MetricReport":
        self.labels[name] = list(labels)
        for i, row_label in enumerate(labels):
            for j, col_label in enumerate(labels):
                self.add("matrix", f"{name}:{row_label},{col_label}", float(matrix[i, j]))
        return self

    def value(self, scope: str = "aggregate", key: str = "all") -> float:
        for entry in self.entries:
            if entry.scope == scope and entry.key == key:
                return entry.value
        raise KeyError(f"{self.metric} has no {scope} entry '{key}'")

    def to_dict(self) -> Dict[str, Any]:
        return {"metric": self.metric, "config_hash": self.config_hash, "steps": list(self.steps),
                "parameters": self.parameters, "labels": self.labels,
                "entries": [{"scope": e.scope, "key": e.key,
                             "value": None if e.value is None or math.isnan(e.value) else float(e.value)}
                            for e in self.entries]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def rows(self) -> List[List[str]]:
        rows = [entry.to_row(self.metric) for entry in self.entries]
        if self.config_hash:
            rows.append([self.metric, "provenance", "config_hash", self.config_hash])
        return rows

    def write_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path

    def write_csv(self, path: Union[str, Path]) -> Path:
        return write_report_csv([self], path)


def write_report_csv(reports: Sequence[MetricReport], path: Union[str, Path]) -> Path:
    """Several reports in one table with the fixed metric,scope,key,value header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for report in reports:
            writer.writerows(report.rows())
    return path


def read_report(path: Union[str, Path]) -> MetricReport:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    report = MetricReport(metric=data["metric"], steps=data.get("steps", []),
                          parameters=data.get("parameters", {}), labels=data.get("labels", {}),
                          config_hash=data.get("config_hash"))
    for entry in data.get("entries", []):
        value = entry["value"]
        report.add(entry["scope"], entry["key"], float("nan") if value is None else value)
    return report

"""Report"""

from __future__ import annotations

import datetime
from dataclasses import dataclass, field
from typing import Any

from .general import DEVIATIONS, LOGGER, SPEEDE_CTL_VERSION, TypeJSON, write_json


@dataclass
class Report:
    """JSON report of one command run.

    Every report carries the resolved configuration, seed, thread count and
    the list of deviations from the full scale method.
    """

    command: str
    config: TypeJSON
    seed: int
    threads: int
    started: datetime.datetime = field(default_factory=datetime.datetime.now)
    finished: datetime.datetime | None = None
    results: TypeJSON = field(default_factory=dict)
    deviations: list[str] = field(default_factory=lambda: list(DEVIATIONS))

    def add(self, **results: Any) -> None:
        self.results.update(results)

    def finish(self) -> None:
        self.finished = datetime.datetime.now()

    @property
    def elapsed_s(self) -> float | None:
        if self.finished is None:
            return None
        return (self.finished - self.started).total_seconds()

    def to_json(self) -> TypeJSON:
        return {
            "command": self.command,
            "version": SPEEDE_CTL_VERSION,
            "config": self.config,
            "seed": self.seed,
            "threads": self.threads,
            "results": self.results,
            "deviations": self.deviations,
            "timing": {
                "started": self.started.isoformat(),
                "finished": self.finished.isoformat() if self.finished else None,
                "elapsed_s": self.elapsed_s,
            },
        }

    def write(self, path: str) -> None:
        if self.finished is None:
            self.finish()
        write_json(path, self.to_json())
        LOGGER.info(f"Report written to {path}")

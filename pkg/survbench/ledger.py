"""Persistent record of which sweep runs exist and how they ended."""

import json
import pathlib
from enum import Enum

from loguru import logger as log

from survbench.lib import FormatError, to_jsonable

WALL_TIME_FIELDS = ("wall_time_s", "started", "finished")


class RunState(Enum):
    MISSING = "missing"
    DONE = "done"
    FAILED = "failed"


class RunLedger(object):
    """Results JSON-lines file, one object per finished or failed run.

    A key may appear on several lines (a failed run retried later); the latest
    line wins. Only the process owning the ledger appends to it.

    Parameters
    ----------
    path : :class:`str`
        Location of ``results.jsonl``.
    """

    def __init__(self, path) -> None:
        self.path = pathlib.Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._records = {}
        self._parse()
        return

    def _parse(self) -> bool:
        if not self.path.exists():
            log.debug(f"no ledger at {self.path}; starting empty")
            return False

        with open(self.path) as stream:
            for number, line in enumerate(stream, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except ValueError as err:
                    raise FormatError(f"{self.path}:{number}: not a JSON line: {err}") from err
                if "key" not in record:
                    raise FormatError(f"{self.path}:{number}: record has no key")
                self._records[record["key"]] = record

        log.debug(f"ledger {self.path}: {len(self._records)} runs, {len(self.done)} done")
        return True

    def state(self, key: str) -> RunState:
        record = self._records.get(key)
        if record is None:
            return RunState.MISSING
        return RunState(record.get("status", RunState.FAILED.value))

    def get(self, key: str) -> dict:
        return self._records.get(key)

    @property
    def keys(self) -> list:
        return sorted(self._records)

    @property
    def done(self) -> list:
        """Records of finished runs, in key order."""
        return [self._records[k] for k in self.keys if self.state(k) is RunState.DONE]

    @property
    def failed(self) -> list:
        return [self._records[k] for k in self.keys if self.state(k) is RunState.FAILED]

    def append(self, record: dict) -> None:
        record = to_jsonable(record)
        with open(self.path, "a") as stream:
            stream.write(json.dumps(record, sort_keys=True) + "\n")
        self._records[record["key"]] = record
        return

    def __len__(self) -> int:
        return len(self._records)

    pass


def canonical_results(path) -> str:
    """The comparable form of a results file: latest line per key, sorted by key, without wall-time fields."""
    ledger = RunLedger(path)
    lines = []
    for key in ledger.keys:
        record = {k: v for k, v in ledger.get(key).items() if k not in WALL_TIME_FIELDS}
        lines.append(json.dumps(record, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")

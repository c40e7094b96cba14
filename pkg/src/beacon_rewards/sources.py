"""State providers: in-process simulator, JSON fixture files, HTTP state API."""

from __future__ import annotations

import logging
import re
import time
from pathlib import Path
from typing import Iterable, Protocol

import httpx
from pydantic import ValidationError

from .chain_sim import SimConfig, Simulator
from .rewards import DEFAULT_PARAMS, WeightParams
from .schemas import BeaconStateSnapshot, SlotRange

log = logging.getLogger(__name__)

_STATE_FILE = re.compile(r"^state_(\d+)\.json$")


class SourceError(Exception):
    pass


class StateNotFound(SourceError):
    def __init__(self, slot: int, detail: str = ""):
        super().__init__(f"no state for slot {slot}" + (f": {detail}" if detail else ""))
        self.slot = slot


class BackendUnavailable(SourceError):
    pass


class DecodeError(SourceError):
    pass


class StateProvider(Protocol):
    kind: str

    def get_state(self, slot: int) -> BeaconStateSnapshot: ...

    def slot_range(self) -> SlotRange: ...


class SimProvider:
    """Serves snapshots from a simulator run, generated lazily and kept in memory."""

    kind = "sim"

    def __init__(self, config: SimConfig, params: WeightParams = DEFAULT_PARAMS):
        self.config = config
        self.params = params
        self.simulator = Simulator(config, params)
        self._stream = self.simulator.run()
        self._states: list[BeaconStateSnapshot] = []

    def slot_range(self) -> SlotRange:
        return SlotRange(first_slot=0, last_slot=self.config.epochs * self.params.slots_per_epoch - 1)

    def get_state(self, slot: int) -> BeaconStateSnapshot:
        rng = self.slot_range()
        if not rng.first_slot <= slot <= rng.last_slot:
            raise StateNotFound(slot, "outside simulated range")
        while len(self._states) <= slot:
            self._states.append(next(self._stream))
        return self._states[slot]

    def run_to_end(self) -> None:
        self.get_state(self.slot_range().last_slot)


def state_path(directory: Path, slot: int) -> Path:
    return Path(directory) / f"state_{slot}.json"


def write_fixtures(stream: Iterable[BeaconStateSnapshot], directory: str | Path) -> int:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = 0
    for snap in stream:
        state_path(directory, snap.slot).write_text(snap.model_dump_json())
        n += 1
    return n


class FileProvider:
    """One ``state_{slot}.json`` per slot in ``directory``."""

    kind = "files"

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise BackendUnavailable(f"fixture directory {self.directory} does not exist")

    def slots(self) -> list[int]:
        found = []
        for p in self.directory.iterdir():
            m = _STATE_FILE.match(p.name)
            if m:
                found.append(int(m.group(1)))
        return sorted(found)

    def slot_range(self) -> SlotRange:
        slots = self.slots()
        if not slots:
            raise BackendUnavailable(f"no state files in {self.directory}")
        return SlotRange(first_slot=slots[0], last_slot=slots[-1])

    def get_state(self, slot: int) -> BeaconStateSnapshot:
        path = state_path(self.directory, slot)
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            raise StateNotFound(slot, str(path)) from None
        try:
            return BeaconStateSnapshot.model_validate_json(raw)
        except ValidationError as exc:
            raise DecodeError(f"{path}: {exc.error_count()} validation errors; first: {exc.errors()[0]['msg']}") from exc


class HttpProvider:
    """Client for ``GET {base}/states/{slot}`` and ``GET {base}/range``.

    Transport failures and 5xx responses are retried ``attempts`` times with
    exponential backoff from ``backoff`` seconds.
    """

    kind = "http"

    def __init__(
        self,
        base_url: str = "",
        client: httpx.Client | None = None,
        attempts: int = 3,
        backoff: float = 0.5,
        timeout: float = 30.0,
    ):
        self.client = client if client is not None else httpx.Client(base_url=base_url, timeout=timeout)
        self.attempts = attempts
        self.backoff = backoff

    def _get(self, path: str) -> httpx.Response:
        delay = self.backoff
        last: Exception | None = None
        for attempt in range(1, self.attempts + 1):
            try:
                resp = self.client.get(path)
            except httpx.TransportError as exc:
                last = exc
            else:
                if resp.status_code < 500:
                    return resp
                last = BackendUnavailable(f"{path}: HTTP {resp.status_code}")
            log.warning("GET %s failed (attempt %d/%d): %s", path, attempt, self.attempts, last)
            if attempt < self.attempts:
                time.sleep(delay)
                delay *= 2
        raise BackendUnavailable(f"GET {path} failed after {self.attempts} attempts: {last}")

    def slot_range(self) -> SlotRange:
        resp = self._get("/range")
        if resp.status_code != 200:
            raise BackendUnavailable(f"/range returned HTTP {resp.status_code}")
        try:
            return SlotRange.model_validate_json(resp.content)
        except ValidationError as exc:
            raise DecodeError(f"/range: {exc}") from exc

    def get_state(self, slot: int) -> BeaconStateSnapshot:
        resp = self._get(f"/states/{slot}")
        if resp.status_code == 404:
            raise StateNotFound(slot, "HTTP 404")
        if resp.status_code != 200:
            raise BackendUnavailable(f"/states/{slot} returned HTTP {resp.status_code}")
        try:
            return BeaconStateSnapshot.model_validate_json(resp.content)
        except ValidationError as exc:
            raise DecodeError(f"/states/{slot}: {exc.error_count()} validation errors") from exc

    def close(self) -> None:
        self.client.close()

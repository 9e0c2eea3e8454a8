from typing import Any, Dict, Iterable, Optional
import hashlib
import json
import os
import logging
import fcntl
from datetime import datetime, timezone

from ..config import MANIFEST_FILE, STATE_FILE, TOOLKIT_VERSION

logger = logging.getLogger(__name__)


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_json_atomic(path: str, data: Any) -> str:
    """Write JSON with a locked temp file, fsync and an atomic rename"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    temp_file = f"{path}.tmp"
    with open(temp_file, 'w', encoding='utf-8') as f:
        # Acquire exclusive lock for writing
        fcntl.flock(f, fcntl.LOCK_EX)
        try:
            json.dump(data, f, indent=2, sort_keys=True, allow_nan=True)
            f.write("\n")
            f.flush()
            os.fsync(f.fileno())
        finally:
            fcntl.flock(f, fcntl.LOCK_UN)
    os.replace(temp_file, path)
    return path


def read_json(path: str) -> Any:
    with open(path, 'r', encoding='utf-8') as f:
        fcntl.flock(f, fcntl.LOCK_SH)
        try:
            return json.load(f)
        finally:
            fcntl.flock(f, fcntl.LOCK_UN)


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


class RunState:
    """Per-stage status of the runs sharing one output directory"""

    def __init__(self, output_dir: str):
        self.output_dir = output_dir
        self.states: Dict[str, Dict[str, Any]] = {}
        self.states_file = os.path.join(output_dir, STATE_FILE)
        self._load_states()

    def _load_states(self):
        if os.path.exists(self.states_file):
            try:
                self.states = read_json(self.states_file)
            except json.JSONDecodeError:
                logger.error(f"Error parsing {self.states_file}, starting with empty state")
                self.states = {}
            except Exception as e:
                logger.error(f"Error loading states: {str(e)}")
                self.states = {}

    def _save_states(self):
        try:
            write_json_atomic(self.states_file, self.states)
        except Exception as e:
            logger.error(f"Error saving states: {str(e)}")

    def create_state(self, stage: str) -> Dict[str, Any]:
        """Create initial state for a stage"""
        self.states[stage] = {
            "status": "pending",
            "progress": 0,
            "error": None,
            "last_updated": _utcnow(),
        }
        self._save_states()
        return self.states[stage]

    def get_state(self, stage: str) -> Optional[Dict[str, Any]]:
        return self.states.get(stage)

    def update_state(self, stage: str, status: str, progress: int = 0, error: Optional[str] = None,
                     **extra: Any) -> Dict[str, Any]:
        if stage not in self.states:
            self.create_state(stage)
        self.states[stage].update({
            "status": status,
            "progress": progress,
            "error": error,
            "last_updated": _utcnow(),
            **extra,
        })
        self._save_states()
        return self.states[stage]


def write_manifest(output_dir: str, command: str, config: Dict[str, Any], seed: int,
                   inputs: Iterable[str] = (), outputs: Iterable[str] = ()) -> str:
    """Record what produced an output directory: command, config echo, seed, input hashes"""
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "toolkit_version": TOOLKIT_VERSION,
        "inputs": {os.path.abspath(p): file_sha256(p) for p in inputs if os.path.isfile(p)},
        "outputs": sorted(os.path.relpath(p, output_dir) for p in outputs),
        "created_at": _utcnow(),
    }
    path = os.path.join(output_dir, MANIFEST_FILE.format(command=command))
    write_json_atomic(path, manifest)
    logger.info(f"Wrote run manifest {path}")
    return path

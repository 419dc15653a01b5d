import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import pandas as pd

from utils.exceptions import OutputError

logger = logging.getLogger(__name__)


def atomic_write_bytes(path: Path, content: bytes):
    """Write bytes to a temp file next to ``path`` and rename it into place."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        try:
            with os.fdopen(fd, 'wb') as f:
                f.write(content)
            os.replace(tmp_name, path)
        except BaseException:
            if os.path.exists(tmp_name):
                os.remove(tmp_name)
            raise
    except OSError as e:
        logger.error(f"Error writing {path}: {str(e)}")
        raise OutputError(f"cannot write {path}: {e.strerror or e}", path=str(path))


def dump_json(data: Any) -> str:
    """Deterministic JSON text (sorted keys, trailing newline)."""
    return json.dumps(data, indent=2, sort_keys=True, default=str) + "\n"


def frame_to_csv(frame: pd.DataFrame, float_format: Optional[str] = None) -> bytes:
    """Render a frame as CSV bytes with a fixed line terminator."""
    text = frame.to_csv(index=False, lineterminator="\n", float_format=float_format)
    return text.encode("utf-8")


class FileHandler:
    """Write run outputs (CSV, JSON, manifests) into one output directory."""

    def __init__(self, out_dir: str):
        self.out_dir = Path(out_dir)
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OutputError(f"cannot create output directory {out_dir}: {e.strerror or e}",
                              path=str(out_dir))

    def path(self, filename: str) -> Path:
        """Absolute path of an output file."""
        return self.out_dir / filename

    def write_csv(self, filename: str, columns: Sequence[str], rows: Iterable[Sequence[Any]],
                  float_format: Optional[str] = None) -> Path:
        """Write rows under a header."""
        frame = pd.DataFrame(list(rows), columns=list(columns))
        return self.write_frame(filename, frame, float_format=float_format)

    def write_frame(self, filename: str, frame: pd.DataFrame,
                    float_format: Optional[str] = None) -> Path:
        """Write a DataFrame as CSV."""
        target = self.path(filename)
        atomic_write_bytes(target, frame_to_csv(frame, float_format))
        logger.debug(f"Wrote {len(frame)} rows to {target}")
        return target

    def write_json(self, filename: str, data: Any) -> Path:
        """Write JSON with sorted keys."""
        target = self.path(filename)
        atomic_write_bytes(target, dump_json(data).encode("utf-8"))
        return target

    def write_manifest(self, filename: str, command: str, config: Dict[str, Any],
                       seed: int, outputs: List[str], extra: Optional[Dict[str, Any]] = None) -> Path:
        """Manifest embedding the resolved config and seed of a run."""
        manifest: Dict[str, Any] = {
            'command': command,
            'config': config,
            'seed': seed,
            'outputs': sorted(outputs),
        }
        if extra:
            manifest.update(extra)
        return self.write_json(filename, manifest)

    def read_json(self, filename: str) -> Dict[str, Any]:
        """Read a JSON file from the output directory."""
        target = self.path(filename)
        try:
            with open(target, 'r', encoding='utf-8') as f:
                return json.load(f)
        except OSError as e:
            raise OutputError(f"cannot read {target}: {e.strerror or e}", path=str(target))

    def list_files(self, pattern: str) -> List[Path]:
        """Output files matching a glob, sorted by name."""
        return sorted(self.out_dir.glob(pattern))


def read_input_bytes(path: str) -> bytes:
    """Read an input file, mapping OS errors to OutputError."""
    try:
        with open(path, 'rb') as f:
            return f.read()
    except OSError as e:
        logger.error(f"Error reading input {path}: {str(e)}")
        raise OutputError(f"cannot read {path}: {e.strerror or e}", path=str(path))

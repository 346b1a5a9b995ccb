# common.py
import json
import logging
import math
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import pandas as pd


LOG_FORMAT = "[%(name)s] %(message)s"
FLOAT_FORMAT = "%.9g"
SCHEMA_VERSION = 1


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        force=True,
    )


def derive_seed(master_seed: int, *keys: int) -> int:
    """64-bit child seed for (master_seed, *keys).

    The splitting rule is numpy's SeedSequence hashing: the keys become the
    spawn key, and the first 64-bit word of the generated state is the seed.
    Identical (master_seed, keys) always give the identical child seed.
    """
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def sig9(x: Any) -> Any:
    # 9 significant digits for reproducible diffs; ints, None and strings pass through
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x) or math.isinf(x):
            return None
        return float(f"{x:.9g}")
    if isinstance(x, dict):
        return {k: sig9(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [sig9(v) for v in x]
    if isinstance(x, np.ndarray):
        return [sig9(v) for v in x.tolist()]
    return x


def write_json(obj: Any, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(sig9(obj), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def write_csv(df: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def ensure_columns(df: pd.DataFrame, columns: Iterable[str]) -> pd.DataFrame:
    out = df.copy()
    columns = list(columns)
    for c in columns:
        if c not in out.columns:
            out[c] = pd.NA
    return out[columns]

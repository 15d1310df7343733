"""Readers and writers for the on-disk formats.

* ``design/v1``  a single layout
* ``target/v1``  a transfer-function magnitude on a frequency grid
* ``policy/v1``  a policy checkpoint
* history CSV    one row per training iteration

Floats are written with 17 significant digits so every file round-trips
exactly through its reader.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .evaluator import TransferFunction
from .geometry import CircuitDesign, Resonator

DESIGN_FORMAT = "design/v1"
TARGET_FORMAT = "target/v1"
POLICY_FORMAT = "policy/v1"


class FormatError(ValueError):
    """A file does not match the schema it claims (or is expected) to have."""


def _float(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise FormatError(f"cannot serialize non-finite value {x}")
    s = format(x, ".17g")
    return s if any(c in s for c in ".eEn") else s + ".0"


def dumps(obj, indent: int | None = None, _level: int = 0) -> str:
    """JSON text with floats written to 17 significant digits."""
    nl = "" if indent is None else "\n" + " " * (indent * (_level + 1))
    end = "" if indent is None else "\n" + " " * (indent * _level)
    sep = ", " if indent is None else ","
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = (f"{nl}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items())
        return "{" + sep.join(items) + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        # numeric rows stay on one line
        if indent is not None and all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(dumps(v) for v in obj) + "]"
        return "[" + sep.join(f"{nl}{dumps(v, indent, _level + 1)}" for v in obj) + end + "]"
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist(), indent, _level)
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj, indent=1) + "\n")


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return data


def _check_format(data: dict, expected: str, where: str = "") -> None:
    found = data.get("format")
    if found != expected:
        raise FormatError(f"{where}expected format {expected!r}, found {found!r}")


def _require(data: dict, key: str, where: str = ""):
    if key not in data:
        raise FormatError(f"{where}missing field {key!r}")
    return data[key]


# --- design/v1 ------------------------------------------------------------------

def design_to_dict(design: CircuitDesign) -> dict:
    return {
        "format": DESIGN_FORMAT,
        "n": design.n,
        "side": design.side,
        "resonators": [
            {"cx": r.center[0], "cy": r.center[1], "slit_dir": r.slit_dir,
             "slit_offset": r.slit_offset}
            for r in design.resonators],
    }


def design_from_dict(data: dict, where: str = "") -> CircuitDesign:
    _check_format(data, DESIGN_FORMAT, where)
    side = float(_require(data, "side", where))
    items = _require(data, "resonators", where)
    if not isinstance(items, list) or len(items) < 2:
        raise FormatError(f"{where}a design needs at least 2 resonators")
    if "n" in data and int(data["n"]) != len(items):
        raise FormatError(f"{where}n={data['n']} but {len(items)} resonators listed")
    try:
        res = tuple(Resonator((float(r["cx"]), float(r["cy"])), side, int(r["slit_dir"]),
                              float(r["slit_offset"])) for r in items)
    except KeyError as exc:
        raise FormatError(f"{where}resonator missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{where}invalid resonator: {exc}") from exc
    return CircuitDesign(res)


def write_design(path, design: CircuitDesign) -> None:
    write_json(path, design_to_dict(design))


def read_design(path) -> CircuitDesign:
    return design_from_dict(read_json(path), f"{path}: ")


# --- target/v1 ------------------------------------------------------------------

def target_to_dict(tf: TransferFunction) -> dict:
    return {"format": TARGET_FORMAT, "freqs": tf.freqs, "s21_mag": np.abs(tf.s21)}


def target_from_dict(data: dict, where: str = "") -> TransferFunction:
    _check_format(data, TARGET_FORMAT, where)
    freqs = np.asarray(_require(data, "freqs", where), dtype=float)
    mag = np.asarray(_require(data, "s21_mag", where), dtype=float)
    try:
        return TransferFunction.from_magnitude(freqs, mag)
    except ValueError as exc:
        raise FormatError(f"{where}{exc}") from exc


def write_target(path, tf: TransferFunction) -> None:
    write_json(path, target_to_dict(tf))


def read_target(path) -> TransferFunction:
    return target_from_dict(read_json(path), f"{path}: ")


# --- history CSV ------------------------------------------------------------------

def write_history(path, rows, fields) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_float(row[f]) if isinstance(row[f], float) else row[f] for f in fields])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def write_response_csv(path, tf: TransferFunction) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["freq_hz", "mag_db"])
        for f, db in zip(tf.freqs, tf.mag_db):
            w.writerow([_float(f), _float(db)])


# --- policy/v1 ------------------------------------------------------------------

def save_checkpoint(path, policy, iteration: int, seed: int, *, geometry=None,
                    target: TransferFunction | None = None, extra: dict | None = None) -> None:
    """Write a ``policy/v1`` container.

    The sampling stream of iteration ``t`` is derived from ``(seed, t)``, so
    the seed and iteration fully describe the RNG state.
    """
    data = {
        "format": POLICY_FORMAT,
        "architecture": policy.arch.to_dict(),
        "n": policy.n,
        "theta": policy.get_flat(),
        "iteration": int(iteration),
        "rng_state": {"seed": int(seed), "iteration": int(iteration)},
    }
    if geometry is not None:
        data["geometry"] = asdict(geometry)
    if target is not None:
        data["target"] = target_to_dict(target)
    if extra:
        data.update(extra)
    write_json(path, data)


def load_checkpoint(path):
    """Return ``(policy, data)`` from a ``policy/v1`` file."""
    from .policy import Policy, PolicyArch

    data = read_json(path)
    _check_format(data, POLICY_FORMAT, f"{path}: ")
    try:
        arch = PolicyArch(**_require(data, "architecture", f"{path}: "))
        policy = Policy(int(_require(data, "n", f"{path}: ")), arch)
        policy.set_flat(np.asarray(_require(data, "theta", f"{path}: "), dtype=float))
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: corrupted checkpoint ({exc})") from exc
    return policy, data

"""Angular-error metrics and benchmark tables.

The per-pixel error is the angle between predicted and reference unit
normals.  It is computed in chord form, 2*asin(|p - g| / 2), which equals
arccos of the clamped dot product for unit inputs but is exact at identity
(identical maps give exactly zero) and well conditioned for small angles.
"""

from __future__ import annotations

import numpy as np

from .samples import NormalMap


def _unit(values: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(values, axis=-1, keepdims=True)
    return values / np.maximum(norms, 1e-30)


def angular_error_map(pred: NormalMap, gt: NormalMap) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel angular error in degrees over the mask intersection.

    Returns (errors, mask); entries outside the mask are 0.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs reference {gt.shape}")
    mask = pred.mask & gt.mask
    if not mask.any():
        raise ValueError("empty mask intersection")
    p = _unit(pred.values[mask])
    g = _unit(gt.values[mask])
    chord = np.linalg.norm(p - g, axis=-1)
    ang = 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))
    errors = np.zeros(mask.shape)
    errors[mask] = np.degrees(ang)
    return errors, mask


def mean_angular_error(pred: NormalMap, gt: NormalMap) -> float:
    """Arithmetic mean of the angular error map over masked-in pixels, degrees."""
    errors, mask = angular_error_map(pred, gt)
    return float(errors[mask].mean())


def benchmark_report(results: dict, methods: list[str] | None = None) -> tuple[str, str]:
    """Render per-object results as (CSV text, aligned table text).

    ``results`` maps object name -> {method -> MAE degrees}.  Objects sort
    lexicographically; columns follow the declared ``methods`` order (or the
    sorted union).  Every (object, method) cell must be present.  A
    per-method average row is appended.  Output is byte-stable for equal
    inputs regardless of insertion order.
    """
    if not results:
        raise ValueError("empty benchmark results")
    objects = sorted(results)
    if methods is None:
        methods = sorted({m for row in results.values() for m in row})
    if not methods:
        raise ValueError("no methods in benchmark results")
    missing = [
        f"{obj}/{m}" for obj in objects for m in methods if m not in results[obj]
    ]
    extra = [
        f"{obj}/{m}" for obj in objects for m in results[obj] if m not in methods
    ]
    if missing or extra:
        issues = []
        if missing:
            issues.append("missing cells: " + ", ".join(missing))
        if extra:
            issues.append("undeclared cells: " + ", ".join(extra))
        raise ValueError("ragged benchmark results; " + "; ".join(issues))

    averages = {m: float(np.mean([results[o][m] for o in objects])) for m in methods}

    csv_lines = ["object,method,mae_deg"]
    for obj in objects:
        for m in methods:
            csv_lines.append(f"{obj},{m},{results[obj][m]:.6f}")
    for m in methods:
        csv_lines.append(f"average,{m},{averages[m]:.6f}")
    csv_text = "\n".join(csv_lines) + "\n"

    name_w = max(len("object"), len("average"), *(len(o) for o in objects))
    col_w = [max(len(m), 8) for m in methods]
    rows = [
        "  ".join(["object".ljust(name_w)] + [m.rjust(w) for m, w in zip(methods, col_w)])
    ]
    for obj in objects:
        rows.append(
            "  ".join([obj.ljust(name_w)] + [f"{results[obj][m]:.2f}".rjust(w) for m, w in zip(methods, col_w)])
        )
    rows.append(
        "  ".join(["average".ljust(name_w)] + [f"{averages[m]:.2f}".rjust(w) for m, w in zip(methods, col_w)])
    )
    return csv_text, "\n".join(rows) + "\n"

"""Quantile binarization of count features, E/M category coding, episode CSV I/O.

Numeric features are recoded as indicator columns value >= cutoff, with
cutoffs at nearest-rank percentiles of the training data (duplicates and the
feature minimum dropped, so no emitted column is constant). HCPCS codes map
to evaluation-and-management service categories by first match against the
published inclusive ranges, in their printed order.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DEFAULT_QUANTILE_GRID",
    "EM_CATEGORY_RANGES",
    "UNCATEGORIZED",
    "QuantizerSpec",
    "EpisodeTable",
    "fit_quantizer",
    "binarize",
    "reconstruct",
    "em_category",
    "read_episode_csv",
    "write_episode_csv",
]

DEFAULT_QUANTILE_GRID = (25.0, 50.0, 75.0, 90.0, 95.0, 99.0)
UNCATEGORIZED = "uncategorized"

# (category, inclusive HCPCS ranges) in printed order; several ranges overlap
# (prolonged spans case_management, care_plan and the start of
# preventative_medicine) and the first match wins.
EM_CATEGORY_RANGES: tuple[tuple[str, tuple[tuple[int, int], ...]], ...] = (
    ("office_or_outpatient", ((99202, 99215),)),
    ("hospital_observation", ((99217, 99226),)),
    ("hospital_inpatient", ((99221, 99239),)),
    ("consultation", ((99241, 99255),)),
    ("nursing_facility", ((99304, 99318),)),
    ("domicilliary", ((99324, 99337), (99339, 99340))),
    ("home", ((99341, 99350),)),
    ("prolonged", ((99354, 99416),)),
    ("case_management", ((99366, 99368),)),
    ("care_plan", ((99374, 99380),)),
    ("preventative_medicine", ((99381, 99429),)),
    ("care_management", ((99439, 99491),)),
    ("special_eval", ((99450, 99458),)),
    ("newborn_care", ((99460, 99463),)),
    ("cognitive", ((99483, 99486),)),
    ("behavioral", ((99484, 99484),)),
    ("psych", ((99492, 99494),)),
    ("transitional", ((99495, 99496),)),
    ("other", ((99497, 99499),)),
)


def em_category(hcpcs_code: int) -> str:
    """Service category of an HCPCS code: first printed range containing it."""
    code = int(hcpcs_code)
    for name, ranges in EM_CATEGORY_RANGES:
        for lo, hi in ranges:
            if lo <= code <= hi:
                return name
    return UNCATEGORIZED


def _nearest_rank(sorted_values: np.ndarray, percent: float) -> float:
    n = len(sorted_values)
    idx = int(math.ceil(percent * n / 100.0))
    idx = min(max(idx, 1), n)
    return float(sorted_values[idx - 1])


@dataclass(frozen=True)
class QuantizerSpec:
    """Per-feature deduplicated cutoffs, coded as indicator of value >= cutoff."""

    grid: tuple[float, ...]
    cutoffs: dict  # feature name -> tuple of strictly increasing cutoffs
    minima: dict = field(default_factory=dict)  # feature name -> training minimum

    def feature_names_out(self) -> list[str]:
        out = []
        for name, cuts in self.cutoffs.items():
            out.extend(f"{name}_ge_{c:g}" for c in cuts)
        return out

    def transform_row(self, values: dict) -> np.ndarray:
        bits = []
        for name, cuts in self.cutoffs.items():
            bits.extend(binarize(cuts, values[name]))
        return np.asarray(bits, dtype=float)

    def to_json_dict(self) -> dict:
        return {
            "grid": list(self.grid),
            "features": [
                {
                    "name": name,
                    "cutoffs": list(cuts),
                    "minimum": self.minima.get(name),
                }
                for name, cuts in self.cutoffs.items()
            ],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "QuantizerSpec":
        return cls(
            grid=tuple(obj["grid"]),
            cutoffs={f["name"]: tuple(f["cutoffs"]) for f in obj["features"]},
            minima={f["name"]: f.get("minimum") for f in obj["features"]},
        )

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_json_dict(), **kw)

    @classmethod
    def from_json(cls, text: str) -> "QuantizerSpec":
        return cls.from_json_dict(json.loads(text))


def fit_quantizer(data: dict, grid=DEFAULT_QUANTILE_GRID) -> QuantizerSpec:
    """Nearest-rank percentile cutoffs per feature.

    The percentile at p percent is the value at 1-based index ceil(p/100 * n)
    of the sorted sample. Duplicate cutoffs are merged and cutoffs equal to
    the feature minimum dropped (they would produce constant columns);
    features left with no cutoffs (constants) are dropped entirely.
    """
    cutoffs = {}
    minima = {}
    for name, values in data.items():
        values = np.asarray(values, dtype=float)
        if values.size == 0:
            raise ValueError(f"feature {name!r} has no values")
        sv = np.sort(values)
        lo = float(sv[0])
        cuts = sorted({_nearest_rank(sv, p) for p in grid} - {lo})
        minima[name] = lo
        if cuts:
            cutoffs[name] = tuple(cuts)
    return QuantizerSpec(grid=tuple(grid), cutoffs=cutoffs, minima=minima)


def binarize(cutoffs, value) -> np.ndarray:
    """Indicator vector: bit i is 1 iff value >= cutoffs[i]."""
    return (float(value) >= np.asarray(cutoffs, dtype=float)).astype(float)


def reconstruct(cutoffs, bits, minimum) -> float:
    """Representative value from a bit vector: the largest satisfied cutoff."""
    cuts = np.asarray(cutoffs, dtype=float)
    bits = np.asarray(bits, dtype=bool)
    return float(cuts[bits][-1]) if bits.any() else float(minimum)


# -- episode CSV ---------------------------------------------------------------


@dataclass
class EpisodeTable:
    """Column-oriented episode data as carried by the CSV interchange format.

    ``X`` holds either raw numeric features (column prefix ``feat_``) or
    binary covariates (prefix ``x_``) depending on ``raw``. Interventions are
    (time, category) pairs per episode.
    """

    ids: list
    axis_names: list
    kappa: list
    feature_names: list
    X: np.ndarray
    interventions: list
    T: np.ndarray
    event: np.ndarray
    exposure: np.ndarray
    extras: dict = field(default_factory=dict)
    raw: bool = False

    def __len__(self):
        return len(self.ids)


def _format_interventions(items) -> str:
    return ";".join(f"{t!r}@{c}" for t, c in items)


def _parse_interventions(text: str, row_no: int, map_em: bool):
    items = []
    if not text:
        return items
    for token in text.split(";"):
        try:
            t_str, cat = token.split("@", 1)
            t = float(t_str)
        except ValueError:
            raise ValueError(
                f"row {row_no}: malformed intervention token {token!r}"
            ) from None
        if map_em and cat.isdigit():
            cat = em_category(int(cat))
        items.append((t, cat))
    return items


def write_episode_csv(table: EpisodeTable, path) -> None:
    prefix = "feat_" if table.raw else "x_"
    header = (
        ["id"]
        + [f"kappa_{a}" for a in table.axis_names]
        + [prefix + f for f in table.feature_names]
        + ["interventions", "T", "event", "exposure"]
        + list(table.extras.keys())
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(table)):
            row = [table.ids[i]]
            row += list(table.kappa[i])
            row += [repr(float(v)) for v in table.X[i]]
            row.append(_format_interventions(table.interventions[i]))
            row += [repr(float(table.T[i])), str(int(table.event[i])), repr(float(table.exposure[i]))]
            row += [repr(float(table.extras[k][i])) for k in table.extras]
            writer.writerow(row)


def read_episode_csv(path, map_em: bool = True) -> EpisodeTable:
    """Parse the episode CSV; raises ValueError naming the offending row.

    Numeric-looking intervention categories are treated as HCPCS codes and
    mapped to E/M categories unless ``map_em`` is false.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("empty CSV: missing header") from None
        cols = {name: i for i, name in enumerate(header)}
        for required in ("id", "T", "event"):
            if required not in cols:
                raise ValueError(f"missing required column {required!r}")
        axis_names = [c[len("kappa_"):] for c in header if c.startswith("kappa_")]
        raw = any(c.startswith("feat_") for c in header)
        prefix = "feat_" if raw else "x_"
        feature_names = [c[len(prefix):] for c in header if c.startswith(prefix)]
        extra_names = [
            c
            for c in header
            if c not in ("id", "interventions", "T", "event", "exposure")
            and not c.startswith(("kappa_", "x_", "feat_"))
        ]
        ids, kappa, xs, ivs, ts, evs, exps = [], [], [], [], [], [], []
        extras = {k: [] for k in extra_names}
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(
                    f"row {row_no}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                ids.append(row[cols["id"]])
                kappa.append([row[cols[f"kappa_{a}"]] for a in axis_names])
                xs.append([float(row[cols[prefix + f]]) for f in feature_names])
                ts.append(float(row[cols["T"]]))
                evs.append(int(row[cols["event"]]))
                exps.append(
                    float(row[cols["exposure"]])
                    if "exposure" in cols
                    else float(row[cols["T"]])
                )
                for k in extra_names:
                    extras[k].append(float(row[cols[k]]))
            except ValueError as err:
                raise ValueError(f"row {row_no}: {err}") from None
            ivs.append(
                _parse_interventions(
                    row[cols["interventions"]] if "interventions" in cols else "",
                    row_no,
                    map_em,
                )
            )
    n = len(ids)
    return EpisodeTable(
        ids=ids,
        axis_names=axis_names,
        kappa=kappa,
        feature_names=feature_names,
        X=np.asarray(xs, dtype=float).reshape(n, len(feature_names)),
        interventions=ivs,
        T=np.asarray(ts),
        event=np.asarray(evs, dtype=int),
        exposure=np.asarray(exps),
        extras={k: np.asarray(v) for k, v in extras.items()},
        raw=raw,
    )


def quantize_table(table: EpisodeTable, grid=DEFAULT_QUANTILE_GRID):
    """Fit a quantizer on a raw-feature table and emit the binarized table."""
    if not table.raw:
        raise ValueError("table already binarized")
    data = {f: table.X[:, j] for j, f in enumerate(table.feature_names)}
    spec = fit_quantizer(data, grid)
    kept = list(spec.cutoffs.keys())
    bits = np.zeros((len(table), len(spec.feature_names_out())))
    col = 0
    for name in kept:
        cuts = np.asarray(spec.cutoffs[name])
        j = table.feature_names.index(name)
        bits[:, col : col + len(cuts)] = table.X[:, [j]] >= cuts[None, :]
        col += len(cuts)
    out = EpisodeTable(
        ids=table.ids,
        axis_names=table.axis_names,
        kappa=table.kappa,
        feature_names=spec.feature_names_out(),
        X=bits,
        interventions=table.interventions,
        T=table.T,
        event=table.event,
        exposure=table.exposure,
        extras=table.extras,
        raw=False,
    )
    return spec, out

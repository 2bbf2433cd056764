"""Count ingestion, configuration files and result serialization.

Counts are read from a long CSV with header
``site,year,occasion,species,count`` plus optional numeric columns (for
example ``lat`` and ``long``) that may serve as covariates. Survey sheets
with one column per stop (``Stop1 .. StopT``) can be pivoted with
``wide_stops=True``. Every file is written atomically through a temporary
file in the target directory.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import re
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .model import Dataset, standardize

__all__ = [
    "IngestError",
    "parse_counts_csv",
    "write_counts_csv",
    "parse_config",
    "write_config",
    "atomic_write",
    "write_study_csv",
    "read_study_csv",
    "max_abundance_table",
    "yearly_mean_series",
    "emit_results",
]

log = logging.getLogger(__name__)

LONG_COLUMNS = ("site", "year", "occasion", "species", "count")
_STOP = re.compile(r"^stop[ _]?(\d+)$", re.IGNORECASE)


class IngestError(ValueError):
    """Malformed input; the message names the offending row when known."""


@contextmanager
def atomic_write(path, mode="w", newline=""):
    """Write to a temporary sibling file, then rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, newline=newline if "b" not in mode else None) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _int_field(value, name, row):
    try:
        f = float(value)
    except (TypeError, ValueError):
        raise IngestError(f"row {row}: {name} {value!r} is not a number") from None
    if not np.isfinite(f) or f != int(f):
        raise IngestError(f"row {row}: {name} {value!r} is not an integer")
    return int(f)


def _read_records(path, wide_stops):
    """Yield ``(row_number, site, year, occasion, species, count, extras)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestError("empty file")
        fields = [f.strip() for f in reader.fieldnames]
        reader.fieldnames = fields
        if wide_stops:
            stops = [(f, int(_STOP.match(f).group(1))) for f in fields if _STOP.match(f)]
            need = ("site", "year", "species")
            if not stops:
                raise IngestError("wide layout needs Stop1..StopT columns")
        else:
            stops = None
            need = LONG_COLUMNS
        missing = [c for c in need if c not in fields]
        if missing:
            raise IngestError(f"missing columns: {', '.join(missing)}")
        fixed = set(need) | ({f for f, _ in stops} if stops else set())
        extra_cols = [f for f in fields if f not in fixed]
        for row, rec in enumerate(reader, start=2):
            extras = {}
            for c in extra_cols:
                v = (rec.get(c) or "").strip()
                if v:
                    try:
                        extras[c] = float(v)
                    except ValueError:
                        raise IngestError(f"row {row}: column {c} value {v!r} is not numeric") from None
            site = (rec["site"] or "").strip()
            species = (rec["species"] or "").strip()
            if not site or not species:
                raise IngestError(f"row {row}: empty site or species")
            year = _int_field(rec["year"], "year", row)
            if stops:
                for col, occ in stops:
                    yield row, site, year, occ, species, _int_field(rec[col], col, row), extras
            else:
                occ = _int_field(rec["occasion"], "occasion", row)
                yield row, site, year, occ, species, _int_field(rec["count"], "count", row), extras


def _covariate_matrix(per_site, sites, spec_list, row_of_site):
    """Build covariate columns from site values; ``a*b`` denotes a product."""
    cols = []
    for term in spec_list:
        parts = [p.strip() for p in term.split("*")]
        col = np.ones(len(sites))
        for p in parts:
            for i, s in enumerate(sites):
                if p not in per_site[s]:
                    raise IngestError(f"row {row_of_site[s]}: site {s} has no value for covariate {p!r}")
                col[i] *= per_site[s][p]
        cols.append(col)
    return np.column_stack(cols) if cols else None


def parse_counts_csv(path, wide_stops=False, covariates=(), standardize_covariates=True):
    """Read survey counts into a dense :class:`Dataset`.

    ``covariates`` names site-level columns used as abundance covariates;
    a term ``"lat*long"`` adds the product of two columns. Sites, years and
    species are indexed in sorted order, so labels are stable across runs.
    Panels must be complete: every (site, year, species) needs occasions
    ``1..T`` with the same ``T`` everywhere.
    """
    seen = {}
    per_site = {}
    row_of_site = {}
    for row, site, year, occ, species, count, extras in _read_records(path, wide_stops):
        key = (site, year, occ, species)
        if key in seen:
            raise IngestError(f"row {row}: duplicate record for site={site} year={year} "
                              f"occasion={occ} species={species} (first seen on row {seen[key][0]})")
        if count < 0:
            raise IngestError(f"row {row}: negative count {count}")
        if occ < 1:
            raise IngestError(f"row {row}: occasions are numbered from 1")
        seen[key] = (row, count)
        row_of_site.setdefault(site, row)
        vals = per_site.setdefault(site, {})
        for c, v in extras.items():
            if c in vals and vals[c] != v:
                raise IngestError(f"row {row}: site covariate {c} differs from an earlier row of site {site}")
            vals[c] = v
    if not seen:
        raise IngestError("no records")
    sites = sorted({k[0] for k in seen})
    years = sorted({k[1] for k in seen})
    species = sorted({k[3] for k in seen})
    occs = {}
    for (site, year, occ, sp), (row, _) in seen.items():
        occs.setdefault((site, year, sp), []).append((occ, row))
    T = None
    for site in sites:
        for year in years:
            for sp in species:
                got = occs.get((site, year, sp))
                if got is None:
                    raise IngestError(f"missing panel: site={site} year={year} species={sp} has no records "
                                      "(complete panels are required)")
                nums = sorted(o for o, _ in got)
                if T is None:
                    T = len(nums)
                if nums != list(range(1, T + 1)):
                    row = max(r for _, r in got)
                    raise IngestError(f"row {row}: ragged occasions for site={site} year={year} species={sp}: "
                                      f"expected 1..{T}, found {nums[:5]}{'...' if len(nums) > 5 else ''}")
    si = {s: i for i, s in enumerate(sites)}
    yi = {y: i for i, y in enumerate(years)}
    pi = {s: i for i, s in enumerate(species)}
    Y = np.zeros((len(sites), T, len(years), len(species)), dtype=np.int64)
    for (site, year, occ, sp), (_, count) in seen.items():
        Y[si[site], occ - 1, yi[year], pi[sp]] = count
    X = _covariate_matrix(per_site, sites, list(covariates), row_of_site)
    if X is not None and standardize_covariates:
        X = standardize(X)
    data = Dataset(Y=Y, X=X, site_ids=tuple(sites), years=tuple(years), species_ids=tuple(species))
    log.info("read %d count cells; zero fraction %.3f", Y.size, float(np.mean(Y == 0)))
    return data


def write_counts_csv(data: Dataset, path, extra_site_columns=None):
    """Write counts in the long layout read by :func:`parse_counts_csv`."""
    extra = extra_site_columns or {}
    names = list(extra)
    with atomic_write(path) as fh:
        w = csv.writer(fh)
        w.writerow(list(LONG_COLUMNS) + names)
        R, T, K, S = data.Y.shape
        for i in range(R):
            ex = [repr(float(extra[n][i])) for n in names]
            for k in range(K):
                for s in range(S):
                    for t in range(T):
                        w.writerow([data.site_ids[i], data.years[k], t + 1, data.species_ids[s],
                                    int(data.Y[i, t, k, s])] + ex)


# ---------------------------------------------------------------------------
# configuration


def _coerce(value):
    v = value.strip()
    low = v.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def parse_config(path):
    """Read a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise IngestError(f"config line {n}: expected key = value")
            key, value = line.split("=", 1)
            key = key.strip().replace("-", "_")
            if not key:
                raise IngestError(f"config line {n}: empty key")
            out[key] = _coerce(value)
    return out


def write_config(cfg: dict, path):
    with atomic_write(path) as fh:
        for k in sorted(cfg):
            fh.write(f"{k} = {cfg[k]}\n")


# ---------------------------------------------------------------------------
# results


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (tuple, list)):
        return ";".join(map(str, v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_study_csv(rows, path):
    """Study rows in the standard column order (full precision)."""
    from .metrics import STUDY_COLUMNS

    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STUDY_COLUMNS)
        for r in rows:
            d = r.to_dict()
            w.writerow([_fmt(d[c]) for c in STUDY_COLUMNS])


def read_study_csv(path):
    from .metrics import STUDY_COLUMNS, StudyMetricRow

    text_cols = {"model", "scenario"}
    int_cols = {"replicates", "failures"}
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            d = {}
            for c in STUDY_COLUMNS:
                v = rec[c]
                if c in text_cols:
                    d[c] = v
                elif c in int_cols:
                    d[c] = int(v)
                elif c == "flagged":
                    d[c] = tuple(x for x in v.split(";") if x)
                else:
                    d[c] = None if v == "" else float(v)
            rows.append(StudyMetricRow.from_dict(d))
    return rows


def max_abundance_table(data: Dataset, N_mean):
    """Per species: maximum observed count and maximum rounded posterior-mean N."""
    Nm = np.rint(np.asarray(N_mean, dtype=float))
    out = []
    for s, name in enumerate(data.species_ids):
        out.append((name, int(data.Y[..., s].max()), int(Nm[..., s].max())))
    return out


def yearly_mean_series(data: Dataset, N_mean, sites=None):
    """Mean posterior abundance per (year, species), optionally over a site subset."""
    Nm = np.asarray(N_mean, dtype=float)
    idx = slice(None) if sites is None else [data.site_ids.index(s) for s in sites]
    means = Nm[idx].mean(axis=0)  # (K, S)
    return [(data.years[k], data.species_ids[s], float(means[k, s]))
            for k in range(means.shape[0]) for s in range(means.shape[1])]


def _write_matrix(path, M, labels):
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(labels))
        for lab, r in zip(labels, M):
            w.writerow([lab] + [repr(float(v)) for v in r])


def emit_results(out_dir, summary=None, report=None, rows=None, draws=None, data=None,
                 write_draws=False):
    """Write every available result to ``out_dir``; returns the written paths.

    * ``posterior_summary.csv`` and optionally ``draws.csv``;
    * ``correlation_latent.csv``, one ``correlation_site<i>[_year<k>].csv``
      per site (and year) and ``correlations.json``;
    * ``study.csv``;
    * ``max_abundance.csv`` (species, max Y, max N-hat) and
      ``yearly_mean_abundance.csv`` when draws with latent abundances and
      the data are given.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    written = []
    if summary is not None:
        p = out / "posterior_summary.csv"
        with atomic_write(p) as fh:
            summary.table.to_csv(fh, index_label="parameter", float_format="%.10g", lineterminator="\n")
        written.append(p)
    if draws is not None and write_draws:
        p = out / "draws.csv"
        tmp = out / ".draws.csv.tmp"
        draws.to_csv(tmp)
        os.replace(tmp, p)
        written.append(p)
    if report is not None:
        labels = report.species or tuple(str(s) for s in range(report.latent.shape[0]))
        p = out / "correlation_latent.csv"
        _write_matrix(p, report.latent, labels)
        written.append(p)
        sites = report.sites or tuple(str(i) for i in range(report.abundance.shape[0]))
        for i, site in enumerate(sites):
            mats = report.abundance[i]
            if mats.ndim == 2:
                p = out / f"correlation_site{site}.csv"
                _write_matrix(p, mats, labels)
                written.append(p)
            else:
                for k, M in enumerate(mats):
                    p = out / f"correlation_site{site}_year{k + 1}.csv"
                    _write_matrix(p, M, labels)
                    written.append(p)
        p = out / "correlations.json"
        with atomic_write(p) as fh:
            fh.write(report.to_json())
        written.append(p)
    if rows is not None:
        p = out / "study.csv"
        write_study_csv(rows, p)
        written.append(p)
    if draws is not None and data is not None and "N" in draws.blocks:
        N_mean = draws.posterior_mean("N")
        p = out / "max_abundance.csv"
        with atomic_write(p) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["species", "max_Y", "max_N_hat"])
            w.writerows(max_abundance_table(data, N_mean))
        written.append(p)
        p = out / "yearly_mean_abundance.csv"
        with atomic_write(p) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["year", "species", "mean_N_hat"])
            w.writerows([(y, s, repr(v)) for y, s, v in yearly_mean_series(data, N_mean)])
        written.append(p)
    return written


def write_json(obj, path):
    with atomic_write(path) as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")

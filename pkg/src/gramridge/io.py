"""Run configuration, delimited-file ingestion and fit artifacts."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .glm import ResponseSpec
from .linalg import BlockedDesign, DesignError

ARTIFACT_FORMAT = "gramridge-fit"
ARTIFACT_VERSION = 1
_MISSING = {"", "na", "nan", "null", "none", "?"}


class ConfigError(ValueError):
    """Invalid configuration or input files."""


@dataclass
class BlockSpec:
    name: str
    path: str
    role: str = "penalized"


@dataclass
class RunConfig:
    """Settings for one CLI run; loaded from YAML and overridden by flags."""

    blocks: list = field(default_factory=list)
    response: str | None = None
    family: str = "linear"
    paired: list | None = None
    k: int = 10
    repeats: int = 1
    seed: int = 0
    stratify: bool = True
    criterion: str = "cvl"
    method: str = "cv"
    preferred: list = field(default_factory=list)
    global_iters: int = 10
    local_iters: int = 25
    bounds: tuple = (-10.0, 30.0)
    workers: int = 1
    output: str = "."
    lambdas: list | None = None
    base_dir: str = "."

    @classmethod
    def from_file(cls, path) -> RunConfig:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}".replace("\n", " ")) from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must contain a mapping at top level")
        return cls.from_dict(raw, base_dir=str(path.parent))

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str = ".") -> RunConfig:
        raw = dict(raw)
        cfg = cls(base_dir=base_dir)
        blocks = raw.pop("blocks", [])
        cfg.blocks = [b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in blocks]
        resp = raw.pop("response", None)
        if isinstance(resp, dict):
            cfg.response = resp.get("path")
            cfg.family = resp.get("family", cfg.family)
        else:
            cfg.response = resp
        for section in ("folds", "tuner"):
            sub = raw.pop(section, {}) or {}
            for key, value in sub.items():
                raw.setdefault(key, value)
        if "lower" in raw or "upper" in raw:
            lo = raw.pop("lower", cfg.bounds[0])
            hi = raw.pop("upper", cfg.bounds[1])
            raw["bounds"] = (lo, hi)
        names = set(cls.__dataclass_fields__)
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        for key, value in raw.items():
            setattr(cfg, key, value)
        return cfg

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def validate(self, need_response: bool = True) -> None:
        if not self.blocks:
            raise ConfigError("no blocks configured")
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate block names: {names}")
        for b in self.blocks:
            if b.role not in ("penalized", "unpenalized"):
                raise ConfigError(f"block {b.name!r}: role must be penalized or unpenalized")
            if not self.resolve(b.path).is_file():
                raise ConfigError(f"block {b.name!r}: file not found: {b.path}")
        if not any(b.role == "penalized" for b in self.blocks):
            raise ConfigError("at least one penalized block is required")
        if sum(b.role == "unpenalized" for b in self.blocks) > 1:
            raise ConfigError("at most one unpenalized block is supported")
        if need_response:
            if not self.response:
                raise ConfigError("no response file configured")
            if not self.resolve(self.response).is_file():
                raise ConfigError(f"response file not found: {self.response}")
        if self.family not in ("linear", "logistic", "cox"):
            raise ConfigError(f"unknown family {self.family!r}")
        if self.method not in ("cv", "ml", "vb"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.criterion not in ("cvl", "auc", "cindex", "mse"):
            raise ConfigError(f"unknown criterion {self.criterion!r}")
        if self.method == "vb" and self.family != "logistic":
            raise ConfigError("method vb requires a binary (logistic) response")
        unpen = any(b.role == "unpenalized" for b in self.blocks)
        if self.method in ("ml", "vb") and unpen:
            raise ConfigError(f"method {self.method} does not support an unpenalized block")
        if self.paired is not None:
            if len(self.paired) != 2:
                raise ConfigError("paired must name exactly two blocks")
            pen = [b.name for b in self.blocks if b.role == "penalized"]
            for name in self.paired:
                if name not in pen:
                    raise ConfigError(f"paired block {name!r} is not a penalized block")
        pen = [b.name for b in self.blocks if b.role == "penalized"]
        for name in self.preferred:
            if name not in pen:
                raise ConfigError(f"preferred block {name!r} is not a penalized block")
        if self.k < 2 or self.repeats < 1:
            raise ConfigError("folds must be >= 2 and repeats >= 1")

    def fingerprint(self) -> str:
        d = asdict(self)
        d.pop("output", None)
        d.pop("base_dir", None)
        d["bounds"] = list(d["bounds"])
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()


def _delimiter(header: str) -> str:
    return "\t" if "\t" in header else ","


def read_table(path):
    """Read a delimited numeric table ``id, col1, col2, ...``.

    Returns ``(ids, column_names, values)``. Comma or tab delimiters are
    detected from the header line.

    Raises
    ------
    ConfigError
        On missing or non-numeric cells (with row and column), ragged rows or
        duplicated ids.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        header = fh.readline()
        if not header.strip():
            raise ConfigError(f"{path}: empty file")
        fh.seek(0)
        reader = csv.reader(fh, delimiter=_delimiter(header))
        rows = list(reader)
    columns = [c.strip() for c in rows[0][1:]]
    ids, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(columns) + 1:
            raise ConfigError(
                f"{path}: row {lineno} has {len(row)} fields, expected {len(columns) + 1}"
            )
        ids.append(row[0].strip())
        parsed = []
        for col, cell in zip(columns, row[1:]):
            text = cell.strip()
            if text.lower() in _MISSING:
                raise ConfigError(f"{path}: missing value at row {lineno}, column {col!r}")
            try:
                v = float(text)
            except ValueError:
                raise ConfigError(
                    f"{path}: non-numeric value {text!r} at row {lineno}, column {col!r}"
                ) from None
            if not math.isfinite(v):
                raise ConfigError(f"{path}: non-finite value at row {lineno}, column {col!r}")
            parsed.append(v)
        values.append(parsed)
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise ConfigError(f"{path}: duplicated sample ids {dup}")
    return ids, columns, np.array(values, dtype=np.float64).reshape(len(ids), len(columns))


def _align(ids, ref_ids, values, path):
    if set(ids) != set(ref_ids):
        missing = sorted(set(ref_ids) - set(ids))
        extra = sorted(set(ids) - set(ref_ids))
        raise ConfigError(f"{path}: sample ids do not match; missing {missing}, unexpected {extra}")
    pos = {s: i for i, s in enumerate(ids)}
    return values[[pos[s] for s in ref_ids]]


def read_response(path, family: str):
    ids, cols, vals = read_table(path)
    if family == "cox":
        if vals.shape[1] != 2:
            raise ConfigError(f"{path}: survival response needs columns id, time, status")
        return ids, ResponseSpec.cox(vals[:, 0], vals[:, 1])
    if vals.shape[1] != 1:
        raise ConfigError(f"{path}: {family} response needs columns id, y")
    if family == "logistic":
        return ids, ResponseSpec.logistic(vals[:, 0])
    return ids, ResponseSpec.linear(vals[:, 0])


def ingest(config: RunConfig, need_response: bool = True):
    """Load and align all files named in ``config``.

    Samples are ordered as in the response file (or the first block file when
    no response is needed). Returns ``(design, response_or_None, ids)``.
    """
    config.validate(need_response)
    response = None
    ref_ids = None
    try:
        if need_response:
            ref_ids, response = read_response(config.resolve(config.response), config.family)
        blocks, names, unpen = [], [], None
        for b in config.blocks:
            path = config.resolve(b.path)
            ids, _, vals = read_table(path)
            if ref_ids is None:
                ref_ids = ids
            vals = _align(ids, ref_ids, vals, path)
            if b.role == "unpenalized":
                unpen = vals
            else:
                blocks.append(vals)
                names.append(b.name)
        paired = None
        if config.paired:
            paired = (names.index(config.paired[0]), names.index(config.paired[1]))
        design = BlockedDesign(tuple(blocks), unpen, tuple(names), paired)
    except (DesignError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return design, response, list(ref_ids)


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _floats(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=np.float64).ravel()]


@dataclass
class FitArtifact:
    """Serialized fit: penalties, coefficients per block, in-sample eta, baseline."""

    family: str
    link: str
    block_names: list
    block_sizes: list
    lambdas: list
    cross: float | None
    paired: list | None
    unpen_coef: list
    coefficients: dict
    eta: list
    sample_ids: list
    baseline: dict | None = None
    trace: list = field(default_factory=list)
    config_fingerprint: str = ""
    created: float = 0.0

    def predict(self, blocks, unpen=None) -> np.ndarray:
        """Linear predictors for new data blocks (in artifact block order)."""
        if len(blocks) != len(self.block_names):
            raise ConfigError(f"expected {len(self.block_names)} blocks, got {len(blocks)}")
        m = np.asarray(blocks[0]).shape[0]
        eta = np.zeros(m)
        if self.unpen_coef:
            if unpen is None:
                raise ConfigError("model has unpenalized covariates; they are required for prediction")
            eta = eta + np.asarray(unpen, dtype=np.float64) @ np.array(self.unpen_coef)
        for name, size, x in zip(self.block_names, self.block_sizes, blocks):
            x = np.asarray(x, dtype=np.float64)
            if x.ndim != 2 or x.shape[1] != size:
                raise ConfigError(f"block {name!r} has {x.shape[1]} columns, expected {size}")
            eta = eta + x @ np.array(self.coefficients[name])
        return eta

    def response_scale(self, eta) -> np.ndarray:
        from scipy.special import expit, ndtr

        eta = np.asarray(eta, dtype=np.float64)
        if self.link == "logit":
            return expit(eta)
        if self.link == "probit":
            return ndtr(eta)
        if self.link == "log":
            return np.exp(eta)
        return eta

    def to_json(self) -> str:
        d = asdict(self)
        d = {"format": ARTIFACT_FORMAT, "version": ARTIFACT_VERSION, **d}
        return json.dumps(d, sort_keys=True, indent=1, allow_nan=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> FitArtifact:
        d = json.loads(text)
        if d.pop("format", None) != ARTIFACT_FORMAT:
            raise ConfigError("not a fit artifact")
        version = d.pop("version", None)
        if version != ARTIFACT_VERSION:
            raise ConfigError(f"unsupported artifact version {version}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> FitArtifact:
        try:
            return cls.from_json(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"artifact not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse artifact {path}: {exc}") from exc


def build_artifact(fit_like, design: BlockedDesign, penalties, family: str, link: str, ids,
                   trace=(), fingerprint: str = "", timestamp: bool = True) -> FitArtifact:
    """Package a fit (anything with ``dual``, ``unpen_coef``, ``eta``) as an artifact."""
    from .linalg import recover_coefficients

    beta = recover_coefficients(fit_like, design, penalties)
    p1 = design.n_unpenalized
    coefs = {}
    start = p1
    for name, size in zip(design.block_names, design.block_sizes):
        coefs[name] = _floats(beta[start:start + size])
        start += size
    baseline = None
    if getattr(fit_like, "baseline", None) is not None:
        bl = fit_like.baseline
        baseline = {"times": _floats(bl.times), "jumps": _floats(bl.jumps)}
    return FitArtifact(
        family=family,
        link=link,
        block_names=list(design.block_names),
        block_sizes=[int(s) for s in design.block_sizes],
        lambdas=_floats(penalties.lambdas),
        cross=None if penalties.cross is None else float(penalties.cross),
        paired=None if design.paired is None else [design.block_names[i] for i in design.paired],
        unpen_coef=_floats(beta[:p1]),
        coefficients=coefs,
        eta=_floats(fit_like.eta),
        sample_ids=[str(s) for s in ids],
        baseline=baseline,
        trace=[[list(lam), cross, float(u)] for lam, cross, u in trace],
        config_fingerprint=fingerprint,
        created=time.time() if timestamp else 0.0,
    )


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p

"""Record schema, manifest file format, and the RTEN binary tensor format.

Any generative-model backend feeds per-sample terms into the scoring
pipeline through these files: a line-delimited manifest of records (one
JSON object per line) plus optional externally stored pixel tensors.
"""

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ManifestError, TensorFormatError

SPLIT_ID_TRAIN = "id_train"
SPLIT_ID_TEST = "id_test"
OOD_PREFIX = "ood:"

REQUIRED_KEYS = ("sample_id", "split", "recon_loglik", "kl_prior", "mu", "logvar")
OPTIONAL_KEYS = ("bits", "bg_loglik", "ens_logliks", "layer_terms", "tensor_path")


class LayerTerm(NamedTuple):
    """Per-layer terms of a hierarchical model: log p(x, k) = recon_k - kl_gt_k."""

    k: int
    recon_k: float
    kl_gt_k: float


def valid_split(split):
    if split in (SPLIT_ID_TRAIN, SPLIT_ID_TEST):
        return True
    return split.startswith(OOD_PREFIX) and len(split) > len(OOD_PREFIX)


@dataclass(frozen=True)
class SampleRecord:
    """Per-sample terms produced by a trained generative model."""

    sample_id: str
    split: str
    recon_loglik: float
    kl_prior: float
    mu: np.ndarray
    logvar: np.ndarray
    bits: float | None = None
    bg_loglik: float | None = None
    ens_logliks: np.ndarray | None = None
    layer_terms: tuple[LayerTerm, ...] | None = None
    tensor_path: str | None = None

    @property
    def latent_dim(self):
        return len(self.mu)

    @property
    def is_ood(self):
        return self.split.startswith(OOD_PREFIX)

    @property
    def ood_name(self):
        return self.split[len(OOD_PREFIX):] if self.is_ood else None

    def layer_term(self, k):
        for term in self.layer_terms or ():
            if term.k == k:
                return term
        return None

    def to_json_obj(self):
        obj = {
            "sample_id": self.sample_id,
            "split": self.split,
            "recon_loglik": float(self.recon_loglik),
            "kl_prior": float(self.kl_prior),
            "mu": [float(v) for v in self.mu],
            "logvar": [float(v) for v in self.logvar],
        }
        if self.bits is not None:
            obj["bits"] = float(self.bits)
        if self.bg_loglik is not None:
            obj["bg_loglik"] = float(self.bg_loglik)
        if self.ens_logliks is not None:
            obj["ens_logliks"] = [float(v) for v in self.ens_logliks]
        if self.layer_terms is not None:
            obj["layer_terms"] = [
                {"k": t.k, "recon_k": float(t.recon_k), "kl_gt_k": float(t.kl_gt_k)}
                for t in self.layer_terms
            ]
        if self.tensor_path is not None:
            obj["tensor_path"] = self.tensor_path
        return obj


@dataclass(frozen=True)
class Dataset:
    """An immutable collection of records sharing one latent dimension."""

    records: tuple[SampleRecord, ...]
    latent_dim: int
    root: Path = field(default_factory=Path)
    flagged_negative_kl: tuple[str, ...] = ()

    def by_split(self, split):
        return [r for r in self.records if r.split == split]

    def ood_names(self):
        return sorted({r.ood_name for r in self.records if r.is_ood})

    def get(self, sample_id):
        for r in self.records:
            if r.sample_id == sample_id:
                return r
        raise KeyError(sample_id)

    def __len__(self):
        return len(self.records)


def _as_float(value, key, line):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ManifestError(f"field {key!r} must be a number", line=line)
    return float(value)


def _as_vector(value, key, line):
    if not isinstance(value, list) or not value:
        raise ManifestError(f"field {key!r} must be a non-empty array", line=line)
    return np.array([_as_float(v, key, line) for v in value])


def _record_from_obj(obj, line):
    for key in REQUIRED_KEYS:
        if key not in obj:
            raise ManifestError(f"missing required key {key!r}", line=line)
    unknown = set(obj) - set(REQUIRED_KEYS) - set(OPTIONAL_KEYS)
    if unknown:
        raise ManifestError(f"unknown keys {sorted(unknown)}", line=line)

    sample_id = obj["sample_id"]
    if not isinstance(sample_id, str) or not sample_id:
        raise ManifestError("sample_id must be a non-empty string", line=line)
    split = obj["split"]
    if not isinstance(split, str) or not valid_split(split):
        raise ManifestError(
            f"split must be 'id_train', 'id_test' or 'ood:<name>', got {split!r}",
            line=line,
        )

    mu = _as_vector(obj["mu"], "mu", line)
    logvar = _as_vector(obj["logvar"], "logvar", line)
    if len(mu) != len(logvar):
        raise ManifestError(
            f"mu and logvar lengths differ ({len(mu)} vs {len(logvar)})", line=line
        )

    layer_terms = None
    if "layer_terms" in obj:
        terms = []
        for t in obj["layer_terms"]:
            if not isinstance(t, dict) or set(t) != {"k", "recon_k", "kl_gt_k"}:
                raise ManifestError(
                    "layer_terms entries must be {k, recon_k, kl_gt_k}", line=line
                )
            terms.append(
                LayerTerm(int(t["k"]), _as_float(t["recon_k"], "recon_k", line),
                          _as_float(t["kl_gt_k"], "kl_gt_k", line))
            )
        layer_terms = tuple(terms)

    ens = None
    if "ens_logliks" in obj:
        ens = _as_vector(obj["ens_logliks"], "ens_logliks", line)

    return SampleRecord(
        sample_id=sample_id,
        split=split,
        recon_loglik=_as_float(obj["recon_loglik"], "recon_loglik", line),
        kl_prior=_as_float(obj["kl_prior"], "kl_prior", line),
        mu=mu,
        logvar=logvar,
        bits=_as_float(obj["bits"], "bits", line) if "bits" in obj else None,
        bg_loglik=_as_float(obj["bg_loglik"], "bg_loglik", line)
        if "bg_loglik" in obj else None,
        ens_logliks=ens,
        layer_terms=layer_terms,
        tensor_path=obj.get("tensor_path"),
    )


def parse_manifest(path):
    """Parse a line-delimited manifest into a Dataset.

    The latent dimension is inferred from the first record and enforced on
    the rest.  Negative ``kl_prior`` values are flagged with a warning but
    not rejected, since Monte-Carlo KL estimates may dip below zero.
    """
    path = Path(path)
    records = []
    seen = set()
    latent_dim = None
    negative_kl = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"malformed record: {exc.msg}", line=lineno) from exc
            if not isinstance(obj, dict):
                raise ManifestError("each line must be one JSON object", line=lineno)
            rec = _record_from_obj(obj, lineno)
            if rec.sample_id in seen:
                raise ManifestError(
                    f"duplicate sample_id {rec.sample_id!r}", line=lineno
                )
            seen.add(rec.sample_id)
            if latent_dim is None:
                latent_dim = rec.latent_dim
            elif rec.latent_dim != latent_dim:
                raise ManifestError(
                    f"record {rec.sample_id!r} has latent dim {rec.latent_dim}, "
                    f"expected {latent_dim}",
                    line=lineno,
                )
            if rec.kl_prior < 0:
                negative_kl.append(rec.sample_id)
            records.append(rec)
    if not records:
        raise ManifestError("manifest is empty", line=None)
    if negative_kl:
        warnings.warn(
            f"{len(negative_kl)} record(s) with negative kl_prior "
            f"(first: {negative_kl[:3]}); Monte-Carlo KL estimates may dip "
            "below zero",
            stacklevel=2,
        )
    return Dataset(
        records=tuple(records),
        latent_dim=latent_dim,
        root=path.parent,
        flagged_negative_kl=tuple(negative_kl),
    )


def write_manifest(records, path):
    """Write records (or a Dataset) one JSON object per line."""
    if isinstance(records, Dataset):
        records = records.records
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_obj()) + "\n")


# --- RTEN binary tensor format -------------------------------------------
#
# bytes 0-3   magic "RTN1"
# byte  4     dtype code (0x01 = 32-bit real, little-endian)
# byte  5     ndim (u8)
# then        ndim x u32 little-endian extents
# then        row-major float32 payload

RTEN_MAGIC = b"RTN1"
RTEN_DTYPE_F32 = 0x01


def write_tensor(path, data):
    """Write an array as an RTEN file (row-major float32, little-endian)."""
    data = np.asarray(data)
    if not np.all(np.isfinite(data)):
        raise TensorFormatError("tensor values must be finite")
    with open(path, "wb") as fh:
        fh.write(RTEN_MAGIC)
        fh.write(bytes([RTEN_DTYPE_F32, data.ndim]))
        for extent in data.shape:
            fh.write(int(extent).to_bytes(4, "little"))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_tensor(path):
    """Load an RTEN file into a float32 array with its stored shape."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 6 or blob[:4] != RTEN_MAGIC:
        raise TensorFormatError(f"{path}: bad magic (expected {RTEN_MAGIC!r})")
    dtype_code, ndim = blob[4], blob[5]
    if dtype_code != RTEN_DTYPE_F32:
        raise TensorFormatError(f"{path}: unsupported dtype code {dtype_code:#x}")
    header_end = 6 + 4 * ndim
    if len(blob) < header_end:
        raise TensorFormatError(f"{path}: truncated header")
    dims = tuple(
        int.from_bytes(blob[6 + 4 * i: 10 + 4 * i], "little") for i in range(ndim)
    )
    expected = math.prod(dims) * 4
    payload = blob[header_end:]
    if len(payload) != expected:
        raise TensorFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(dims)
    if not np.all(np.isfinite(data)):
        raise TensorFormatError(f"{path}: non-finite values in payload")
    return data


# --- dependency validation -------------------------------------------------


@dataclass(frozen=True)
class ValidationReport:
    """Per requested score, the sample_ids missing a required field."""

    missing: dict[str, tuple[str, ...]]

    @property
    def ok(self):
        return not any(self.missing.values())

    def format(self):
        if self.ok:
            return "all requested scores computable for every record"
        lines = []
        for score in sorted(self.missing):
            ids = self.missing[score]
            if ids:
                shown = ", ".join(ids[:5]) + (" ..." if len(ids) > 5 else "")
                lines.append(f"{score}: {len(ids)} record(s) missing fields ({shown})")
        return "\n".join(lines)


def _missing_for(rec, score):
    if score in ("likelihood", "php"):
        return False
    if score in ("dec", "resultant"):
        return rec.tensor_path is None and rec.bits is None
    if score == "ic":
        return rec.bits is None
    if score == "waic":
        return rec.ens_logliks is None or len(rec.ens_logliks) < 2
    if score == "lra":
        return rec.bg_loglik is None
    if score == "llr" or score.startswith("llr:"):
        if rec.layer_terms is None:
            return True
        if ":" in score:
            k = int(score.split(":", 1)[1])
            return rec.layer_term(k) is None
        return False
    raise ValueError(f"unknown score name {score!r}")


def validate_dataset(ds, needs):
    """Report, per requested score, which records are missing its inputs.

    Pure and report-only: nothing is rejected.
    """
    missing = {}
    for score in sorted(needs):
        flagged = tuple(
            r.sample_id for r in ds.records if _missing_for(r, score)
        )
        missing[score] = flagged
    return ValidationReport(missing=missing)

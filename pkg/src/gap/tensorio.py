"""Bit-exact artifact persistence: tensors, metrics tables, checkpoints.

Tensor files carry magic "GAPT", a u16 format version, u16 rank, u64
little-endian dims, then the float64 little-endian row-major payload.  A
JSON sidecar records name, shape, role, and the file's content digest.
All writes go through a temp-and-rename so partial files never appear
under the target name.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .diffusion import NoiseSchedule, ScoreModel, ScoreNet, build_schedule
from .dynamics import ForecastModel, LearnedStepper, SystemSpec
from .mlp import MLP
from .state import Climatology

MAGIC = b"GAPT"
FORMAT_VERSION = 1


class TensorFormatError(ValueError):
    pass


class DigestMismatchError(OSError):
    pass


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-gapt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def tensor_bytes(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f8")
    header = MAGIC + struct.pack("<HH", FORMAT_VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return header + dims + arr.tobytes()


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_tensor(path: str, array: np.ndarray, name: str = "",
                 role: str = "") -> str:
    """Write one tensor plus its JSON sidecar; returns the content digest."""
    payload = tensor_bytes(np.asarray(array, dtype=np.float64))
    _atomic_write(path, payload)
    digest = hashlib.sha256(payload).hexdigest()
    sidecar = {
        "name": name or os.path.basename(path),
        "shape": list(np.asarray(array).shape),
        "role": role,
        "digest": digest,
    }
    _atomic_write(path + ".json",
                  json.dumps(sidecar, indent=2, sort_keys=True).encode() + b"\n")
    return digest


def read_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise TensorFormatError(f"{path}: not a GAPT tensor")
    version, rank = struct.unpack("<HH", blob[4:8])
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"{path}: unsupported format version {version}")
    need = 8 + 8 * rank
    if len(blob) < need:
        raise TensorFormatError(f"{path}: truncated header")
    dims = struct.unpack(f"<{rank}Q", blob[8:need]) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    body = blob[need:]
    if len(body) != 8 * count:
        raise TensorFormatError(f"{path}: payload size mismatch")
    return np.frombuffer(body, dtype="<f8").reshape(dims).copy()


def read_tensor_checked(path: str) -> tuple[np.ndarray, str]:
    """Read a tensor and verify it against its sidecar digest when present."""
    digest = file_digest(path)
    sidecar_path = path + ".json"
    if os.path.exists(sidecar_path):
        with open(sidecar_path) as fh:
            recorded = json.load(fh).get("digest")
        if recorded is not None and recorded != digest:
            raise DigestMismatchError(
                f"{path}: content digest {digest[:12]} does not match "
                f"sidecar {recorded[:12]}")
    return read_tensor(path), digest


METRICS_HEADER = "metric,lead,value,member_count,seed"


def write_metrics_csv(path: str, rows) -> None:
    """rows: iterable of (metric, lead, value, member_count, seed)."""
    lines = [METRICS_HEADER]
    for metric, lead, value, member_count, seed in rows:
        lines.append(f"{metric},{int(lead)},{format(float(value), '.17g')},"
                     f"{int(member_count)},{int(seed)}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_metrics_csv(path: str) -> list[tuple]:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != METRICS_HEADER:
        raise TensorFormatError(f"{path}: bad metrics header")
    out = []
    for ln in lines[1:]:
        metric, lead, value, mc, seed = ln.split(",")
        out.append((metric, int(lead), float(value), int(mc), int(seed)))
    return out


def write_json(path: str, obj) -> None:
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True).encode() + b"\n")


def read_json(path: str):
    with open(path) as fh:
        return json.load(fh)


def _mlp_to_dict(net: MLP) -> dict:
    return {"sizes": list(net.sizes),
            "Ws": [w.tolist() for w in net.Ws],
            "bs": [b.tolist() for b in net.bs]}


def _mlp_from_dict(d: dict) -> MLP:
    net = MLP(d["sizes"], seed=0)
    net.Ws = [np.array(w, dtype=np.float64) for w in d["Ws"]]
    net.bs = [np.array(b, dtype=np.float64) for b in d["bs"]]
    return net


def climatology_to_dict(c: Climatology) -> dict:
    return {
        "mean": c.mean.tolist(),
        "std": c.std.tolist(),
        "sample_count": c.sample_count,
        "cycle_len": c.cycle_len,
        "per_phase_mean": None if c.per_phase_mean is None
        else c.per_phase_mean.tolist(),
    }


def climatology_from_dict(d: dict) -> Climatology:
    ppm = d.get("per_phase_mean")
    return Climatology(np.array(d["mean"]), np.array(d["std"]),
                       sample_count=d["sample_count"],
                       per_phase_mean=None if ppm is None else np.array(ppm),
                       cycle_len=d.get("cycle_len"))


def schedule_to_dict(s: NoiseSchedule) -> dict:
    return {"beta_min": s.beta_min, "beta_max": s.beta_max, "n_steps": s.n_steps}


def schedule_from_dict(d: dict) -> NoiseSchedule:
    return build_schedule(d["beta_min"], d["beta_max"], d["n_steps"])


def _scalar(v):
    if isinstance(v, (int, np.integer)):
        return int(v)
    return float(v)


def system_spec_to_dict(s: SystemSpec) -> dict:
    params = {k: {"array": v.tolist()} if isinstance(v, np.ndarray) else _scalar(v)
              for k, v in s.params.items()}
    return {"kind": s.kind, "dim": s.dim, "params": params,
            "dt": s.dt, "substeps": s.substeps}


def system_spec_from_dict(d: dict) -> SystemSpec:
    params = {k: np.array(v["array"]) if isinstance(v, dict) else v
              for k, v in d["params"].items()}
    return SystemSpec(d["kind"], d["dim"], params, d["dt"], d["substeps"])


def score_model_to_dict(m: ScoreModel) -> dict:
    out = {"kind": m.kind, "dim": m.dim, "clim": climatology_to_dict(m.clim)}
    if m.kind == "mlp":
        out["net"] = _mlp_to_dict(m.weights.net)
        out["hidden_sizes"] = list(m.weights.hidden_sizes)
        out["n_freqs"] = m.weights.n_freqs
        out["loss_curve"] = list(m.weights.loss_curve)
    else:
        mu, cov = m.gaussian_params
        out["mu"] = mu.tolist()
        out["cov"] = cov.tolist()
    return out


def score_model_from_dict(d: dict) -> ScoreModel:
    clim = climatology_from_dict(d["clim"])
    if d["kind"] == "mlp":
        weights = ScoreNet(_mlp_from_dict(d["net"]), tuple(d["hidden_sizes"]),
                           n_freqs=d["n_freqs"],
                           loss_curve=tuple(d["loss_curve"]))
        return ScoreModel("mlp", d["dim"], clim, weights=weights)
    return ScoreModel("analytic_gaussian", d["dim"], clim,
                      gaussian_params=(np.array(d["mu"]), np.array(d["cov"])))


def forecast_model_to_dict(m: ForecastModel) -> dict:
    out = {"kind": m.kind,
           "spec": None if m.spec is None else system_spec_to_dict(m.spec),
           "bias": None if m.bias_injection is None else m.bias_injection.tolist()}
    if m.kind == "learned_mlp":
        out["net"] = _mlp_to_dict(m.weights.net)
        out["clim"] = climatology_to_dict(m.weights.clim)
        out["loss_curve"] = list(m.weights.loss_curve)
    return out


def forecast_model_from_dict(d: dict) -> ForecastModel:
    spec = None if d["spec"] is None else system_spec_from_dict(d["spec"])
    bias = None if d["bias"] is None else np.array(d["bias"])
    weights = None
    if d["kind"] == "learned_mlp":
        weights = LearnedStepper(_mlp_from_dict(d["net"]),
                                 climatology_from_dict(d["clim"]),
                                 tuple(d["loss_curve"]))
    return ForecastModel(d["kind"], spec, weights=weights, bias_injection=bias)

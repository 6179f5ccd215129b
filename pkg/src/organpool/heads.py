"""Aggregation heads: GAP, global attention, organ-masked attention, OSF.

Every head pools the feature lattice {u_i} into one or more vectors and
classifies them with affine maps.  Four modes:

  gap         uniform mean over the lattice, one classifier for all labels
  global      unary-scorer softmax over the lattice, one classifier
  masked      per-organ softmax restricted to the organ's lattice support,
              per-organ classifiers; "other" labels use an independent
              mask-free attention head
  masked_osf  masked plus organ scalars appended through a truncation gate

forward_study keeps the intermediates needed by backward_study, which is
the exact adjoint of the forward computation graph (finite differences
agree to < 1e-4 relative error; see the training module's grad check).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DataError, SchemaError
from .masks import SCALAR_NAMES, LabelSchema, scalar_vector

MASKED_EPS = 1e-12
MODES = ("gap", "global", "masked", "masked_osf")
OSF_HEADS = ("affine", "mlp")


def canonical_scalar_set(scalar_set) -> tuple[str, ...]:
    """Order a scalar subset canonically as (volume, hu, border)."""
    chosen = set(scalar_set)
    unknown = chosen - set(SCALAR_NAMES)
    if unknown:
        raise DataError(f"unknown scalars {sorted(unknown)}, expected subset of {SCALAR_NAMES}")
    return tuple(s for s in SCALAR_NAMES if s in chosen)


@dataclass
class AttnInternals:
    """State of one softmax pooling, kept for the adjoint pass."""

    sup: np.ndarray        # lattice indices pooled over
    w: np.ndarray          # weights on the support
    f: np.ndarray          # exp arguments (max-subtracted, temperature-scaled)
    i_star: int            # argmax position within the support
    tau: float


@dataclass
class OrganInternals:
    attn: AttnInternals | None     # None on empty-support fallback
    h: np.ndarray                  # pooled feature before any gating
    hhat: np.ndarray               # classifier input
    gate: float | None = None      # sigmoid(gamma_o), OSF with k > 0 only
    border: float | None = None
    hidden_pre: np.ndarray | None = None   # MLP pre-activation


@dataclass
class StudyForwardResult:
    logits: np.ndarray
    probs: np.ndarray
    pooled: dict[str, np.ndarray]
    weights: dict[str, np.ndarray]
    fallback: dict[str, bool]
    internals: dict = field(repr=False, default_factory=dict)


def _check_features(features: np.ndarray) -> np.ndarray:
    u = np.asarray(features, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] < 1:
        raise DataError(f"features must be a non-empty (rows, dim) array, got {u.shape}")
    return u


def _attn_forward(scores: np.ndarray, log_tau: float, sup: np.ndarray,
                  eps: float) -> tuple[np.ndarray, AttnInternals]:
    tau = float(np.exp(log_tau))
    i_star = int(np.argmax(scores))
    diff = scores - scores[i_star]
    f = diff / tau
    e = np.exp(f)
    denom = e.sum() + eps
    w = e / denom
    return w, AttnInternals(sup=sup, w=w, f=f, i_star=i_star, tau=tau)


def _attn_backward(info: AttnInternals, dweights: np.ndarray) -> tuple[np.ndarray, float]:
    """Adjoint of _attn_forward: gradients w.r.t. scores and log tau."""
    total = float(np.dot(info.w, dweights))
    df = info.w * (dweights - total)
    dlog_tau = -float(np.dot(df, info.f))
    ddiff = df / info.tau
    dscores = ddiff.copy()
    dscores[info.i_star] -= ddiff.sum()
    return dscores, dlog_tau


def pool_gap(features: np.ndarray) -> np.ndarray:
    """Uniform mean over all lattice rows."""
    u = _check_features(features)
    return u.mean(axis=0)


def pool_global_attention(features: np.ndarray, scorer_w: np.ndarray,
                          scorer_b: float, log_tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Unary-scorer softmax over the whole lattice; returns (weights, h).

    The scorer bias shifts every score equally, so under max-subtraction
    it cancels exactly; it is kept as a parameter but never enters the
    exponentials, making its gradient exactly zero.
    """
    del scorer_b
    u = _check_features(features)
    scores = u @ np.asarray(scorer_w, dtype=np.float64)
    w, _ = _attn_forward(scores, float(log_tau), np.arange(u.shape[0]), eps=0.0)
    return w, w @ u


def pool_masked_attention(features: np.ndarray, indicators: np.ndarray,
                          scorer_w: np.ndarray, scorer_b: float, log_tau: float,
                          beta_in: float = 0.0, beta_out: float = 0.0,
                          eps: float = MASKED_EPS) -> tuple[np.ndarray, np.ndarray, bool]:
    """Softmax pooling restricted to the organ support.

    The priors shift every surviving score equally (beta_in, since the
    support has m = 1 throughout) or only scores whose weights are zeroed
    (beta_out), and the scorer bias shifts all of them too, so under
    max-subtraction they cancel exactly and are not fed into the
    exponentials.  Their gradients are exactly zero.  Empty support falls
    back to the uniform mean over the whole lattice, with weights
    reported as uniform and the fallback flag set.
    """
    del scorer_b, beta_in, beta_out
    u = _check_features(features)
    n = u.shape[0]
    m = np.asarray(indicators, dtype=np.float64)
    if m.shape != (n,):
        raise DataError(f"indicators shape {m.shape} does not match {n} lattice rows")
    sup = np.flatnonzero(m > 0)
    if sup.size == 0:
        return np.full(n, 1.0 / n), u.mean(axis=0), True
    scores = u[sup] @ np.asarray(scorer_w, dtype=np.float64)
    w_sup, _ = _attn_forward(scores, float(log_tau), sup, eps=eps)
    weights = np.zeros(n)
    weights[sup] = w_sup
    return weights, w_sup @ u[sup], False


def fuse_osf(h: np.ndarray, scalars: np.ndarray, gate_logit: float,
             border: float) -> np.ndarray:
    """Gate the pooled feature by border contact and append the scalars.

    With no scalars (k = 0) the fusion is the identity: the gate is
    bypassed and the output is h itself.
    """
    scalars = np.asarray(scalars, dtype=np.float64).reshape(-1)
    if scalars.size == 0:
        return h
    g = float(expit(gate_logit))
    h_gated = (1.0 - g * border) * h
    return np.concatenate([h_gated, scalars])


def classify(h: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine classifier z = W h + b."""
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weight.ndim != 2 or weight.shape[1] != h.shape[0] or bias.shape != (weight.shape[0],):
        raise DataError(
            f"classifier shapes W{weight.shape}, b{bias.shape} do not fit input {h.shape}")
    return weight @ h + bias


def assemble_study_logits(organ_logits: dict[str, np.ndarray],
                          other_logits: np.ndarray | None,
                          schema: LabelSchema) -> np.ndarray:
    """Place each head's logit block at its labels' schema positions."""
    z = np.zeros(schema.n_labels)
    filled = np.zeros(schema.n_labels, dtype=bool)
    blocks = dict(organ_logits)
    if other_logits is not None:
        blocks["other"] = other_logits
    for group, block in blocks.items():
        idx = (schema.label_indices_for(group) if group != "other"
               else schema.label_indices_for("other"))
        block = np.asarray(block, dtype=np.float64).reshape(-1)
        if block.shape[0] != idx.size:
            raise SchemaError(
                f"head {group!r} emits {block.shape[0]} logits for {idx.size} labels")
        if filled[idx].any():
            dup = [schema.labels[i] for i in idx[filled[idx]]]
            raise SchemaError(f"labels covered by more than one head: {dup}")
        z[idx] = block
        filled[idx] = True
    if not filled.all():
        missing = [schema.labels[i] for i in np.flatnonzero(~filled)]
        raise SchemaError(f"labels not covered by any head: {missing}")
    return z


def init_head_params(mode: str, schema: LabelSchema, d: int, rng: np.random.Generator,
                     scalar_set=(), osf_head: str = "affine") -> dict[str, np.ndarray]:
    """Fresh learnable parameters for one mode.

    Scorer and classifier weights draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in));
    biases, priors, temperatures (log) and gate logits start at 0 so the
    initial attention is near-uniform.
    """
    if mode not in MODES:
        raise DataError(f"unknown mode {mode!r}, expected one of {MODES}")
    if osf_head not in OSF_HEADS:
        raise DataError(f"unknown osf head {osf_head!r}, expected one of {OSF_HEADS}")
    scalars = canonical_scalar_set(scalar_set) if mode == "masked_osf" else ()
    k = len(scalars)

    def uniform(shape, fan_in):
        width = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-width, width, size=shape)

    p: dict[str, np.ndarray] = {}
    if mode in ("gap", "global"):
        if mode == "global":
            p["global/scorer_w"] = uniform(d, d)
            p["global/scorer_b"] = np.zeros(())
            p["global/log_tau"] = np.zeros(())
        p["global/classifier_w"] = uniform((schema.n_labels, d), d)
        p["global/classifier_b"] = np.zeros(schema.n_labels)
        return p

    for organ in schema.organs:
        n_o = len(schema.labels_for(organ))
        p[f"organ/{organ}/scorer_w"] = uniform(d, d)
        p[f"organ/{organ}/scorer_b"] = np.zeros(())
        p[f"organ/{organ}/log_tau"] = np.zeros(())
        p[f"organ/{organ}/beta_in"] = np.zeros(())
        p[f"organ/{organ}/beta_out"] = np.zeros(())
        d_in = d + k
        if mode == "masked_osf":
            p[f"organ/{organ}/gate"] = np.zeros(())
        if mode == "masked_osf" and osf_head == "mlp":
            hidden = max(1, d // 2)
            p[f"organ/{organ}/mlp_w1"] = uniform((hidden, d_in), d_in)
            p[f"organ/{organ}/mlp_b1"] = np.zeros(hidden)
            p[f"organ/{organ}/mlp_w2"] = uniform((n_o, hidden), hidden)
            p[f"organ/{organ}/mlp_b2"] = np.zeros(n_o)
        else:
            p[f"organ/{organ}/classifier_w"] = uniform((n_o, d_in), d_in)
            p[f"organ/{organ}/classifier_b"] = np.zeros(n_o)
    if schema.other_labels:
        n_other = len(schema.other_labels)
        p["other/scorer_w"] = uniform(d, d)
        p["other/scorer_b"] = np.zeros(())
        p["other/log_tau"] = np.zeros(())
        p["other/classifier_w"] = uniform((n_other, d), d)
        p["other/classifier_b"] = np.zeros(n_other)
    return p


def forward_study(features: np.ndarray, params: dict[str, np.ndarray], mode: str,
                  schema: LabelSchema, *, indicators: dict[str, np.ndarray] | None = None,
                  scalar_triples: dict[str, tuple[float, float, float]] | None = None,
                  scalar_set=(), osf_head: str = "affine",
                  eps: float = MASKED_EPS) -> StudyForwardResult:
    """Pool and classify one study, keeping adjoint state."""
    u = _check_features(features)
    n = u.shape[0]
    pooled: dict[str, np.ndarray] = {}
    weights: dict[str, np.ndarray] = {}
    fallback: dict[str, bool] = {}
    internals: dict = {}

    if mode in ("gap", "global"):
        if mode == "gap":
            h = u.mean(axis=0)
            weights["global"] = np.full(n, 1.0 / n)
            internals["global"] = None
        else:
            scores = u @ params["global/scorer_w"]
            w, info = _attn_forward(scores, float(params["global/log_tau"]),
                                    np.arange(n), eps=0.0)
            h = w @ u
            weights["global"] = w
            internals["global"] = info
        pooled["global"] = h
        z = classify(h, params["global/classifier_w"], params["global/classifier_b"])
        return StudyForwardResult(logits=z, probs=expit(z), pooled=pooled,
                                  weights=weights, fallback=fallback, internals=internals)

    if mode not in ("masked", "masked_osf"):
        raise DataError(f"unknown mode {mode!r}, expected one of {MODES}")
    if indicators is None:
        raise DataError("masked modes need per-organ lattice indicators")
    scalars = canonical_scalar_set(scalar_set) if mode == "masked_osf" else ()
    k = len(scalars)
    if k > 0 and scalar_triples is None:
        raise DataError("masked_osf with scalars needs per-organ scalar triples")

    organ_logits: dict[str, np.ndarray] = {}
    for organ in schema.organs:
        m = np.asarray(indicators[organ], dtype=np.float64)
        if m.shape != (n,):
            raise DataError(f"indicators for {organ!r} have shape {m.shape}, expected ({n},)")
        sup = np.flatnonzero(m > 0)
        if sup.size == 0:
            h = u.mean(axis=0)
            weights[organ] = np.full(n, 1.0 / n)
            fallback[organ] = True
            attn = None
        else:
            scores = u[sup] @ params[f"organ/{organ}/scorer_w"]
            w_sup, attn = _attn_forward(scores, float(params[f"organ/{organ}/log_tau"]),
                                        sup, eps=eps)
            h = w_sup @ u[sup]
            full = np.zeros(n)
            full[sup] = w_sup
            weights[organ] = full
            fallback[organ] = False
        pooled[organ] = h

        gate = border = None
        if mode == "masked_osf" and k > 0:
            triple = scalar_triples[organ]
            border = float(triple[2])
            gate = float(expit(params[f"organ/{organ}/gate"]))
            hhat = np.concatenate([(1.0 - gate * border) * h,
                                   scalar_vector(triple, scalars)])
        else:
            hhat = h

        if mode == "masked_osf" and osf_head == "mlp":
            pre = params[f"organ/{organ}/mlp_w1"] @ hhat + params[f"organ/{organ}/mlp_b1"]
            hid = np.maximum(pre, 0.0)
            z_o = params[f"organ/{organ}/mlp_w2"] @ hid + params[f"organ/{organ}/mlp_b2"]
        else:
            pre = None
            z_o = classify(hhat, params[f"organ/{organ}/classifier_w"],
                           params[f"organ/{organ}/classifier_b"])
        organ_logits[organ] = z_o
        internals[organ] = OrganInternals(attn=attn, h=h, hhat=hhat, gate=gate,
                                          border=border, hidden_pre=pre)

    other_logits = None
    if schema.other_labels:
        scores = u @ params["other/scorer_w"]
        w, info = _attn_forward(scores, float(params["other/log_tau"]),
                                np.arange(n), eps=0.0)
        h_other = w @ u
        other_logits = classify(h_other, params["other/classifier_w"],
                                params["other/classifier_b"])
        pooled["other"] = h_other
        weights["other"] = w
        internals["other"] = info

    z = assemble_study_logits(organ_logits, other_logits, schema)
    return StudyForwardResult(logits=z, probs=expit(z), pooled=pooled,
                              weights=weights, fallback=fallback, internals=internals)


def backward_study(features: np.ndarray, params: dict[str, np.ndarray], mode: str,
                   schema: LabelSchema, result: StudyForwardResult,
                   dlogits: np.ndarray, *, scalar_set=(),
                   osf_head: str = "affine") -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Adjoint of forward_study.

    Returns gradients for every head parameter (priors and scorer biases
    get exact zeros; they cancel out of the max-subtracted softmax) and
    the gradient with respect to the feature rows, for encoders trained
    end to end.
    """
    u = np.asarray(features, dtype=np.float64)
    n, d = u.shape
    grads = {name: np.zeros_like(val) for name, val in params.items()
             if not name.startswith("encoder/")}
    du = np.zeros_like(u)

    def attn_head(prefix: str, info: AttnInternals | None, dh: np.ndarray) -> None:
        if info is None:
            du_add = dh / n
            du[:] += du_add
            return
        rows = u[info.sup]
        dw = rows @ dh
        dscores, dlog_tau = _attn_backward(info, dw)
        grads[f"{prefix}/log_tau"] += dlog_tau
        grads[f"{prefix}/scorer_w"] += rows.T @ dscores
        du[info.sup] += np.outer(info.w, dh) + np.outer(dscores, params[f"{prefix}/scorer_w"])

    if mode in ("gap", "global"):
        h = result.pooled["global"]
        grads["global/classifier_w"] += np.outer(dlogits, h)
        grads["global/classifier_b"] += dlogits
        dh = params["global/classifier_w"].T @ dlogits
        if mode == "gap":
            du += dh / n
        else:
            attn_head("global", result.internals["global"], dh)
        return grads, du

    scalars = canonical_scalar_set(scalar_set) if mode == "masked_osf" else ()
    k = len(scalars)
    for organ in schema.organs:
        idx = schema.label_indices_for(organ)
        dz = dlogits[idx]
        info: OrganInternals = result.internals[organ]
        if mode == "masked_osf" and osf_head == "mlp":
            hid = np.maximum(info.hidden_pre, 0.0)
            grads[f"organ/{organ}/mlp_w2"] += np.outer(dz, hid)
            grads[f"organ/{organ}/mlp_b2"] += dz
            dhid = params[f"organ/{organ}/mlp_w2"].T @ dz
            dpre = dhid * (info.hidden_pre > 0)
            grads[f"organ/{organ}/mlp_w1"] += np.outer(dpre, info.hhat)
            grads[f"organ/{organ}/mlp_b1"] += dpre
            dhhat = params[f"organ/{organ}/mlp_w1"].T @ dpre
        else:
            grads[f"organ/{organ}/classifier_w"] += np.outer(dz, info.hhat)
            grads[f"organ/{organ}/classifier_b"] += dz
            dhhat = params[f"organ/{organ}/classifier_w"].T @ dz
        if mode == "masked_osf" and k > 0:
            dh_gated = dhhat[:d]
            g, border = info.gate, info.border
            dh = (1.0 - g * border) * dh_gated
            grads[f"organ/{organ}/gate"] += -border * g * (1.0 - g) * float(
                np.dot(dh_gated, info.h))
        else:
            dh = dhhat
        attn_head(f"organ/{organ}", info.attn, dh)

    if schema.other_labels:
        idx = schema.label_indices_for("other")
        dz = dlogits[idx]
        h_other = result.pooled["other"]
        grads["other/classifier_w"] += np.outer(dz, h_other)
        grads["other/classifier_b"] += dz
        dh = params["other/classifier_w"].T @ dz
        attn_head("other", result.internals["other"], dh)
    return grads, du


# ---------------------------------------------------------------------------
# Checkpoint format: named f64 tensors plus schema hash and mode tag.
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"OCTC"


def _write_str(f, text: str) -> None:
    raw = text.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read_str(f) -> str:
    (length,) = struct.unpack("<I", f.read(4))
    return f.read(length).decode("utf-8")


def save_checkpoint(path, params: dict[str, np.ndarray], mode: str,
                    schema_hash: str, meta: dict | None = None) -> None:
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", 1))
        _write_str(f, mode)
        _write_str(f, schema_hash)
        _write_str(f, json.dumps(meta or {}, sort_keys=True))
        f.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            arr = np.asarray(value, dtype="<f8")
            _write_str(f, name)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path, expected_schema_hash: str | None = None):
    """Read (params, mode, schema_hash, meta); reject a foreign schema."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CKPT_MAGIC:
            raise DataError(f"{path}: bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != 1:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        mode = _read_str(f)
        schema_hash = _read_str(f)
        meta = json.loads(_read_str(f))
        if expected_schema_hash is not None and schema_hash != expected_schema_hash:
            raise SchemaError(
                f"{path}: checkpoint was trained against schema {schema_hash[:12]}..., "
                f"refusing to load against {expected_schema_hash[:12]}...")
        (count,) = struct.unpack("<I", f.read(4))
        params = {}
        for _ in range(count):
            name = _read_str(f)
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            size = int(np.prod(shape)) if shape else 1
            raw = f.read(8 * size)
            if len(raw) != 8 * size:
                raise DataError(f"{path}: truncated tensor {name!r}")
            params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return params, mode, schema_hash, meta

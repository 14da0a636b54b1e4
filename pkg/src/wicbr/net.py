"""Two-branch recognition network with hand-written forward/backward.

Branches process the phase image and the Doppler image independently:
spatial self-attention refines each input, a small strided CNN (conv,
group-norm, relu per stage) reduces it to a 7x7 feature map, and the
concatenated map is split by a saliency gate into strong/weak parts that are
cross-fused before the linear head.

The saliency gate thresholds a sigmoid, so its masks are binary; backward
treats them as constants (no gradient flows through the gate path). The
finite-difference route in grad checks freezes the same masks via the
fixed_gate argument, keeping both routes consistent.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T

NEUTRAL_VALUE = 0.5  # ablation stand-in image: constant mid-gray

FUSE_MODES = ("cross", "same", "channel_attention")


class CheckpointFormatError(Exception):
    """Raised when an on-disk checkpoint fails structural validation."""


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters; defaults are the desk-scale setup."""

    n_classes: int = 6
    c_b: int = 32
    input_hw: int = 224
    gn_groups: int = 16
    gate_threshold: float = 0.5
    fuse_mode: str = "cross"
    neutral_dfs: bool = False
    neutral_phase: bool = False
    gn_eps: float = 1e-5
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.c_b < 1:
            raise ValueError("c_b must be positive")
        if self.fuse_mode not in FUSE_MODES:
            raise ValueError(f"fuse_mode must be one of {FUSE_MODES}, got {self.fuse_mode!r}")
        if (2 * self.c_b) % self.gn_groups != 0:
            raise ValueError(f"gn_groups ({self.gn_groups}) must divide 2*c_b ({2 * self.c_b})")
        if not 0.0 < self.gate_threshold < 1.0:
            raise ValueError("gate_threshold must lie in (0, 1)")
        hw = self.input_hw
        stages = 0
        while hw > 7 and hw % 2 == 0:
            hw //= 2
            stages += 1
        if hw != 7 or stages < 1:
            raise ValueError(f"input_hw must be 7 * 2^k for k >= 1, got {self.input_hw}")
        bad = [c for c in self.stage_channels if c % self.gn_groups != 0]
        if bad:
            raise ValueError(f"gn_groups ({self.gn_groups}) must divide every stage width, violates {bad}")

    @property
    def n_stages(self) -> int:
        return int(round(np.log2(self.input_hw / 7)))

    @property
    def stage_channels(self) -> tuple[int, ...]:
        plan = (16, 32, 64, self.c_b, self.c_b)
        return plan[5 - self.n_stages :]


def toy_config(n_classes: int = 2) -> NetConfig:
    """Smallest config that exercises every code path; used by grad checks."""
    return NetConfig(n_classes=n_classes, c_b=4, input_hw=28, gn_groups=4)


@dataclass
class Model:
    """Architecture config plus a flat name->array parameter store.

    Names ending in _rm/_rv are running-statistic buffers: saved and loaded
    with the model but never optimized or gradient-checked.
    """

    config: NetConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def trainable_names(self) -> list[str]:
        return [k for k in sorted(self.params) if not _is_buffer(k)]


def _is_buffer(name: str) -> bool:
    return name.endswith("_rm") or name.endswith("_rv")


def init_model(cfg: NetConfig, seed: int = 0) -> Model:
    """He-style init for convs, identity norms, small head."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    for branch in ("p", "d"):
        pre = f"attn_{branch}"
        p[f"{pre}/conv1_w"] = rng.normal(0.0, np.sqrt(2.0 / (3 * 49)), size=(3, 3, 7, 7))
        p[f"{pre}/conv2_w"] = rng.normal(0.0, np.sqrt(2.0 / (3 * 49)), size=(1, 3, 7, 7))
        p[f"{pre}/bn_gamma"] = np.ones(1)
        p[f"{pre}/bn_beta"] = np.zeros(1)
        p[f"{pre}/bn_rm"] = np.zeros(1)
        p[f"{pre}/bn_rv"] = np.ones(1)
    for branch in ("p", "d"):
        pre = f"backbone_{branch}"
        c_in = 3
        for i, c_out in enumerate(cfg.stage_channels):
            p[f"{pre}/s{i}_w"] = rng.normal(0.0, np.sqrt(2.0 / (c_in * 9)), size=(c_out, c_in, 3, 3))
            p[f"{pre}/s{i}_b"] = np.zeros(c_out)
            p[f"{pre}/s{i}_gamma"] = np.ones(c_out)
            p[f"{pre}/s{i}_z"] = np.zeros(c_out)
            c_in = c_out
    p["saliency/gamma"] = np.ones(2 * cfg.c_b)
    p["saliency/z"] = np.zeros(2 * cfg.c_b)
    p["head/w"] = rng.normal(0.0, 0.01, size=(cfg.n_classes, 2 * cfg.c_b))
    p["head/b"] = np.zeros(cfg.n_classes)
    return Model(config=cfg, params=p)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (3, H, W) or (N, 3, H, W), got {x.shape}")


# ---------------------------------------------------------------------------
# building blocks


def spatial_attention(model: Model, branch: str, x: np.ndarray) -> np.ndarray:
    """Attention map in (0, 1), shape (N, 1, H, W); zero weights give 0.5."""
    xb, squeeze = _as_batch(np.asarray(x, dtype=np.float64))
    a = _attention_forward(model, branch, xb)[0]
    return a[0] if squeeze else a


def _attention_forward(model: Model, branch: str, x: np.ndarray):
    p = model.params
    pre = f"attn_{branch}"
    c1 = T.conv2d(x, p[f"{pre}/conv1_w"], stride=1, pad=3)
    c2 = T.conv2d(c1, p[f"{pre}/conv2_w"], stride=1, pad=3)
    bn = T.batch_norm(
        c2, p[f"{pre}/bn_gamma"], p[f"{pre}/bn_beta"], p[f"{pre}/bn_rm"], p[f"{pre}/bn_rv"], eps=model.config.bn_eps
    )
    a = T.sigmoid(bn)
    return a, {"x": x, "c1": c1, "c2": c2, "a": a}


def _attention_backward(model: Model, branch: str, cache: dict, da: np.ndarray, grads: dict) -> None:
    p = model.params
    pre = f"attn_{branch}"
    dbn = T.sigmoid_backward(da, cache["a"])
    dc2, dgamma, dbeta = T.batch_norm_backward(
        dbn, cache["c2"], p[f"{pre}/bn_gamma"], p[f"{pre}/bn_rm"], p[f"{pre}/bn_rv"], eps=model.config.bn_eps
    )
    dc1, dw2 = T.conv2d_backward(dc2, cache["c1"], p[f"{pre}/conv2_w"], stride=1, pad=3)
    _, dw1 = T.conv2d_backward(dc1, cache["x"], p[f"{pre}/conv1_w"], stride=1, pad=3, need_dx=False)
    grads[f"{pre}/conv1_w"] = dw1
    grads[f"{pre}/conv2_w"] = dw2
    grads[f"{pre}/bn_gamma"] = dgamma
    grads[f"{pre}/bn_beta"] = dbeta


def refine(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Attention-weighted residual: x * a + x (a broadcasts over channels)."""
    return x * a + x


def _backbone_forward(model: Model, branch: str, x: np.ndarray):
    p = model.params
    pre = f"backbone_{branch}"
    g, eps = model.config.gn_groups, model.config.gn_eps
    inputs, convs, normed = [], [], []
    h = x
    for i in range(model.config.n_stages):
        inputs.append(h)
        z = T.conv_bias(T.conv2d(h, p[f"{pre}/s{i}_w"], stride=2, pad=1), p[f"{pre}/s{i}_b"])
        zn = T.group_norm(z, g, p[f"{pre}/s{i}_gamma"], p[f"{pre}/s{i}_z"], eps=eps)
        convs.append(z)
        normed.append(zn)
        h = T.relu(zn)
    return h, {"inputs": inputs, "convs": convs, "normed": normed}


def _backbone_backward(model: Model, branch: str, cache: dict, dh: np.ndarray, grads: dict) -> np.ndarray:
    p = model.params
    pre = f"backbone_{branch}"
    g, eps = model.config.gn_groups, model.config.gn_eps
    for i in reversed(range(model.config.n_stages)):
        dzn = T.relu_backward(dh, cache["normed"][i])
        dz, dgamma, dzshift = T.group_norm_backward(
            dzn, cache["convs"][i], g, p[f"{pre}/s{i}_gamma"], p[f"{pre}/s{i}_z"], eps=eps
        )
        grads[f"{pre}/s{i}_gamma"] = dgamma
        grads[f"{pre}/s{i}_z"] = dzshift
        grads[f"{pre}/s{i}_b"] = T.conv_bias_backward(dz)
        dh, dw = T.conv2d_backward(dz, cache["inputs"][i], p[f"{pre}/s{i}_w"], stride=2, pad=1)
        grads[f"{pre}/s{i}_w"] = dw
    return dh


def extract_concat(model: Model, x_p: np.ndarray, x_d: np.ndarray) -> np.ndarray:
    """Both branches through attention + backbone, concatenated to (N, 2*c_b, 7, 7)."""
    x_p, squeeze = _as_batch(np.asarray(x_p, dtype=np.float64))
    x_d, _ = _as_batch(np.asarray(x_d, dtype=np.float64))
    out = _extract_forward(model, x_p, x_d)[0]
    return out[0] if squeeze else out


def _extract_forward(model: Model, x_p: np.ndarray, x_d: np.ndarray):
    cache: dict = {}
    feats = {}
    for branch, x in (("p", x_p), ("d", x_d)):
        a, att_cache = _attention_forward(model, branch, x)
        xr = refine(x, a)
        f, bb_cache = _backbone_forward(model, branch, xr)
        cache[branch] = {"att": att_cache, "bb": bb_cache, "xr": xr}
        feats[branch] = f
    x_pd = T.concat_channels(feats["p"], feats["d"])
    cache["x_pd"] = x_pd
    return x_pd, cache


def saliency_weights(gamma: np.ndarray) -> np.ndarray:
    """Normalized channel weights w = gamma / sum(gamma); rejects sum 0."""
    total = float(gamma.sum())
    if abs(total) < 1e-12:
        raise ValueError("saliency gamma sums to zero; weights undefined")
    return gamma / total


def saliency_split(model: Model, x_pd: np.ndarray):
    """Gate the concatenated features into strong/weak parts.

    Returns (g1, g2, x_strong, x_weak): binary masks and the masked features.
    g1 marks elements whose weighted, group-standardized response clears the
    threshold; masks are exactly complementary.
    """
    x_pd, squeeze = _as_batch(np.asarray(x_pd, dtype=np.float64))
    cfg = model.config
    xhat = T.group_norm(x_pd, cfg.gn_groups, model.params["saliency/gamma"], model.params["saliency/z"], eps=cfg.gn_eps)
    w = saliency_weights(model.params["saliency/gamma"])
    s = T.sigmoid(w[None, :, None, None] * xhat)
    g1 = (s > cfg.gate_threshold).astype(np.float64)
    g2 = 1.0 - g1
    xs = g1 * x_pd
    xw = g2 * x_pd
    if squeeze:
        return g1[0], g2[0], xs[0], xw[0]
    return g1, g2, xs, xw


def fuse(x_strong: np.ndarray, x_weak: np.ndarray, c_b: int, mode: str = "cross") -> np.ndarray:
    """Recombine gated halves across branches.

    cross: strong-D + weak-P and weak-D + strong-P (the default pairing);
    same: strong-P + strong-D and weak-P + weak-D.
    Either way the two fused maps sum to the branch-sum of the input, which
    is the conservation property tests rely on.
    """
    xs, squeeze = _as_batch(np.asarray(x_strong, dtype=np.float64))
    xw, _ = _as_batch(np.asarray(x_weak, dtype=np.float64))
    if mode not in ("cross", "same"):
        raise ValueError(f"fuse mode {mode!r} is not pairwise (use cross or same)")
    xs_p, xs_d = T.split_channels(xs, c_b)
    xw_p, xw_d = T.split_channels(xw, c_b)
    if mode == "cross":
        y1 = xs_d + xw_p
        y2 = xw_d + xs_p
    else:
        y1 = xs_p + xs_d
        y2 = xw_p + xw_d
    out = T.concat_channels(y1, y2)
    return out[0] if squeeze else out


def classify(model: Model, x_out: np.ndarray):
    """Pool the fused map and apply the linear head: (embedding, logits)."""
    x_out, squeeze = _as_batch(np.asarray(x_out, dtype=np.float64))
    emb = T.global_avg_pool(x_out)
    logits = T.linear(emb, model.params["head/w"], model.params["head/b"])
    if squeeze:
        return emb[0], logits[0]
    return emb, logits


# ---------------------------------------------------------------------------
# full forward / backward


def forward(model: Model, x_p: np.ndarray, x_d: np.ndarray, fixed_gate=None):
    """Full forward pass: returns (embedding, logits, cache).

    cache feeds backward() and carries the gate masks; pass cache["gate"] of
    a previous call as fixed_gate to freeze the gate (finite-difference
    gradient checks need the masks constant across evaluations).
    """
    cfg = model.config
    x_p, squeeze = _as_batch(np.asarray(x_p, dtype=np.float64))
    x_d, _ = _as_batch(np.asarray(x_d, dtype=np.float64))
    if x_p.shape != x_d.shape:
        raise ValueError(f"branch inputs disagree: {x_p.shape} vs {x_d.shape}")
    if x_p.shape[1] != 3 or x_p.shape[2] != cfg.input_hw or x_p.shape[3] != cfg.input_hw:
        raise ValueError(f"expected (N, 3, {cfg.input_hw}, {cfg.input_hw}) inputs, got {x_p.shape}")
    if cfg.neutral_phase:
        x_p = np.full_like(x_p, NEUTRAL_VALUE)
    if cfg.neutral_dfs:
        x_d = np.full_like(x_d, NEUTRAL_VALUE)

    x_pd, cache = _extract_forward(model, x_p, x_d)

    if cfg.fuse_mode == "channel_attention":
        if fixed_gate is None:
            xhat = T.group_norm(x_pd, cfg.gn_groups, model.params["saliency/gamma"], model.params["saliency/z"], eps=cfg.gn_eps)
            w = saliency_weights(model.params["saliency/gamma"])
            m = T.sigmoid(T.global_avg_pool(w[None, :, None, None] * xhat))  # (N, 2*c_b)
            gate = {"m": m}
        else:
            gate = fixed_gate
        x_out = x_pd * gate["m"][:, :, None, None]
    else:
        if fixed_gate is None:
            g1, g2, xs, xw = saliency_split(model, x_pd)
            gate = {"g1": g1, "g2": g2}
        else:
            gate = fixed_gate
            g1, g2 = gate["g1"], gate["g2"]
            xs, xw = g1 * x_pd, g2 * x_pd
        x_out = fuse(xs, xw, cfg.c_b, mode=cfg.fuse_mode)

    emb = T.global_avg_pool(x_out)
    logits = T.linear(emb, model.params["head/w"], model.params["head/b"])
    cache.update({"gate": gate, "x_out": x_out, "emb": emb})
    if squeeze:
        return emb[0], logits[0], cache
    return emb, logits, cache


def backward(model: Model, cache: dict, dlogits: np.ndarray, demb_extra: np.ndarray | None = None) -> dict:
    """Gradients of a scalar objective w.r.t. every trainable parameter.

    dlogits is the objective gradient at the logits; demb_extra (optional)
    is an additional gradient injected directly at the embedding (the proxy
    contrastive term attaches there). Gate masks from the cache are treated
    as constants, so the saliency affine parameters get zero gradient.
    """
    cfg = model.config
    grads: dict[str, np.ndarray] = {}
    emb = cache["emb"]
    demb, dw_head, db_head = T.linear_backward(np.atleast_2d(dlogits), emb, model.params["head/w"])
    grads["head/w"] = dw_head
    grads["head/b"] = db_head
    if demb_extra is not None:
        demb = demb + np.atleast_2d(demb_extra)
    hw = cache["x_out"].shape[2]
    dx_out = T.global_avg_pool_backward(demb, hw, cache["x_out"].shape[3])

    x_pd = cache["x_pd"]
    gate = cache["gate"]
    if cfg.fuse_mode == "channel_attention":
        dx_pd = dx_out * gate["m"][:, :, None, None]
    else:
        dy1, dy2 = T.split_channels(dx_out, cfg.c_b)
        if cfg.fuse_mode == "cross":
            dxs = T.concat_channels(dy2, dy1)  # strong: P half from y2, D half from y1
            dxw = T.concat_channels(dy1, dy2)
        else:
            dxs = T.concat_channels(dy1, dy1)
            dxw = T.concat_channels(dy2, dy2)
        dx_pd = gate["g1"] * dxs + gate["g2"] * dxw
    grads["saliency/gamma"] = np.zeros_like(model.params["saliency/gamma"])
    grads["saliency/z"] = np.zeros_like(model.params["saliency/z"])

    df_p, df_d = T.split_channels(dx_pd, cfg.c_b)
    for branch, df in (("p", df_p), ("d", df_d)):
        bc = cache[branch]
        dxr = _backbone_backward(model, branch, bc["bb"], df, grads)
        da = (dxr * bc["att"]["x"]).sum(axis=1, keepdims=True)  # refine is x*a + x with a broadcast
        _attention_backward(model, branch, bc["att"], da, grads)
    return grads


# ---------------------------------------------------------------------------
# checkpoint format: magic, u32 manifest length, JSON manifest (config +
# tensor table sorted by name), float64 little-endian payloads in table order

_CKPT_MAGIC = b"WCKPT1"


def _config_to_dict(cfg: NetConfig) -> dict:
    return {
        "n_classes": cfg.n_classes,
        "c_b": cfg.c_b,
        "input_hw": cfg.input_hw,
        "gn_groups": cfg.gn_groups,
        "gate_threshold": cfg.gate_threshold,
        "fuse_mode": cfg.fuse_mode,
        "neutral_dfs": cfg.neutral_dfs,
        "neutral_phase": cfg.neutral_phase,
        "gn_eps": cfg.gn_eps,
        "bn_eps": cfg.bn_eps,
    }


def config_from_dict(d: dict) -> NetConfig:
    return NetConfig(
        n_classes=int(d["n_classes"]),
        c_b=int(d["c_b"]),
        input_hw=int(d["input_hw"]),
        gn_groups=int(d["gn_groups"]),
        gate_threshold=float(d["gate_threshold"]),
        fuse_mode=str(d["fuse_mode"]),
        neutral_dfs=bool(d.get("neutral_dfs", False)),
        neutral_phase=bool(d.get("neutral_phase", False)),
        gn_eps=float(d.get("gn_eps", 1e-5)),
        bn_eps=float(d.get("bn_eps", 1e-5)),
    )


def save_checkpoint(path, model: Model) -> None:
    names = sorted(model.params)
    manifest = {
        "format_version": 1,
        "config": _config_to_dict(model.config),
        "tensors": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    data = Path(path).read_bytes()
    if len(data) < len(_CKPT_MAGIC) + 4 or data[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file")
    (blob_len,) = struct.unpack_from("<I", data, len(_CKPT_MAGIC))
    start = len(_CKPT_MAGIC) + 4
    if len(data) < start + blob_len:
        raise CheckpointFormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[start : start + blob_len].decode())
        cfg = config_from_dict(manifest["config"])
        table = manifest["tensors"]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointFormatError(f"{path}: bad manifest: {e}") from e
    params = {}
    offset = start + blob_len
    for entry in table:
        shape = tuple(int(v) for v in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointFormatError(f"{path}: payload shorter than manifest claims")
        params[entry["name"]] = (
            np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        )
        offset = end
    if offset != len(data):
        raise CheckpointFormatError(f"{path}: trailing bytes after payload")
    expected = set(init_model(cfg, seed=0).params)
    if set(params) != expected:
        missing = sorted(expected - set(params))
        extra = sorted(set(params) - expected)
        raise CheckpointFormatError(f"{path}: tensor names mismatch (missing {missing}, extra {extra})")
    return Model(config=cfg, params=params)

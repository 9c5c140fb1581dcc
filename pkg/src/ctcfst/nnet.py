"""Deep bidirectional LSTM acoustic model with peepholes and exact BPTT.

All numerics are float64.  Forward passes accept a single utterance
[T x D] or a padded batch [B x T x D] with per-utterance lengths; padded
frames are masked so that batched gradients equal the sum of unpadded
per-utterance gradients exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from typing import Iterator, Sequence

import numpy as np
from scipy.special import expit

from .features import FeatureMatrix

MODEL_MAGIC = b"CTCFSTNN"
MODEL_VERSION = 1

# Serialization order of the per-direction parameter arrays.
PARAM_ORDER = ("w_ix", "w_fx", "w_cx", "w_ox",
               "w_ih", "w_fh", "w_ch", "w_oh",
               "w_ic", "w_fc", "w_oc",
               "b_i", "b_f", "b_c", "b_o")


@dataclass
class LstmLayerParams:
    """One direction of one LSTM layer.

    Input weights are [cells x input_dim], recurrent weights
    [cells x cells]; peephole weights are vectors [cells] (the gate-cell
    links are diagonal by construction).
    """

    w_ix: np.ndarray
    w_fx: np.ndarray
    w_cx: np.ndarray
    w_ox: np.ndarray
    w_ih: np.ndarray
    w_fh: np.ndarray
    w_ch: np.ndarray
    w_oh: np.ndarray
    w_ic: np.ndarray
    w_fc: np.ndarray
    w_oc: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    @property
    def cells(self) -> int:
        return self.w_ix.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_ix.shape[1]


@dataclass
class BlstmLayer:
    forward: LstmLayerParams
    backward: LstmLayerParams


@dataclass
class BlstmStack:
    """Stacked bidirectional layers plus the affine softmax output layer."""

    layers: list[BlstmLayer]
    w_out: np.ndarray
    b_out: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.layers[0].forward.input_dim

    @property
    def cells(self) -> list[int]:
        return [layer.forward.cells for layer in self.layers]

    @property
    def num_outputs(self) -> int:
        return self.w_out.shape[0]


@dataclass
class PosteriorMatrix:
    """Per-frame label posteriors [T x (K+1)], rows summing to one."""

    utterance_id: str
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ValueError(f"utterance {self.utterance_id}: posteriors must be 2-D")
        sums = self.probs.sum(axis=1)
        if not np.all(np.abs(sums - 1.0) <= 1e-6):
            raise ValueError(
                f"utterance {self.utterance_id}: posterior rows do not sum to 1")


def init_params(input_dim: int, cells: Sequence[int], num_outputs: int,
                seed: int) -> BlstmStack:
    """Draw every parameter uniformly from [-0.1, 0.1], deterministically."""
    if input_dim < 1 or num_outputs < 2:
        raise ValueError("input_dim must be >= 1 and num_outputs >= 2")
    if not cells or any(c < 1 for c in cells):
        raise ValueError("need at least one layer with at least one cell")
    rng = np.random.default_rng(seed)

    def uniform(*shape: int) -> np.ndarray:
        return rng.uniform(-0.1, 0.1, size=shape)

    def direction(in_dim: int, c: int) -> LstmLayerParams:
        return LstmLayerParams(
            w_ix=uniform(c, in_dim), w_fx=uniform(c, in_dim),
            w_cx=uniform(c, in_dim), w_ox=uniform(c, in_dim),
            w_ih=uniform(c, c), w_fh=uniform(c, c),
            w_ch=uniform(c, c), w_oh=uniform(c, c),
            w_ic=uniform(c), w_fc=uniform(c), w_oc=uniform(c),
            b_i=uniform(c), b_f=uniform(c), b_c=uniform(c), b_o=uniform(c))

    layers = []
    in_dim = input_dim
    for c in cells:
        layers.append(BlstmLayer(direction(in_dim, c), direction(in_dim, c)))
        in_dim = 2 * c
    return BlstmStack(layers, w_out=uniform(num_outputs, in_dim),
                      b_out=uniform(num_outputs))


def zeros_like_stack(stack: BlstmStack) -> BlstmStack:
    layers = []
    for layer in stack.layers:
        dirs = []
        for params in (layer.forward, layer.backward):
            dirs.append(LstmLayerParams(**{
                f.name: np.zeros_like(getattr(params, f.name))
                for f in fields(LstmLayerParams)}))
        layers.append(BlstmLayer(*dirs))
    return BlstmStack(layers, np.zeros_like(stack.w_out), np.zeros_like(stack.b_out))


def copy_stack(stack: BlstmStack) -> BlstmStack:
    layers = []
    for layer in stack.layers:
        dirs = [LstmLayerParams(**{
            f.name: getattr(params, f.name).copy()
            for f in fields(LstmLayerParams)})
            for params in (layer.forward, layer.backward)]
        layers.append(BlstmLayer(*dirs))
    return BlstmStack(layers, stack.w_out.copy(), stack.b_out.copy())


def iter_arrays(stack: BlstmStack) -> Iterator[tuple[str, np.ndarray]]:
    """Yield (name, array) pairs in the canonical serialization order."""
    for li, layer in enumerate(stack.layers):
        for tag, params in (("forward", layer.forward), ("backward", layer.backward)):
            for name in PARAM_ORDER:
                yield f"layer{li}/{tag}/{name}", getattr(params, name)
    yield "output/w", stack.w_out
    yield "output/b", stack.b_out


# ---------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------

def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None, :, :], True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"expected [T x D] or [B x T x D] input, got ndim {x.ndim}")


def _make_mask(batch: int, steps: int, lengths: Sequence[int] | None) -> np.ndarray:
    if lengths is None:
        return np.ones((batch, steps, 1))
    lengths = np.asarray(lengths)
    if lengths.shape != (batch,):
        raise ValueError("lengths must have one entry per batch row")
    return (np.arange(steps)[None, :] < lengths[:, None]).astype(np.float64)[:, :, None]


def lstm_forward(params: LstmLayerParams, inputs: np.ndarray,
                 direction: str = "forward",
                 lengths: Sequence[int] | None = None
                 ) -> tuple[np.ndarray, dict]:
    """Run one LSTM direction from zero initial state; returns (h, cache).

    The backward direction is evaluated as the forward recursion on the
    time-reversed sequence.  Padded frames (t >= length) keep zero cell
    and hidden state, so a padded batch produces exactly the hidden
    outputs of the per-utterance runs.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    x, squeeze = _as_batch(inputs)
    batch, steps, in_dim = x.shape
    if in_dim != params.input_dim:
        raise ValueError(f"input dim {in_dim} does not match params ({params.input_dim})")
    mask = _make_mask(batch, steps, lengths)
    if direction == "backward":
        x = x[:, ::-1].copy()
        mask = mask[:, ::-1].copy()

    c = params.cells
    gi = np.empty((batch, steps, c))
    gf = np.empty((batch, steps, c))
    go = np.empty((batch, steps, c))
    gg = np.empty((batch, steps, c))
    cs = np.empty((batch, steps, c))
    tc = np.empty((batch, steps, c))
    hs = np.empty((batch, steps, c))
    h_prev = np.zeros((batch, c))
    c_prev = np.zeros((batch, c))
    for t in range(steps):
        x_t = x[:, t]
        m_t = mask[:, t]
        i_t = expit(x_t @ params.w_ix.T + h_prev @ params.w_ih.T
                    + c_prev * params.w_ic + params.b_i)
        f_t = expit(x_t @ params.w_fx.T + h_prev @ params.w_fh.T
                    + c_prev * params.w_fc + params.b_f)
        g_t = np.tanh(x_t @ params.w_cx.T + h_prev @ params.w_ch.T + params.b_c)
        c_t = m_t * (f_t * c_prev + i_t * g_t)
        o_t = expit(x_t @ params.w_ox.T + h_prev @ params.w_oh.T
                    + c_t * params.w_oc + params.b_o)
        tc_t = np.tanh(c_t)
        h_t = m_t * (o_t * tc_t)
        gi[:, t], gf[:, t], go[:, t], gg[:, t] = i_t, f_t, o_t, g_t
        cs[:, t], tc[:, t], hs[:, t] = c_t, tc_t, h_t
        h_prev, c_prev = h_t, c_t
    if not np.all(np.isfinite(hs)):
        bad = np.argwhere(~np.isfinite(hs).all(axis=2))
        b, t = bad[0]
        if direction == "backward":
            t = steps - 1 - t
        raise FloatingPointError(
            f"non-finite LSTM activation at frame {t} (batch row {b}, {direction})")
    cache = {"x": x, "mask": mask, "i": gi, "f": gf, "o": go, "g": gg,
             "c": cs, "tanh_c": tc, "h": hs, "direction": direction}
    h_out = hs[:, ::-1] if direction == "backward" else hs
    return (h_out[0] if squeeze else h_out.copy()), cache


def lstm_backward(params: LstmLayerParams, cache: dict, dh: np.ndarray
                  ) -> tuple[LstmLayerParams, np.ndarray]:
    """Exact BPTT through one direction; returns (param grads, input grads)."""
    dh3, squeeze = _as_batch(dh)
    if cache["direction"] == "backward":
        dh3 = dh3[:, ::-1].copy()
    x, mask = cache["x"], cache["mask"]
    gi, gf, go, gg = cache["i"], cache["f"], cache["o"], cache["g"]
    cs, tc = cache["c"], cache["tanh_c"]
    hs = cache["h"]
    batch, steps, _ = x.shape
    c = params.cells

    grads = {name: np.zeros_like(getattr(params, name)) for name in PARAM_ORDER}
    dx = np.zeros_like(x)
    dh_rec = np.zeros((batch, c))
    dc_carry = np.zeros((batch, c))
    zeros = np.zeros((batch, c))
    for t in range(steps - 1, -1, -1):
        h_prev = hs[:, t - 1] if t > 0 else zeros
        c_prev = cs[:, t - 1] if t > 0 else zeros
        m_t = mask[:, t]
        i_t, f_t, o_t, g_t = gi[:, t], gf[:, t], go[:, t], gg[:, t]
        tc_t, c_t = tc[:, t], cs[:, t]

        dh_t = m_t * (dh3[:, t] + dh_rec)
        dpre_o = (dh_t * tc_t) * o_t * (1.0 - o_t)
        dc = dh_t * o_t * (1.0 - tc_t ** 2) + dc_carry + dpre_o * params.w_oc
        dc_tilde = m_t * dc
        dpre_i = (dc_tilde * g_t) * i_t * (1.0 - i_t)
        dpre_f = (dc_tilde * c_prev) * f_t * (1.0 - f_t)
        dpre_g = (dc_tilde * i_t) * (1.0 - g_t ** 2)

        x_t = x[:, t]
        grads["w_ix"] += dpre_i.T @ x_t
        grads["w_fx"] += dpre_f.T @ x_t
        grads["w_cx"] += dpre_g.T @ x_t
        grads["w_ox"] += dpre_o.T @ x_t
        grads["w_ih"] += dpre_i.T @ h_prev
        grads["w_fh"] += dpre_f.T @ h_prev
        grads["w_ch"] += dpre_g.T @ h_prev
        grads["w_oh"] += dpre_o.T @ h_prev
        grads["w_ic"] += (dpre_i * c_prev).sum(axis=0)
        grads["w_fc"] += (dpre_f * c_prev).sum(axis=0)
        grads["w_oc"] += (dpre_o * c_t).sum(axis=0)
        grads["b_i"] += dpre_i.sum(axis=0)
        grads["b_f"] += dpre_f.sum(axis=0)
        grads["b_c"] += dpre_g.sum(axis=0)
        grads["b_o"] += dpre_o.sum(axis=0)

        dx[:, t] = (dpre_i @ params.w_ix + dpre_f @ params.w_fx
                    + dpre_g @ params.w_cx + dpre_o @ params.w_ox)
        dh_rec = (dpre_i @ params.w_ih + dpre_f @ params.w_fh
                  + dpre_g @ params.w_ch + dpre_o @ params.w_oh)
        dc_carry = dc_tilde * f_t + dpre_i * params.w_ic + dpre_f * params.w_fc
    if cache["direction"] == "backward":
        dx = dx[:, ::-1].copy()
    return LstmLayerParams(**grads), (dx[0] if squeeze else dx)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Map an error on softmax outputs to an error on the logits."""
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def blstm_forward(stack: BlstmStack, inputs: np.ndarray,
                  lengths: Sequence[int] | None = None
                  ) -> tuple[np.ndarray, dict]:
    """Posterior probabilities [.. x T x (K+1)] plus caches for BPTT."""
    x, squeeze = _as_batch(inputs)
    if x.shape[2] != stack.input_dim:
        raise ValueError(
            f"feature dim {x.shape[2]} does not match model input dim {stack.input_dim}")
    layer_caches = []
    cur = x
    for layer in stack.layers:
        h_f, cache_f = lstm_forward(layer.forward, cur, "forward", lengths)
        h_b, cache_b = lstm_forward(layer.backward, cur, "backward", lengths)
        layer_caches.append({"forward": cache_f, "backward": cache_b})
        cur = np.concatenate([h_f, h_b], axis=2)
    logits = cur @ stack.w_out.T + stack.b_out
    probs = softmax(logits)
    caches = {"layers": layer_caches, "concat": cur, "probs": probs,
              "mask": _make_mask(x.shape[0], x.shape[1], lengths),
              "squeeze": squeeze}
    return (probs[0] if squeeze else probs), caches


def blstm_backward(stack: BlstmStack, caches: dict, output_errors: np.ndarray
                   ) -> BlstmStack:
    """Gradients of the objective whose logit-space error is ``output_errors``.

    Errors on padded frames are masked out, matching the padding-exclusion
    contract of batched training.
    """
    err, squeeze = _as_batch(output_errors)
    if squeeze != caches["squeeze"] or err.shape != caches["probs"].shape:
        raise ValueError("output_errors shape does not match the cached forward pass")
    err = err * caches["mask"]
    grads = zeros_like_stack(stack)
    concat = caches["concat"]
    grads.w_out[:] = np.einsum("btk,btc->kc", err, concat)
    grads.b_out[:] = err.sum(axis=(0, 1))
    dh = err @ stack.w_out
    for li in range(len(stack.layers) - 1, -1, -1):
        layer = stack.layers[li]
        cache = caches["layers"][li]
        c = layer.forward.cells
        gf, dx_f = lstm_backward(layer.forward, cache["forward"], dh[:, :, :c])
        gb, dx_b = lstm_backward(layer.backward, cache["backward"], dh[:, :, c:])
        glayer = grads.layers[li]
        for name in PARAM_ORDER:
            getattr(glayer.forward, name)[:] = getattr(gf, name)
            getattr(glayer.backward, name)[:] = getattr(gb, name)
        dh = dx_f + dx_b
    return grads


def utterance_posteriors(stack: BlstmStack, feat: FeatureMatrix) -> PosteriorMatrix:
    probs, _ = blstm_forward(stack, feat.frames)
    return PosteriorMatrix(feat.utterance_id, probs)


# ---------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------

def save_model(stack: BlstmStack, path) -> None:
    """Binary layout: magic, version, sizes, then float64-LE arrays in
    the PARAM_ORDER sequence (per layer, forward then backward), then the
    output weight matrix and bias."""
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<IIII", MODEL_VERSION, len(stack.layers),
                             stack.input_dim, stack.num_outputs))
        for c in stack.cells:
            fh.write(struct.pack("<I", c))
        for _, arr in iter_arrays(stack):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> BlstmStack:
    with open(path, "rb") as fh:
        magic = fh.read(len(MODEL_MAGIC))
        if magic != MODEL_MAGIC:
            raise ValueError(f"{path}: not a model file (bad magic {magic!r})")
        version, num_layers, input_dim, num_outputs = struct.unpack("<IIII", fh.read(16))
        if version != MODEL_VERSION:
            raise ValueError(f"{path}: unsupported model version {version}")
        cells = [struct.unpack("<I", fh.read(4))[0] for _ in range(num_layers)]
        stack = init_params(input_dim, cells, num_outputs, seed=0)
        for _, arr in iter_arrays(stack):
            raw = fh.read(arr.size * 8)
            if len(raw) != arr.size * 8:
                raise ValueError(f"{path}: truncated model file")
            arr[:] = np.frombuffer(raw, dtype="<f8").reshape(arr.shape)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after model parameters")
    return stack

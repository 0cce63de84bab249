"""Desk-scale encoder/decoder with a mixed learnable + conditional query pool.

Layout of one forward pass (``P = H' * W'`` grid locations):

    image (C_in x H' x W') + fixed positional features
      -> encoder:      F = tanh(Z W_enc + b)                   P x d
      -> proposals:    objectness (P), proposal box logits (P x 4)
      -> queries:      learnable bank  ++  top-k encoder features
      -> decoder:      one cross-attention layer + tanh FFN    Q x d
      -> heads:        class embeds, boxes, mask embeds
      -> pixel feats:  F W_pix + b                             d_mask x H' x W'

Gradients are written out by hand (``backward``) and verified against
finite differences in the test suite. The objectness head only ranks
locations for the hard top-k, so it never receives gradient.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import DimMismatch, KTooLarge
from ..losses import DecoderOutputs, sigmoid
from ..matching import Provenance


@dataclass(frozen=True)
class ModelConfig:
    grid: tuple[int, int] = (16, 16)
    in_channels: int = 16
    pos_freqs: int = 2
    d_model: int = 32
    d_text: int = 64
    d_mask: int = 32
    n_learnable: int = 8
    n_conditional: int = 24
    init_scale: float = 0.02
    anchor_size: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if self.n_conditional > self.grid[0] * self.grid[1]:
            raise KTooLarge(f"{self.n_conditional} conditional queries exceed {self.grid[0] * self.grid[1]} grid cells")

    @property
    def num_queries(self) -> int:
        return self.n_learnable + self.n_conditional

    @property
    def pos_dim(self) -> int:
        return 2 + 4 * self.pos_freqs

    def provenance(self) -> Provenance:
        return Provenance.from_counts(self.n_learnable, self.n_conditional)

    def to_json(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**{**obj, "grid": tuple(obj.get("grid", (16, 16)))})


# toy-scale defaults above; the full-size pool is 100 learnable + 300 conditional
FULL_SCALE_QUERY_COUNTS = {"n_learnable": 100, "n_conditional": 300}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes, in the fixed order used everywhere."""
    d, cin = cfg.d_model, cfg.in_channels + cfg.pos_dim
    return {
        "enc_w": (cin, d),
        "enc_b": (d,),
        "obj_w": (d,),
        "obj_b": (1,),
        "prop_w": (d, 4),
        "prop_b": (4,),
        "learnable": (cfg.n_learnable, d),
        "attn_q": (d, d),
        "attn_k": (d, d),
        "attn_v": (d, d),
        "attn_o": (d, d),
        "ffn_w1": (d, d),
        "ffn_b1": (d,),
        "ffn_w2": (d, d),
        "cls_w": (d, cfg.d_text),
        "cls_b": (cfg.d_text,),
        "box_w": (d, 4),
        "box_b": (4,),
        "mask_w": (d, cfg.d_mask),
        "mask_b": (cfg.d_mask,),
        "pix_w": (d, cfg.d_mask),
        "pix_b": (cfg.d_mask,),
    }


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Seeded Gaussian weights (std ``init_scale``); biases start at zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_b") or name.endswith("_b1"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, cfg.init_scale, size=shape)
    return params


def zeros_like_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def positional_features(cfg: ModelConfig) -> np.ndarray:
    """P x pos_dim fixed features: cell centre plus sin/cos harmonics."""
    gh, gw = cfg.grid
    ys, xs = np.meshgrid((np.arange(gh) + 0.5) / gh, (np.arange(gw) + 0.5) / gw, indexing="ij")
    x, y = xs.ravel(), ys.ravel()
    feats = [x, y]
    for k in range(1, cfg.pos_freqs + 1):
        feats += [np.sin(2 * np.pi * k * x), np.cos(2 * np.pi * k * x), np.sin(2 * np.pi * k * y), np.cos(2 * np.pi * k * y)]
    return np.stack(feats, axis=1)


def anchor_logits(cfg: ModelConfig) -> np.ndarray:
    """P x 4 logits of a fixed-size box centred on every grid cell."""
    pos = positional_features(cfg)[:, :2]
    a = np.full((pos.shape[0], 2), cfg.anchor_size)
    boxes = np.concatenate([pos, a], axis=1)
    return np.log(boxes) - np.log1p(-boxes)


@dataclass
class FeatureMap:
    grid: np.ndarray  # d_model x H' x W'
    objectness: np.ndarray  # P
    proposal_boxes: np.ndarray  # P x 4, normalized cxcywh


def select_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` highest scores, ties to the lowest index, in rank order."""
    scores = np.asarray(scores, dtype=float).ravel()
    if k > scores.size:
        raise KTooLarge(f"cannot select {k} of {scores.size} locations")
    return np.argsort(-scores, kind="stable")[:k]


class ToyModel:
    """Stateless forward/backward around a parameter dict."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.pos = positional_features(cfg)
        self.anchor = anchor_logits(cfg)
        self.provenance = cfg.provenance()

    # -- encoder ---------------------------------------------------------------

    def _encode(self, image: np.ndarray, params):
        cfg = self.cfg
        gh, gw = cfg.grid
        if image.shape != (cfg.in_channels, gh, gw):
            raise DimMismatch(f"image must be {(cfg.in_channels, gh, gw)}, got {image.shape}")
        z = np.concatenate([image.reshape(cfg.in_channels, -1).T, self.pos], axis=1)
        feats = np.tanh(z @ params["enc_w"] + params["enc_b"])
        objectness = feats @ params["obj_w"] + params["obj_b"][0]
        prop_logits = feats @ params["prop_w"] + params["prop_b"] + self.anchor
        return z, feats, objectness, prop_logits

    def encode(self, image: np.ndarray, params) -> FeatureMap:
        _, feats, objectness, prop_logits = self._encode(image, params)
        gh, gw = self.cfg.grid
        return FeatureMap(feats.T.reshape(-1, gh, gw), objectness, sigmoid(prop_logits))

    def select_conditional(self, fm: FeatureMap, k: int | None = None):
        """Top-k proposals by objectness: ``(query content, proposal boxes, indices)``."""
        k = self.cfg.n_conditional if k is None else k
        idx = select_topk(fm.objectness, k)
        feats = fm.grid.reshape(fm.grid.shape[0], -1).T
        return feats[idx], fm.proposal_boxes[idx], idx

    # -- full pass ---------------------------------------------------------------

    def forward(self, image: np.ndarray, params, selected: np.ndarray | None = None):
        """Run encoder and decoder. Returns ``(DecoderOutputs, cache)``.

        ``selected`` pins the conditional-query locations (used by gradient
        checks so the hard top-k cannot flip under perturbation).
        """
        cfg = self.cfg
        d = cfg.d_model
        z, feats, objectness, prop_logits = self._encode(image, params)
        idx = select_topk(objectness, cfg.n_conditional) if selected is None else np.asarray(selected)
        queries = np.concatenate([params["learnable"], feats[idx]], axis=0)

        qp = queries @ params["attn_q"]
        keys = feats @ params["attn_k"]
        vals = feats @ params["attn_v"]
        scores = qp @ keys.T / math.sqrt(d)
        scores -= scores.max(axis=1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=1, keepdims=True)
        ctx = attn @ vals
        h1 = queries + ctx @ params["attn_o"]
        u = np.tanh(h1 @ params["ffn_w1"] + params["ffn_b1"])
        h = h1 + u @ params["ffn_w2"]

        class_embeds = h @ params["cls_w"] + params["cls_b"]
        ref = np.zeros((cfg.num_queries, 4))
        ref[cfg.n_learnable :] = prop_logits[idx]
        boxes = sigmoid(h @ params["box_w"] + params["box_b"] + ref)
        mask_embeds = h @ params["mask_w"] + params["mask_b"]
        pix = feats @ params["pix_w"] + params["pix_b"]
        gh, gw = cfg.grid
        out = DecoderOutputs(class_embeds, boxes, mask_embeds, pix.T.reshape(cfg.d_mask, gh, gw))
        cache = dict(
            z=z, feats=feats, idx=idx, queries=queries, qp=qp, keys=keys, vals=vals,
            attn=attn, ctx=ctx, h1=h1, u=u, h=h, boxes=boxes, objectness=objectness,
        )
        return out, cache

    def decode(self, fm: FeatureMap, params) -> DecoderOutputs:
        """Decoder-only pass over an already encoded feature map."""
        cfg = self.cfg
        d = cfg.d_model
        feats = fm.grid.reshape(d, -1).T
        idx = select_topk(fm.objectness, cfg.n_conditional)
        queries = np.concatenate([params["learnable"], feats[idx]], axis=0)
        scores = (queries @ params["attn_q"]) @ (feats @ params["attn_k"]).T / math.sqrt(d)
        scores -= scores.max(axis=1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=1, keepdims=True)
        h1 = queries + (attn @ (feats @ params["attn_v"])) @ params["attn_o"]
        h = h1 + np.tanh(h1 @ params["ffn_w1"] + params["ffn_b1"]) @ params["ffn_w2"]
        prop = fm.proposal_boxes[idx]
        ref = np.zeros((cfg.num_queries, 4))
        ref[cfg.n_learnable :] = np.log(prop) - np.log1p(-prop)
        boxes = sigmoid(h @ params["box_w"] + params["box_b"] + ref)
        pix = feats @ params["pix_w"] + params["pix_b"]
        gh, gw = cfg.grid
        return DecoderOutputs(
            h @ params["cls_w"] + params["cls_b"],
            boxes,
            h @ params["mask_w"] + params["mask_b"],
            pix.T.reshape(cfg.d_mask, gh, gw),
        )

    def backward(self, cache, params, g_class, g_boxes, g_mask_embeds, g_pixel_features) -> dict[str, np.ndarray]:
        """Parameter gradients given gradients on the decoder outputs."""
        cfg = self.cfg
        d = cfg.d_model
        n_l = cfg.n_learnable
        grads = zeros_like_params(params)
        feats, h, h1, u = cache["feats"], cache["h"], cache["h1"], cache["u"]
        idx, queries, attn = cache["idx"], cache["queries"], cache["attn"]

        g_pix = g_pixel_features.reshape(cfg.d_mask, -1).T
        grads["pix_w"] = feats.T @ g_pix
        grads["pix_b"] = g_pix.sum(0)
        g_feats = g_pix @ params["pix_w"].T

        boxes = cache["boxes"]
        g_box_logit = g_boxes * boxes * (1.0 - boxes)
        grads["box_w"] = h.T @ g_box_logit
        grads["box_b"] = g_box_logit.sum(0)
        g_h = g_box_logit @ params["box_w"].T
        g_prop = np.zeros((feats.shape[0], 4))
        np.add.at(g_prop, idx, g_box_logit[n_l:])

        grads["cls_w"] = h.T @ g_class
        grads["cls_b"] = g_class.sum(0)
        g_h += g_class @ params["cls_w"].T
        grads["mask_w"] = h.T @ g_mask_embeds
        grads["mask_b"] = g_mask_embeds.sum(0)
        g_h += g_mask_embeds @ params["mask_w"].T

        grads["ffn_w2"] = u.T @ g_h
        g_pre = (g_h @ params["ffn_w2"].T) * (1.0 - u**2)
        grads["ffn_w1"] = h1.T @ g_pre
        grads["ffn_b1"] = g_pre.sum(0)
        g_h1 = g_h + g_pre @ params["ffn_w1"].T

        ctx = cache["ctx"]
        grads["attn_o"] = ctx.T @ g_h1
        g_ctx = g_h1 @ params["attn_o"].T
        g_queries = g_h1.copy()
        g_attn = g_ctx @ cache["vals"].T
        g_vals = attn.T @ g_ctx
        g_scores = attn * (g_attn - (g_attn * attn).sum(axis=1, keepdims=True)) / math.sqrt(d)
        g_qp = g_scores @ cache["keys"]
        g_keys = g_scores.T @ cache["qp"]
        grads["attn_q"] = queries.T @ g_qp
        g_queries += g_qp @ params["attn_q"].T
        grads["attn_k"] = feats.T @ g_keys
        g_feats += g_keys @ params["attn_k"].T
        grads["attn_v"] = feats.T @ g_vals
        g_feats += g_vals @ params["attn_v"].T

        grads["learnable"] = g_queries[:n_l]
        np.add.at(g_feats, idx, g_queries[n_l:])

        grads["prop_w"] = feats.T @ g_prop
        grads["prop_b"] = g_prop.sum(0)
        g_feats += g_prop @ params["prop_w"].T

        g_enc = g_feats * (1.0 - feats**2)
        grads["enc_w"] = cache["z"].T @ g_enc
        grads["enc_b"] = g_enc.sum(0)
        return grads

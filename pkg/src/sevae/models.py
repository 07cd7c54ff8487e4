"""Declarative model specs: names, default hyperparameters, construction.

Seven model names cover the experiment grid:

- disc: discriminative LSTM classifier
- gen: class-conditioned language model
- lat: latent-class language model (exact marginalization)
- ctx: hierarchical context-aware tagger
- vae-bow / vae-lstm / vae-xfmr: variational model with the three decoders

A ModelSpec is (name, options) and hashes to a stable hex digest that
checkpoints embed, so loading a checkpoint against a different
architecture fails loudly instead of silently mis-corresponding arrays.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import baselines, encoders, vae
from .errors import DataError

MODEL_NAMES = ("disc", "gen", "lat", "ctx", "vae-bow", "vae-lstm", "vae-xfmr")

_BASELINE_DEFAULTS = {"embed_dim": 100, "hidden_dim": 100}

_VAE_DEFAULTS = {
    "enc_embed_dim": 128,
    "enc_layers": 2,
    "enc_heads": 4,
    "max_len": 128,
    "dropout": 0.0,
    "latent_dim": 30,
    "beta": 0.5,
    "label_loss_weight": 1.0,
    "dec_embed_dim": 128,
    "dec_hidden_dim": 128,
    "dec_layers": 2,
    "dec_heads": 4,
    "tie_embeddings": False,
}

_DEFAULTS = {
    "disc": dict(_BASELINE_DEFAULTS),
    "gen": dict(_BASELINE_DEFAULTS),
    "lat": dict(_BASELINE_DEFAULTS, n_latent=30),
    "ctx": {"embed_dim": 100, "hidden_dim": 300},
    "vae-bow": dict(_VAE_DEFAULTS),
    "vae-lstm": dict(_VAE_DEFAULTS),
    "vae-xfmr": dict(_VAE_DEFAULTS),
}


@dataclass
class ModelSpec:
    name: str
    options: dict

    def to_json(self):
        return {"name": self.name, "options": dict(self.options)}

    @classmethod
    def from_json(cls, obj):
        return default_spec(obj["name"], **obj["options"])


def default_spec(name, **overrides):
    if name not in MODEL_NAMES:
        raise DataError(f"unknown model {name!r}; expected one of {', '.join(MODEL_NAMES)}")
    options = dict(_DEFAULTS[name])
    for key, value in overrides.items():
        if key not in options:
            raise DataError(f"model {name!r} has no option {key!r}; valid: {', '.join(sorted(options))}")
        options[key] = type(options[key])(value)
    return ModelSpec(name, options)


def spec_hash(spec):
    blob = json.dumps(spec.to_json(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def build_model(spec, vocab_size, prior, seed):
    """Freshly initialized model for a spec; identical (spec, seed) twice
    yields identical parameters."""
    rng = np.random.default_rng(seed)
    o = spec.options
    if spec.name == "disc":
        return baselines.DiscModel(vocab_size, prior, rng, o["embed_dim"], o["hidden_dim"])
    if spec.name == "gen":
        return baselines.ClassLMModel(vocab_size, prior, rng, o["embed_dim"], o["hidden_dim"])
    if spec.name == "lat":
        return baselines.LatentClassLMModel(
            vocab_size, prior, rng, o["embed_dim"], o["hidden_dim"], o["n_latent"]
        )
    if spec.name == "ctx":
        return baselines.CtxModel(vocab_size, prior, rng, o["embed_dim"], o["hidden_dim"])
    enc_cfg = encoders.transformer_config(
        o["enc_embed_dim"], o["enc_layers"], o["enc_heads"], o["max_len"], o["dropout"]
    )
    dec_kind = {"vae-bow": "bow", "vae-lstm": "lstm", "vae-xfmr": "xfmr-latent"}[spec.name]
    dec_spec = vae.DecoderSpec(
        dec_kind, o["dec_embed_dim"], o["dec_hidden_dim"], o["dec_layers"], o["dec_heads"],
        o["tie_embeddings"],
    )
    return vae.VAEModel(
        enc_cfg, dec_spec, vocab_size,
        latent_dim=o["latent_dim"], beta=o["beta"],
        label_loss_weight=o["label_loss_weight"], rng=rng,
    )

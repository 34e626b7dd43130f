"""The three trainable model families behind the federation methods.

Each model owns a set of named parameter groups (the unit of aggregation),
knows how to build the training loss from leaf tensors, and how to produce
noise-free logits for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import FLConfig
from .embedding import (ExtractorParams, PenaltyConfig, balancing_penalty, draw_noise,
                        extract_tensors)
from .hypernet import (ClassifierArch, HypernetConfig, HypernetParams, generate_tensors,
                       param_budget)
from .params import FlatParams, ParamBundle, mlp_apply, mlp_apply_per_sample, mlp_manifest
from .rng import RngStream

EVAL_BLOCK = 256


@dataclass
class LossParts:
    loss: Tensor
    ce: Tensor
    penalty: Tensor
    embeddings: Tensor | None = None


def _zero() -> Tensor:
    return Tensor(0.0)


class ClassifierModel:
    """Plain shared classifier (FedAvg, FedAvg-FT, Local)."""

    groups = ("classifier",)
    uses_embeddings = False

    def __init__(self, arch: ClassifierArch):
        self.arch = arch

    def init(self, rng: RngStream) -> ParamBundle:
        return {"classifier": self.arch.init(rng)}

    def loss(self, leaves: dict[str, Tensor], x: np.ndarray, y: np.ndarray, noise_gen) -> LossParts:
        logits = mlp_apply(Tensor(x), leaves["classifier"], self.arch.widths, self.arch.activation)
        ce = ad.cross_entropy(logits, y)
        pen = _zero()
        return LossParts(ce + pen, ce, pen)

    def logits(self, bundle: ParamBundle, x: np.ndarray) -> np.ndarray:
        theta = Tensor(bundle["classifier"].values)
        return mlp_apply(Tensor(x), theta, self.arch.widths, self.arch.activation).data


class _EmbeddingModel:
    uses_embeddings = True

    def __init__(self, extractor_widths, penalty: PenaltyConfig, noise_mode: str, activation: str):
        self.extractor_widths = tuple(extractor_widths)
        self.penalty = penalty
        self.noise_mode = noise_mode
        self.activation = activation

    @property
    def embed_dim(self) -> int:
        return self.extractor_widths[-1]

    def _init_extractor(self, rng: RngStream) -> ParamBundle:
        ep = ExtractorParams.init(self.extractor_widths, rng, self.activation)
        return {"extractor": ep.main, "noisy": ep.noisy}

    def _embed_train(self, leaves, x: Tensor, noise_gen) -> Tensor:
        noise = draw_noise(noise_gen, x.shape[0], self.embed_dim, self.noise_mode)
        return extract_tensors(x, leaves["extractor"], leaves["noisy"], self.extractor_widths,
                               noise, self.activation)

    def embed(self, bundle: ParamBundle, x: np.ndarray) -> np.ndarray:
        """Eval-mode (noise-free) embeddings."""
        return extract_tensors(Tensor(x), Tensor(bundle["extractor"].values), None,
                               self.extractor_widths, None, self.activation).data


class HyperFedZeroModel(_EmbeddingModel):
    groups = ("extractor", "noisy", "hypernet")

    def __init__(self, arch: ClassifierArch, extractor_widths, hcfg: HypernetConfig,
                 penalty: PenaltyConfig, noise_mode: str = "per_dim", activation: str = "relu"):
        super().__init__(extractor_widths, penalty, noise_mode, activation)
        self.arch = arch
        self.hcfg = hcfg
        self._layout = HypernetParams.init(arch, self.embed_dim, hcfg, RngStream(0))

    def hypernet(self, theta: FlatParams) -> HypernetParams:
        return self._layout.with_theta(theta)

    def init(self, rng: RngStream) -> ParamBundle:
        bundle = self._init_extractor(rng)
        bundle["hypernet"] = HypernetParams.init(self.arch, self.embed_dim, self.hcfg, rng).theta
        return bundle

    def _classify(self, x: Tensor, e: Tensor, theta_h: Tensor) -> Tensor:
        gen = generate_tensors(e, theta_h, self._layout, self.arch)
        return mlp_apply_per_sample(x, gen, self.arch.widths, self.arch.activation)

    def loss(self, leaves, x, y, noise_gen) -> LossParts:
        xt = Tensor(x)
        e = self._embed_train(leaves, xt, noise_gen)
        ce = ad.cross_entropy(self._classify(xt, e, leaves["hypernet"]), y)
        pen = balancing_penalty(e, self.penalty)
        return LossParts(ce + pen, ce, pen, e)

    def logits(self, bundle, x) -> np.ndarray:
        theta_h = Tensor(bundle["hypernet"].values)
        out = []
        for s in range(0, x.shape[0], EVAL_BLOCK):
            xt = Tensor(x[s:s + EVAL_BLOCK])
            e = Tensor(self.embed(bundle, xt.data))
            out.append(self._classify(xt, e, theta_h).data)
        return np.concatenate(out) if out else np.zeros((0, self.arch.num_classes))

    def budget(self) -> dict:
        return param_budget(self.arch, self.extractor_widths, self.hcfg)


class Opt1Model(_EmbeddingModel):
    """Input conditioning: one shared classifier on ``[x || e]``."""

    groups = ("extractor", "noisy", "classifier")

    def __init__(self, arch_aug: ClassifierArch, extractor_widths, penalty: PenaltyConfig,
                 noise_mode: str = "per_dim", activation: str = "relu"):
        super().__init__(extractor_widths, penalty, noise_mode, activation)
        self.arch = arch_aug

    def init(self, rng: RngStream) -> ParamBundle:
        bundle = self._init_extractor(rng)
        bundle["classifier"] = self.arch.init(rng)
        return bundle

    def _classify(self, x: Tensor, e: Tensor, theta: Tensor) -> Tensor:
        return mlp_apply(ad.concat([x, e], axis=1), theta, self.arch.widths, self.arch.activation)

    def loss(self, leaves, x, y, noise_gen) -> LossParts:
        xt = Tensor(x)
        e = self._embed_train(leaves, xt, noise_gen)
        ce = ad.cross_entropy(self._classify(xt, e, leaves["classifier"]), y)
        pen = balancing_penalty(e, self.penalty)
        return LossParts(ce + pen, ce, pen, e)

    def logits(self, bundle, x) -> np.ndarray:
        e = Tensor(self.embed(bundle, x))
        return self._classify(Tensor(x), e, Tensor(bundle["classifier"].values)).data


def build_model(cfg: FLConfig, feature_dim: int, num_classes: int):
    widths = (feature_dim, *cfg.classifier_hidden, num_classes)
    arch = ClassifierArch(widths, cfg.activation)
    ext = (feature_dim, *cfg.extractor_hidden, cfg.embed_dim)
    penalty = PenaltyConfig(cfg.alpha, cfg.beta)
    if cfg.method == "hyperfedzero":
        hcfg = HypernetConfig(cfg.chunk_size, cfg.chunk_dim, tuple(cfg.hypernet_hidden), cfg.activation,
                              cfg.hypernet_final_scale, cfg.hypernet_chunk_std)
        return HyperFedZeroModel(arch, ext, hcfg, penalty, cfg.noise_mode, cfg.activation)
    if cfg.method == "opt1":
        aug = ClassifierArch((feature_dim + cfg.embed_dim, *cfg.classifier_hidden, num_classes), cfg.activation)
        return Opt1Model(aug, ext, penalty, cfg.noise_mode, cfg.activation)
    return ClassifierModel(arch)


def check_bundle(model, bundle: ParamBundle) -> None:
    if set(bundle) != set(model.groups):
        raise ValueError(f"bundle groups {sorted(bundle)} != model groups {sorted(model.groups)}")
    if "classifier" in bundle and bundle["classifier"].manifest != mlp_manifest(model.arch.widths):
        raise ValueError("classifier parameters do not match the configured architecture")

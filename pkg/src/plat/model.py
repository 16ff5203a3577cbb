"""ModelBundle: backbone views, planner projectors and the special-token table."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

import plat.autodiff as ad
from plat.autodiff import Tensor
from plat.backbone import Backbone, BackboneConfig, SpecialTokenTable
from plat.errors import ConfigError

AGGREGATIONS = ("ema", "none", "residual")


@dataclass
class PlannerConfig:
    """Latent planner settings.

    Reference values used at GPT-2 scale: ``d_latent=2048``, ``noise_std=0.1``,
    ``alpha_ema=0.5`` for ``n_latent=2`` and ``0.9`` for ``n_latent=1``. The
    defaults here are desk scale.
    """

    d_latent: int = 64
    n_latent: int = 1
    alpha_ema: float = 0.9
    noise_std: float = 0.1
    max_plan_steps: int = 6
    aggregation: str = "ema"  # "none" = decoder reads raw states, "residual" = running sum
    use_context: bool = True  # False: planner passes see only a stub instead of the question
    independent_decoder: bool = False

    def __post_init__(self):
        if self.n_latent < 1:
            raise ConfigError("n_latent must be >= 1")
        if not 0.0 <= self.alpha_ema <= 1.0:
            raise ConfigError(f"alpha_ema must lie in [0, 1], got {self.alpha_ema}")
        if self.max_plan_steps < 1:
            raise ConfigError("max_plan_steps must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.d_latent < 1:
            raise ConfigError("d_latent must be >= 1")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PassCounter:
    """Sequences pushed through the backbone, split by role."""

    encoder: int = 0
    planner: int = 0
    decoder: int = 0

    def snapshot(self) -> tuple[int, int, int]:
        return (self.encoder, self.planner, self.decoder)


class Projector:
    """Single affine map ``x @ w + b``."""

    def __init__(self, w: Tensor, b: Tensor):
        self.w, self.b = w, b

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int, name: str) -> "Projector":
        w = ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out)), f"{name}.w")
        return cls(w, ad.parameter(np.zeros(d_out), f"{name}.b"))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.w, self.b)


PROJECTORS = ("enc", "h2l", "l2h", "dec")


@dataclass
class ModelBundle:
    """Everything the planner and decoder need.

    ``planner_backbone`` and ``decoder_backbone`` are the same object while
    weights are shared; :meth:`split_decoder` gives the decoder its own copy of
    the base stack (independent-decoder ablation and RL).
    """

    backbone_cfg: BackboneConfig
    planner_cfg: PlannerConfig
    special: SpecialTokenTable
    planner_backbone: Backbone
    decoder_backbone: Backbone
    projectors: dict[str, Projector]
    counter: PassCounter = field(default_factory=PassCounter)

    @classmethod
    def create(cls, backbone_cfg: BackboneConfig, planner_cfg: PlannerConfig,
               special: SpecialTokenTable, seed: int = 0,
               backbone: Backbone | None = None) -> "ModelBundle":
        special.validate(backbone_cfg.vocab_size)
        bb = backbone if backbone is not None else Backbone(backbone_cfg, seed=seed)
        rng = np.random.default_rng([seed, 17])
        dm, ds = backbone_cfg.d_model, planner_cfg.d_latent
        projectors = {
            "enc": Projector.init(rng, dm, ds, "proj.enc"),
            "h2l": Projector.init(rng, dm, ds, "proj.h2l"),
            "l2h": Projector.init(rng, ds, dm, "proj.l2h"),
            "dec": Projector.init(rng, ds, dm, "proj.dec"),
        }
        bundle = cls(backbone_cfg, planner_cfg, special, bb, bb, projectors)
        if planner_cfg.independent_decoder:
            bundle.split_decoder()
        return bundle

    @property
    def shared(self) -> bool:
        return self.planner_backbone is self.decoder_backbone

    def split_decoder(self) -> None:
        """Give the decoder an independent copy of the base stack (no planner layers)."""
        if self.shared:
            self.decoder_backbone = self.planner_backbone.clone(keep_planner_layers=False)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.shared:
            for k, v in self.planner_backbone.params.items():
                out[f"backbone.{k}"] = v
        else:
            for k, v in self.planner_backbone.params.items():
                out[f"planner_backbone.{k}"] = v
            for k, v in self.decoder_backbone.params.items():
                out[f"decoder_backbone.{k}"] = v
        for name in PROJECTORS:
            out[f"proj.{name}.w"] = self.projectors[name].w
            out[f"proj.{name}.b"] = self.projectors[name].b
        return out

    def planner_parameter_names(self) -> list[str]:
        """Parameters that influence the latent trajectory."""
        names = [k for k in self.parameters()
                 if k.startswith(("planner_backbone.", "backbone.")) or
                 k.startswith(("proj.enc.", "proj.h2l.", "proj.l2h."))]
        return names

    def decoder_parameter_names(self) -> list[str]:
        if self.shared:
            base = [f"backbone.{k}" for k in self.planner_backbone.base_parameter_names()]
        else:
            base = [f"decoder_backbone.{k}" for k in self.decoder_backbone.params]
        return base + ["proj.dec.w", "proj.dec.b"]

    def load_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ConfigError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            if arrays[k].shape != p.shape:
                raise ConfigError(f"shape mismatch for {k}: {arrays[k].shape} vs {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float64)

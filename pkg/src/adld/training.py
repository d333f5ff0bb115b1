"""End-to-end training: the per-iteration update schedule with every
gradient-stop and freeze rule, grouped Adam, the learning-rate schedule, and
the mode switch covering the full method, its pseudo-label extension, the
encoder-only baselines/upper-bounds, and the ablation variants.

Each iteration runs two updates: first the discriminators (landmark
discriminator on detached landmark-free features, feature discriminators on
detached rich/latent features), then one combined step over the remaining
networks driven by the weighted total objective.  The texture encoder's
input is always detached (its adversarial gradients must not reach the
rich-feature encoder or the generator), and the landmark detector runs with
frozen parameters whenever it consumes latent features.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import losses as L
from . import networks as nets
from . import synthdata as sd
from . import tensor as T
from .losses import AUWeightTable, DivergenceError, LossWeights
from .networks import ModelConfig, ModelParams
from .tensor import Tensor

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "iter", "epoch", "lr_A", "lr_B",
    "L_a_src", "L_a_lat", "L_l_src", "L_l_tgt", "L_l_lat_s", "L_l_lat_t",
    "L_adl_d", "L_adl_e", "L_adf_d_s", "L_adf_d_t", "L_adf_g",
    "L_r_s", "L_r_t", "L_cc_s", "L_cc_t", "total",
)


@dataclass(frozen=True)
class ModeSpec:
    modules: tuple
    terms: frozenset
    uses_pseudo: bool
    default_feed: str


_ENC = ("e_f", "f_a", "f_l")
_GEN = ("e_f", "e_t", "g", "f_l", "f_a")

MODES: dict[str, ModeSpec] = {
    "bi_s": ModeSpec(_ENC, frozenset({"a_src", "l_src"}), False, "raw"),
    "bi_st": ModeSpec(_ENC, frozenset({"a_src", "l_src", "l_tgt"}), False, "raw"),
    "ui_t": ModeSpec(_ENC, frozenset({"a_tgt", "l_tgt"}), True, "raw"),
    "ui_st": ModeSpec(_ENC, frozenset({"a_src", "a_tgt", "l_src", "l_tgt"}), True, "raw"),
    "b_net": ModeSpec(_GEN, frozenset({"a_src", "a_lat", "l_src", "l_tgt", "l_lat_s", "l_lat_t"}), False, "latent"),
    "b_net_r": ModeSpec(
        _GEN, frozenset({"a_src", "a_lat", "l_src", "l_tgt", "l_lat_s", "l_lat_t", "recon"}), False, "latent"
    ),
    "b_net_r_cc": ModeSpec(
        _GEN, frozenset({"a_src", "a_lat", "l_src", "l_tgt", "l_lat_s", "l_lat_t", "recon", "cycle"}), False, "latent"
    ),
    "b_net_r_cc_adl": ModeSpec(
        _GEN + ("d_l",),
        frozenset({"a_src", "a_lat", "l_src", "l_tgt", "l_lat_s", "l_lat_t", "recon", "cycle", "adl"}),
        False,
        "latent",
    ),
    "adld": ModeSpec(
        nets.ALL_MODULES,
        frozenset({"a_src", "a_lat", "l_src", "l_tgt", "l_lat_s", "l_lat_t", "recon", "cycle", "adl", "adf"}),
        False,
        "latent",
    ),
    "adld_full": ModeSpec(
        nets.ALL_MODULES,
        frozenset(
            {"a_src", "a_lat", "a_tgt", "a_lat_s", "l_src", "l_tgt", "l_lat_s", "l_lat_t", "recon", "cycle", "adl", "adf"}
        ),
        True,
        "latent",
    ),
}


def build_mode_graph(mode: str, weights: LossWeights | None = None) -> ModeSpec:
    """Active loss terms and instantiated modules for a mode; zero-weighted
    adversarial/reconstruction families are pruned together with the
    discriminators they would have trained."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {sorted(MODES)}")
    spec = MODES[mode]
    if weights is None:
        return spec
    terms = set(spec.terms)
    modules = list(spec.modules)
    if weights.lambda_ad_l == 0 and "adl" in terms:
        terms.discard("adl")
        modules = [m for m in modules if m != "d_l"]
    if weights.lambda_ad_f == 0 and "adf" in terms:
        terms.discard("adf")
        modules = [m for m in modules if m not in ("d_f_s", "d_f_t")]
    if weights.lambda_r == 0:
        terms.discard("recon")
    if weights.lambda_cc == 0:
        terms.discard("cycle")
    return ModeSpec(tuple(modules), frozenset(terms), spec.uses_pseudo, spec.default_feed)


@dataclass
class TrainConfig:
    mode: str = "adld"
    image_size: int = 176
    au_count: int = 6
    au_set: str = "bp4d6"
    width_scale: float = 1.0
    batch_size: int = 16
    epochs: int = 10
    iters_per_epoch: int = 0  # 0 = one pass over the primary domain
    seed: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    lr_a: float = 5e-5
    lr_b: float = 1e-4
    beta1_a: float = 0.5
    beta2_a: float = 0.9
    beta1_b: float = 0.95
    beta2_b: float = 0.999
    clip_norm: float = 10.0
    checkpoint_every: int = 1
    eval_feed: str = "latent"

    def __post_init__(self):
        if self.image_size % 4 != 0:
            raise ValueError(f"image size {self.image_size} must be divisible by 4")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.eval_feed not in ("latent", "raw"):
            raise ValueError(f"eval feed must be latent or raw, got {self.eval_feed!r}")

    def model_config(self) -> ModelConfig:
        spec = build_mode_graph(self.mode, self.weights)
        return ModelConfig(
            image_size=self.image_size,
            au_count=self.au_count,
            width_scale=self.width_scale,
            modules=tuple(spec.modules),
        )

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "weights"}
        d.update(
            lambda_l=self.weights.lambda_l,
            lambda_ad_l=self.weights.lambda_ad_l,
            lambda_ad_f=self.weights.lambda_ad_f,
            lambda_r=self.weights.lambda_r,
            lambda_cc=self.weights.lambda_cc,
        )
        return d


# ---------------------------------------------------------------------------
# Optimizer


class Adam:
    """Standard Adam with bias correction, one instance per network group."""

    def __init__(self, lr: float, beta1: float, beta2: float, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, named: dict[str, Tensor], lr_factor: float = 1.0) -> None:
        grads = {}
        for name, p in named.items():
            if p.grad is None:
                continue
            if not np.isfinite(p.grad).all():
                raise DivergenceError(f"non-finite gradient on {name!r}")
            grads[name] = p.grad
        if not grads:
            return
        self.t += 1
        lr = self.lr * lr_factor
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, g in grads.items():
            p = named[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            else:
                v = self.v[name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            self.m[name] = m
            self.v[name] = v
            step = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - step

    def state_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.m.items():
            out[f"{prefix}.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"{prefix}.v.{name}"] = arr
        return out

    def load_state(self, prefix: str, extra: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for key, arr in extra.items():
            if key.startswith(f"{prefix}.m."):
                self.m[key[len(prefix) + 3 :]] = arr
            elif key.startswith(f"{prefix}.v."):
                self.v[key[len(prefix) + 3 :]] = arr


def clip_gradients(named: dict[str, Tensor], clip_norm: float) -> float:
    """Global-norm clip over the group's gradients; returns the norm."""
    total = 0.0
    for p in named.values():
        if p.grad is not None:
            total += float(np.square(p.grad, dtype=np.float64).sum())
    norm = float(np.sqrt(total))
    if clip_norm > 0 and norm > clip_norm:
        scale = clip_norm / norm
        for p in named.values():
            if p.grad is not None:
                p.grad = p.grad * np.float32(scale)
        log.info("gradient clip triggered: norm %.3f -> %.1f", norm, clip_norm)
    return norm


def lr_at(epoch: int, base_lr: float, total_epochs: int = 10) -> float:
    """Constant for the first half, then linear decay floored at 0.2*base.

    For the 10-epoch protocol this yields factors 1,1,1,1,1,.8,.6,.4,.2,.2.
    """
    if not 1 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [1, {total_epochs}]")
    half = total_epochs // 2
    if total_epochs <= 1 or epoch <= half:
        return base_lr
    factor = 1.0 - (epoch - half) / half
    return base_lr * max(factor, 0.2)


# ---------------------------------------------------------------------------
# Batches


@dataclass
class Batch:
    images: Tensor  # (B, 3, l, l)
    classes: np.ndarray  # (B, 49) 1-based cell indices
    aus: np.ndarray | None  # (B, m) or None
    pseudo_aus: np.ndarray | None


def make_batch(records, indices, l: int, rng: np.random.Generator, augment: bool = True, root=None) -> Batch:
    imgs = []
    classes = []
    aus = []
    pseudo = []
    d = l // 4
    for idx in indices:
        rec = records[int(idx) % len(records)]
        img = rec.load_image(root)
        if augment:
            crop, lm = geo.random_crop_mirror(img, rec.landmarks, l, rng)
        else:
            crop, lm = geo.center_crop(img, rec.landmarks, l)
        imgs.append(crop.data)
        classes.append(geo.encode_landmark_classes(lm, d))
        aus.append(rec.aus)
        pseudo.append(rec.pseudo_aus)
    return Batch(
        images=Tensor(np.stack(imgs)),
        classes=np.stack(classes),
        aus=None if aus[0] is None else np.stack(aus),
        pseudo_aus=None if pseudo[0] is None else np.stack(pseudo),
    )


# ---------------------------------------------------------------------------
# The trainer


class Trainer:
    def __init__(
        self,
        config: TrainConfig,
        params: ModelParams | None = None,
        source_weights: AUWeightTable | None = None,
        target_weights: AUWeightTable | None = None,
    ):
        self.config = config
        self.mode = build_mode_graph(config.mode, config.weights)
        self.params = params if params is not None else nets.init_params(config.model_config(), seed=config.seed)
        self.w_src = source_weights
        self.w_tgt = target_weights
        self.opt_main_b = Adam(config.lr_b, config.beta1_b, config.beta2_b)
        self.opt_main_a = Adam(config.lr_a, config.beta1_a, config.beta2_a)
        self.opt_disc = Adam(config.lr_a, config.beta1_a, config.beta2_a)
        self.iteration = 0

    # parameter groups -----------------------------------------------------
    def _named(self, prefixes) -> dict[str, Tensor]:
        out = {}
        for prefix in prefixes:
            for name in self.params.subnet(prefix):
                out[name] = self.params[name]
        return out

    def main_group_b(self) -> dict[str, Tensor]:
        return self._named([m for m in ("e_f", "f_a", "f_l") if m in self.mode.modules])

    def main_group_a(self) -> dict[str, Tensor]:
        return self._named([m for m in ("e_t", "g") if m in self.mode.modules])

    def disc_group(self) -> dict[str, Tensor]:
        names = []
        if "adl" in self.mode.terms:
            names.append("d_l")
        if "adf" in self.mode.terms:
            names += ["d_f_s", "d_f_t"]
        return self._named(names)

    # one iteration --------------------------------------------------------
    def step(self, batch_s: Batch | None, batch_t: Batch | None, lr_factor: float = 1.0) -> dict:
        cfg = self.config
        terms = self.mode.terms
        P = self.params
        out: dict[str, float | None] = {c: None for c in CSV_COLUMNS}
        b = cfg.batch_size

        need_latent = terms & {"a_lat", "a_lat_s", "l_lat_s", "l_lat_t", "recon", "cycle", "adl", "adf"}
        with T.Tape() as tape:
            xs = nets.encode_rich(batch_s.images, P) if batch_s is not None and ("a_src" in terms or "l_src" in terms or need_latent) else None
            xt = nets.encode_rich(batch_t.images, P) if batch_t is not None and ("a_tgt" in terms or "l_tgt" in terms or need_latent) else None
            x_cat = T.concat_batch(xs, xt) if (xs is not None and xt is not None) else None

            parts: dict[str, list[Tensor]] = {}

            def add(family: str, value: Tensor, column: str | None = None):
                parts.setdefault(family, []).append(value)
                if column is not None:
                    prev = out.get(column)
                    out[column] = float(value.data) if prev is None else prev + float(value.data)

            # landmark classification on rich features (trains f_l)
            maps_s = maps_t = None
            if need_latent or "l_src" in terms or "l_tgt" in terms:
                if x_cat is not None:
                    maps_x = nets.detect_landmarks(x_cat, P)
                    maps_s = T.slice_batch(maps_x, 0, b)
                    maps_t = T.slice_batch(maps_x, b, 2 * b)
                elif xs is not None:
                    maps_x = maps_s = nets.detect_landmarks(xs, P)
                else:
                    maps_x = maps_t = nets.detect_landmarks(xt, P)
            if "l_src" in terms:
                add("landmark", L.landmark_cls_loss(maps_s, batch_s.classes), "L_l_src")
            if "l_tgt" in terms:
                add("landmark", L.landmark_cls_loss(maps_t, batch_t.classes), "L_l_tgt")

            x_lat_s = x_lat_t = z_t_x = None
            if need_latent:
                # disentangle: z_l through the softmax-sum, z_t with a detached
                # input so texture-adversarial gradients never reach e_f
                z_l_x = nets.landmark_related_feature(maps_x)
                z_t_x = nets.encode_texture(T.stop_gradient(x_cat), P)
                z_l_s, z_l_t = T.slice_batch(z_l_x, 0, b), T.slice_batch(z_l_x, b, 2 * b)
                z_t_s, z_t_t = T.slice_batch(z_t_x, 0, b), T.slice_batch(z_t_x, b, 2 * b)
                # swap landmark features across domains
                x_lat = nets.generate_latent(
                    T.concat_batch(z_l_t, z_l_s), T.concat_batch(z_t_s, z_t_t), P
                )
                x_lat_s, x_lat_t = T.slice_batch(x_lat, 0, b), T.slice_batch(x_lat, b, 2 * b)

                if "recon" in terms:
                    x_rec = nets.generate_latent(z_l_x, z_t_x, P)
                    add("recon", L.self_recon_loss(T.slice_batch(x_rec, 0, b), xs), "L_r_s")
                    add("recon", L.self_recon_loss(T.slice_batch(x_rec, b, 2 * b), xt), "L_r_t")

                if terms & {"l_lat_s", "l_lat_t"}:
                    # the latent landmark constraint excludes the landmark
                    # detector's parameters from its entire gradient path, so
                    # it consumes a twin latent built through a param-frozen
                    # first pass (values identical, routing not)
                    maps_x_fr = nets.detect_landmarks(x_cat, P, frozen=True)
                    z_l_fr = nets.landmark_related_feature(maps_x_fr)
                    x_lat_ll = nets.generate_latent(
                        T.concat_batch(T.slice_batch(z_l_fr, b, 2 * b), T.slice_batch(z_l_fr, 0, b)),
                        T.concat_batch(z_t_s, z_t_t),
                        P,
                    )
                    maps_lat_ll = nets.detect_landmarks(x_lat_ll, P, frozen=True)
                    if "l_lat_s" in terms:
                        add("landmark", L.landmark_cls_loss(T.slice_batch(maps_lat_ll, 0, b), batch_t.classes), "L_l_lat_s")
                    if "l_lat_t" in terms:
                        add("landmark", L.landmark_cls_loss(T.slice_batch(maps_lat_ll, b, 2 * b), batch_s.classes), "L_l_lat_t")

                if "cycle" in terms:
                    # second disentangle-swap-translate on the attached latents;
                    # the landmark detector itself stays frozen on latent input
                    maps_lat = nets.detect_landmarks(x_lat, P, frozen=True)
                    z_l_lat = nets.landmark_related_feature(maps_lat)
                    z_t_lat = nets.encode_texture(T.stop_gradient(x_lat), P)
                    zl_lat_s, zl_lat_t = T.slice_batch(z_l_lat, 0, b), T.slice_batch(z_l_lat, b, 2 * b)
                    zt_lat_s, zt_lat_t = T.slice_batch(z_t_lat, 0, b), T.slice_batch(z_t_lat, b, 2 * b)
                    x_cc = nets.generate_latent(
                        T.concat_batch(zl_lat_t, zl_lat_s), T.concat_batch(zt_lat_s, zt_lat_t), P
                    )
                    add("cycle", L.cross_cycle_loss(T.slice_batch(x_cc, 0, b), xs), "L_cc_s")
                    add("cycle", L.cross_cycle_loss(T.slice_batch(x_cc, b, 2 * b), xt), "L_cc_t")

            # AU detection losses
            if "a_src" in terms:
                add("au", L.au_detection_loss(nets.detect_aus(xs, P), batch_s.aus, self.w_src), "L_a_src")
            if "a_lat" in terms:
                add("au", L.au_detection_loss(nets.detect_aus(x_lat_t, P), batch_s.aus, self.w_src), "L_a_lat")
            if "a_tgt" in terms:
                add("au", L.au_detection_loss(nets.detect_aus(xt, P), batch_t.pseudo_aus, self.w_tgt), "L_a_src")
            if "a_lat_s" in terms:
                add("au", L.au_detection_loss(nets.detect_aus(x_lat_s, P), batch_t.pseudo_aus, self.w_tgt), "L_a_lat")

            # ---- discriminator updates (their own tape, detached features) ----
            if terms & {"adl", "adf"}:
                with T.Tape() as dtape:
                    d_losses = []
                    if "adl" in terms:
                        d_maps = nets.discriminate_landmarks(Tensor(z_t_x.data), P)
                        labels_cat = np.concatenate([batch_s.classes, batch_t.classes], axis=0)
                        adl_d = L.landmark_adv_d_loss(d_maps, labels_cat)
                        out["L_adl_d"] = float(adl_d.data)
                        d_losses.append(adl_d)
                    if "adf" in terms:
                        for domain, real, fake, col in (
                            ("source", xs, x_lat_s, "L_adf_d_s"),
                            ("target", xt, x_lat_t, "L_adf_d_t"),
                        ):
                            score_r = nets.discriminate_feature(Tensor(real.data), domain, P)
                            score_f = nets.discriminate_feature(Tensor(fake.data), domain, P)
                            d_loss, _ = L.feature_adv_losses(score_r, score_f)
                            out[col] = float(d_loss.data)
                            d_losses.append(d_loss)
                    d_total = d_losses[0] if len(d_losses) == 1 else T.elementwise_sum(d_losses)
                    T.backward(d_total, dtape)
                disc = self.disc_group()
                clip_gradients(disc, cfg.clip_norm)
                self.opt_disc.update(disc, lr_factor)
                for p in disc.values():
                    p.grad = None

            # ---- adversarial terms for the main step, with fresh frozen
            # discriminator forwards (the discriminators were just updated) ----
            if "adl" in terms:
                e_maps = nets.discriminate_landmarks(z_t_x, P, frozen=True)
                add("adv_landmark", L.landmark_adv_e_loss(e_maps), "L_adl_e")
            if "adf" in terms:
                for domain, real, fake in (("source", xs, x_lat_s), ("target", xt, x_lat_t)):
                    score_f = nets.discriminate_feature(fake, domain, P, frozen=True)
                    _, g_loss = L.feature_adv_losses(Tensor(np.ones_like(score_f.data)), score_f)
                    add("adv_feature", g_loss, "L_adf_g")

            collapsed = {
                family: (vals[0] if len(vals) == 1 else T.elementwise_sum(vals)) for family, vals in parts.items()
            }
            total = L.total_objective(collapsed, cfg.weights)
            out["total"] = float(total.data)
            T.backward(total, tape)

        group_b = self.main_group_b()
        group_a = self.main_group_a()
        merged = {**group_b, **group_a}
        clip_gradients(merged, cfg.clip_norm)
        self.opt_main_b.update(group_b, lr_factor)
        if group_a:
            self.opt_main_a.update(group_a, lr_factor)
        self.params.zero_grads()
        self.iteration += 1
        out["iter"] = self.iteration
        return out


# ---------------------------------------------------------------------------
# Orchestration


def _shuffle_rng(seed: int, tag: str, epoch: int) -> np.random.Generator:
    import hashlib

    digest = hashlib.blake2s(f"{tag}:{epoch}".encode(), digest_size=8).digest()
    key = sd.mix64((seed & sd.MASK64) ^ int.from_bytes(digest, "little"))
    return np.random.Generator(np.random.Philox(key=key))


def compute_label_weights(records, field_name: str) -> AUWeightTable:
    rates = sd.empirical_rates(records, field_name)
    # guard degenerate empirical rates so weights stay finite
    rates = np.clip(rates, 1e-3, 1.0)
    return L.compute_au_weights(rates)


def train(
    config: TrainConfig,
    source_records,
    target_records,
    out_dir,
    resume: str | Path | None = None,
    probe_hook=None,
) -> Path:
    """Run the full protocol; returns the final checkpoint directory.

    Writes metrics.csv (one row per iteration), per-epoch checkpoints
    checkpoint_ep{N}/ and final/ under ``out_dir``.  ``probe_hook`` is called
    as probe_hook(trainer, iteration) after every iteration when given.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mode = build_mode_graph(config.mode, config.weights)

    w_src = None
    w_tgt = None
    if mode.terms & {"a_src", "a_lat"}:
        w_src = compute_label_weights(source_records, "aus")
    if mode.uses_pseudo:
        w_tgt = compute_label_weights(target_records, "pseudo_aus")
    latent_terms = {"a_lat", "a_lat_s", "l_lat_s", "l_lat_t", "recon", "cycle", "adl", "adf"}
    needs_source = bool(mode.terms & ({"a_src", "l_src"} | latent_terms))
    needs_target = bool(mode.terms & ({"a_tgt", "l_tgt"} | latent_terms))

    start_epoch = 1
    trainer = Trainer(config, source_weights=w_src, target_weights=w_tgt)
    csv_mode = "w"
    if resume is not None:
        params, extra, meta = nets.load_checkpoint(resume)
        trainer.params = params
        trainer.opt_main_b.load_state("opt_b", extra, int(meta["opt_t"]["b"]))
        trainer.opt_main_a.load_state("opt_a", extra, int(meta["opt_t"]["a"]))
        trainer.opt_disc.load_state("opt_d", extra, int(meta["opt_t"]["d"]))
        trainer.iteration = int(meta["iteration"])
        start_epoch = int(meta["epoch"]) + 1
        csv_mode = "a" if (out_dir / "metrics.csv").exists() else "w"

    primary = source_records if config.mode != "ui_t" else target_records
    n_primary = len(primary)
    iters_per_epoch = config.iters_per_epoch or max(1, n_primary // config.batch_size)

    def checkpoint(tag: str, epoch: int) -> Path:
        extra = {}
        extra.update(trainer.opt_main_b.state_tensors("opt_b"))
        extra.update(trainer.opt_main_a.state_tensors("opt_a"))
        extra.update(trainer.opt_disc.state_tensors("opt_d"))
        meta = {
            "iteration": trainer.iteration,
            "epoch": epoch,
            "seed": config.seed,
            "mode": config.mode,
            "config_hash": nets.config_hash(config.to_dict()),
            "opt_t": {"b": trainer.opt_main_b.t, "a": trainer.opt_main_a.t, "d": trainer.opt_disc.t},
        }
        path = out_dir / tag
        nets.save_checkpoint(path, trainer.params, extra, meta)
        return path

    csv_path = out_dir / "metrics.csv"
    with open(csv_path, csv_mode, newline="") as fh:
        writer = csv.writer(fh)
        if csv_mode == "w":
            writer.writerow(CSV_COLUMNS)
        for epoch in range(start_epoch, config.epochs + 1):
            factor = lr_at(epoch, 1.0, config.epochs)
            rng_s = _shuffle_rng(config.seed, "source", epoch)
            rng_t = _shuffle_rng(config.seed, "target", epoch)
            rng_aug_s = _shuffle_rng(config.seed, "aug_source", epoch)
            rng_aug_t = _shuffle_rng(config.seed, "aug_target", epoch)
            perm_s = rng_s.permutation(len(source_records)) if source_records else np.array([], dtype=int)
            perm_t = rng_t.permutation(len(target_records)) if target_records else np.array([], dtype=int)
            for it in range(iters_per_epoch):
                lo = it * config.batch_size
                batch_s = None
                batch_t = None
                if needs_source and len(perm_s):
                    idx = [perm_s[(lo + k) % len(perm_s)] for k in range(config.batch_size)]
                    batch_s = make_batch(source_records, idx, config.image_size, rng_aug_s)
                if needs_target and len(perm_t):
                    idx = [perm_t[(lo + k) % len(perm_t)] for k in range(config.batch_size)]
                    batch_t = make_batch(target_records, idx, config.image_size, rng_aug_t)
                try:
                    row = trainer.step(batch_s, batch_t, factor)
                except DivergenceError:
                    checkpoint("diverged", epoch)
                    raise
                row["epoch"] = epoch
                row["lr_A"] = config.lr_a * factor
                row["lr_B"] = config.lr_b * factor
                writer.writerow(_format_row(row))
                if probe_hook is not None:
                    probe_hook(trainer, trainer.iteration)
            fh.flush()
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                checkpoint(f"checkpoint_ep{epoch}", epoch)
    final = checkpoint("final", config.epochs)
    return final


def _format_row(row: dict) -> list:
    out = []
    for col in CSV_COLUMNS:
        v = row.get(col)
        if v is None:
            out.append("")
        elif col in ("iter", "epoch"):
            out.append(str(int(v)))
        else:
            out.append(f"{float(v):.9g}")
    return out


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for key, val in row.items():
                if val == "" or val is None:
                    parsed[key] = None
                elif key in ("iter", "epoch"):
                    parsed[key] = int(val)
                else:
                    parsed[key] = float(val)
            rows.append(parsed)
    return rows

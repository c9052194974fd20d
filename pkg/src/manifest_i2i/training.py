"""Joint optimisation loop: anchor multi-target training, weighted manifold
interpolation, residual mode alternation and the few-shot losses."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .checkpoint import load_checkpoint, save_checkpoint
from .config import AblationMask, TrainingConfig, write_config
from .data import DATA_ANCHOR_PREFIX, DomainDataset, DomainSampler, load_domain
from .germ import EXEMPLAR, GENERAL, compose, exemplar_conditioning, general_conditioning, residual
from .manifold import AnchorStyleBank, anchor_weights, interpolate_style
from .networks import NetworkBundle

log = logging.getLogger(__name__)

METRICS_NAME = "metrics.tsv"
CHECKPOINT_NAME = "checkpoint.npz"
CONFIG_NAME = "config.txt"


@dataclass
class Datasets:
    source: DomainDataset
    anchors: dict[str, DomainDataset]  # includes "id" -> source
    fewshot: DomainDataset


def anchor_dir(name: str) -> str:
    return "source" if name == "id" else f"{DATA_ANCHOR_PREFIX}{name}"


def load_datasets(cfg: TrainingConfig, root=None) -> Datasets:
    root = Path(root or cfg.data_root)
    source = load_domain(root / "source", "source", cfg.resolution)
    anchors = {"id": source}
    for name in cfg.anchor_list[1:]:
        anchors[name] = load_domain(root / anchor_dir(name), "anchor", cfg.resolution)
    fewshot = load_domain(root / "fewshot", "fewshot", cfg.resolution, cfg.fewshot_size)
    return Datasets(source, anchors, fewshot)


def target_anchor(bundle: NetworkBundle) -> str:
    """The anchor slot that stands for the target side (first non-identity anchor)."""
    return bundle.anchors[1]


def param_checksum(params) -> float:
    return float(sum(p.detach().double().sum() + (p.detach().double() ** 2).sum()
                     for p in params))


@torch.no_grad()
def refresh_style_bank(bundle: NetworkBundle, images: dict[str, torch.Tensor]) -> None:
    """Store each anchor's mean style code over a reference batch."""
    for i, a in enumerate(bundle.anchors):
        bundle.style_bank[i] = bundle.encode_style(images[a], a).mean(0)


class Trainer:
    def __init__(self, cfg: TrainingConfig, datasets: Datasets, bundle: NetworkBundle | None = None):
        self.cfg = cfg
        self.mask: AblationMask = cfg.mask()
        self.datasets = datasets
        self.bundle = bundle or NetworkBundle(cfg.network_config())
        self.weights = L.LossWeights(cfg.lambda_style, cfg.lambda_patch, cfg.lambda_adv,
                                     cfg.lambda_recon_image, cfg.lambda_recon_style,
                                     cfg.lambda_recon_content)
        betas = (cfg.beta1, cfg.beta2)
        self.opt_G = torch.optim.Adam(self.bundle.generator_parameters(), lr=cfg.lr_gen, betas=betas)
        self.opt_D = torch.optim.Adam(self.bundle.discriminator_parameters(), lr=cfg.lr_disc,
                                      betas=betas)
        self.schedulers = []
        if cfg.lr_decay_every:
            self.schedulers = [torch.optim.lr_scheduler.StepLR(o, cfg.lr_decay_every,
                                                               cfg.lr_decay_gamma)
                               for o in (self.opt_G, self.opt_D)]
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.samplers = {"source": DomainSampler(datasets.source, self.generator),
                         "fewshot": DomainSampler(datasets.fewshot, self.generator)}
        for name, ds in datasets.anchors.items():
            if name != "id":
                self.samplers[f"anchor:{name}"] = DomainSampler(ds, self.generator)
        self.step = 0

    # -- sampling ---------------------------------------------------------

    def draw_batches(self) -> dict:
        n = self.cfg.batch_size
        anchors = {"id": self.samplers["source"].sample_batch(n)}
        for name in self.bundle.anchors[1:]:
            anchors[name] = self.samplers[f"anchor:{name}"].sample_batch(n)
        return {"s": self.samplers["source"].sample_batch(n), "anchors": anchors,
                "t": self.samplers["fewshot"].sample_batch(n)}

    def draw_anchor(self) -> str:
        i = int(torch.randint(len(self.bundle.anchors), (1,), generator=self.generator))
        return self.bundle.anchors[i]

    def draw_mode(self) -> str:
        u = float(torch.rand((), generator=self.generator))
        return EXEMPLAR if u < self.cfg.exemplar_prob else GENERAL

    # -- one iteration ----------------------------------------------------

    def forward(self, batches: dict) -> dict:
        """Generator-side graph for one iteration (everything the losses need)."""
        b, mask = self.bundle, self.mask
        s, t = batches["s"], batches["t"]
        anchor_images = dict(batches["anchors"])
        target = target_anchor(b)
        if mask.lgfs_only:
            # the target slot learns directly from the few-shot images
            anchor_images[target] = t
        out = {"s": s, "t": t}
        content = b.encode_content(s)
        codes = {a: b.encode_style(anchor_images[a], a) for a in b.anchors}
        c = target if mask.lgfs_only else self.draw_anchor()
        out.update(content=content, codes=codes, c=c, a_c=anchor_images[c])
        out["s_c"] = b.decode(content, codes[c])

        if mask.wmi:
            z_w = interpolate_style(AnchorStyleBank(b.anchors, codes), anchor_weights(b))
            s_w = b.decode(content, z_w)
        elif c == target:
            s_w = out["s_c"]
        else:
            s_w = b.decode(content, codes[target])
        out["s_w"] = s_w

        mode = None
        if mask.germ:
            mode = self.draw_mode()
            if mode == EXEMPLAR:
                z_r = exemplar_conditioning(b, t)
            else:
                z_r = general_conditioning(b, s.shape[0], self.generator)
            out["s_tilde"] = compose(s_w, residual(b, content, z_r))
        else:
            out["s_tilde"] = s_w
        out["mode"] = mode
        return out

    def _d_losses(self, fw: dict) -> dict:
        b, cfg, mask = self.bundle, self.cfg, self.mask
        zero = torch.zeros(())
        adv_D = L.adv_loss_D(b.disc_mt, fw["s_c"], fw["a_c"], fw["c"]) if mask.anchor_adv else zero
        patch_D = (L.patch_loss_D(b.disc_fs, fw["s_tilde"], fw["t"], cfg.n_patches,
                                  cfg.effective_patch_size, self.generator)
                   if mask.patch else zero)
        return {"adv_D": adv_D, "patch_D": patch_D}

    def _g_losses(self, fw: dict) -> dict:
        b, cfg, mask = self.bundle, self.cfg, self.mask
        zero = torch.zeros(())
        out = {
            "adv_G": L.adv_loss_G(b.disc_mt, fw["s_c"], fw["c"]) if mask.anchor_adv else zero,
            "patch_G": (L.patch_loss_G(b.disc_fs, fw["s_tilde"], cfg.n_patches,
                                       cfg.effective_patch_size, self.generator)
                        if mask.patch else zero),
            "style": L.style_loss(b.phi, fw["s_tilde"], fw["t"]) if mask.style else zero,
        }
        rec_s = L.reconstruction_losses(b, fw["s"], "id", content=fw["content"],
                                        s_tilde_c=fw["s_c"], z_c=fw["codes"][fw["c"]], c=fw["c"])
        rec_a = L.reconstruction_losses(b, fw["a_c"], fw["c"])
        out["recon_image"] = 0.5 * (rec_s["recon_image"] + rec_a["recon_image"])
        out["recon_content"] = rec_s["recon_content"]
        out["recon_style"] = rec_s["recon_style"]
        return out

    def train_step(self, batches: dict | None = None) -> L.LossReport:
        """One discriminator update followed by one generator update."""
        batches = batches or self.draw_batches()
        self.bundle.train()
        fw = self.forward(batches)

        self.opt_D.zero_grad(set_to_none=True)
        d_terms = self._d_losses(fw)
        for k, v in d_terms.items():
            if not torch.isfinite(v):
                raise L.NonFiniteLossError(k, float(v))
        (self.weights.adv * d_terms["adv_D"] + self.weights.patch * d_terms["patch_D"]).backward()
        self.opt_D.step()

        self.opt_G.zero_grad(set_to_none=True)
        report = L.assemble({**self._g_losses(fw), **d_terms}, self.weights)
        report.total_G.backward()
        self.opt_G.step()
        for sch in self.schedulers:
            sch.step()
        self.step += 1

        w = anchor_weights(self.bundle).weights.detach()
        if not abs(float(w.sum()) - 1.0) <= 1e-6:
            raise FloatingPointError(f"anchor weights left the simplex: {w.tolist()}")
        report.extras.update({f"w_{a}": float(w[i]) for i, a in enumerate(self.bundle.anchors)})
        report.extras["exemplar_mode"] = float(fw["mode"] == EXEMPLAR)
        report.extras["anchor_index"] = float(self.bundle.anchors.index(fw["c"]))
        return report

    # -- style bank and checkpoints ----------------------------------------

    def reference_images(self) -> dict[str, torch.Tensor]:
        k = self.cfg.style_bank_size
        refs = {a: ds.images[:k] for a, ds in self.datasets.anchors.items()}
        if self.mask.lgfs_only:
            refs[target_anchor(self.bundle)] = self.datasets.fewshot.images[:k]
        return refs

    def state_arrays(self) -> dict:
        arrays = {"train/generator_state": self.generator.get_state()}
        for key, sampler in self.samplers.items():
            st = sampler.state_dict()
            arrays[f"train/sampler/{key}/order"] = st["order"]
            arrays[f"train/sampler/{key}/cursor"] = np.asarray(st["cursor"])
        for name, opt in (("G", self.opt_G), ("D", self.opt_D)):
            for idx, st in opt.state_dict()["state"].items():
                for k, v in st.items():
                    arrays[f"train/opt/{name}/{idx}/{k}"] = torch.as_tensor(v)
        for i, sch in enumerate(self.schedulers):
            arrays[f"train/sched/{i}/last_epoch"] = np.asarray(sch.last_epoch)
        return arrays

    def load_state_arrays(self, arrays: dict, step: int) -> None:
        self.step = step
        self.generator.set_state(torch.from_numpy(arrays["train/generator_state"].copy()))
        for key, sampler in self.samplers.items():
            sampler.load_state_dict({"order": arrays[f"train/sampler/{key}/order"],
                                     "cursor": arrays[f"train/sampler/{key}/cursor"]})
        for name, opt in (("G", self.opt_G), ("D", self.opt_D)):
            sd = opt.state_dict()
            prefix = f"train/opt/{name}/"
            state: dict = {}
            for k, v in arrays.items():
                if k.startswith(prefix):
                    idx, field = k[len(prefix):].split("/")
                    state.setdefault(int(idx), {})[field] = torch.from_numpy(v.copy())
            sd["state"] = state
            opt.load_state_dict(sd)
        for i, sch in enumerate(self.schedulers):
            sch.last_epoch = int(arrays[f"train/sched/{i}/last_epoch"])

    def save(self, path) -> Path:
        refresh_style_bank(self.bundle, self.reference_images())
        meta = {"step": self.step, "training": dataclasses.asdict(self.cfg)}
        return save_checkpoint(path, self.bundle, self.state_arrays(), meta)

    @classmethod
    def resume(cls, path, cfg: TrainingConfig, datasets: Datasets) -> "Trainer":
        bundle, meta, extras = load_checkpoint(path)
        trainer = cls(cfg, datasets, bundle)
        trainer.load_state_arrays(extras, int(meta["step"]))
        return trainer


def write_metrics(fh, step: int, values: dict[str, float]) -> None:
    for name in sorted(values):
        fh.write(f"{step}\t{name}\t{values[name]!r}\n")


def read_metrics(path) -> dict[str, list[tuple[int, float]]]:
    series: dict[str, list[tuple[int, float]]] = {}
    with open(path) as fh:
        for line in fh:
            step, name, value = line.rstrip("\n").split("\t")
            series.setdefault(name, []).append((int(step), float(value)))
    return series


def fit(cfg: TrainingConfig, datasets: Datasets | None = None, progress_every: int = 100) -> Path:
    """Train for ``cfg.iterations`` steps; returns the final checkpoint path.

    Writes ``checkpoint.npz``, ``metrics.tsv`` and the effective ``config.txt``
    under ``cfg.out_dir``. With ``cfg.resume`` an existing checkpoint there is
    continued from its step count.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out_dir / CONFIG_NAME)
    datasets = datasets or load_datasets(cfg)
    ckpt = out_dir / CHECKPOINT_NAME
    metrics_path = out_dir / METRICS_NAME
    if cfg.resume and ckpt.exists():
        trainer = Trainer.resume(ckpt, cfg, datasets)
        log.info("resumed from %s at step %d", ckpt, trainer.step)
        _truncate_metrics(metrics_path, trainer.step)
    else:
        trainer = Trainer(cfg, datasets)
        metrics_path.write_text("")
    t0, start = time.perf_counter(), trainer.step
    with open(metrics_path, "a") as fh:
        while trainer.step < cfg.iterations:
            report = trainer.train_step()
            write_metrics(fh, trainer.step, report.as_floats())
            if progress_every and trainer.step % progress_every == 0:
                fh.flush()
                rate = (time.perf_counter() - t0) / max(trainer.step - start, 1)
                vals = report.as_floats()
                log.info("step %d  G %.4f  D %.4f  style %.4f  (%.2fs/step)", trainer.step,
                         vals["total_G"], vals["total_D"], vals["style"], rate)
            if trainer.step % cfg.checkpoint_every == 0:
                trainer.save(ckpt)
    trainer.save(ckpt)
    return ckpt


def _truncate_metrics(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines(keepends=True)
            if int(ln.split("\t", 1)[0]) <= step]
    path.write_text("".join(keep))

import pytest
import torch

from manifest_i2i import losses as L
from manifest_i2i.checkpoint import load_checkpoint
from manifest_i2i.config import (
    AblationMask, ConfigError, TrainingConfig, format_config, load_config, write_config,
)
from manifest_i2i.evaluation import ensure_mode_allowed
from manifest_i2i.germ import EXEMPLAR, GENERAL
from manifest_i2i.training import (
    Trainer, fit, load_datasets, param_checksum, read_metrics, write_metrics,
)

from conftest import tiny_training_overrides


@pytest.fixture(scope="module")
def datasets(toy_root, tmp_path_factory):
    cfg = TrainingConfig(**tiny_training_overrides(toy_root, tmp_path_factory.mktemp("ds")))
    return load_datasets(cfg)


def make_trainer(toy_root, tmp_path, datasets, **kw):
    return Trainer(TrainingConfig(**tiny_training_overrides(toy_root, tmp_path, **kw)), datasets)


def module_checksums(bundle):
    groups = {name: getattr(bundle, name).parameters()
              for name in ("content_encoder", "style_encoder", "decoder", "residual_generator",
                           "disc_mt", "disc_fs", "phi")}
    groups["anchor_logits"] = [bundle.anchor_logits]
    return {k: param_checksum(v) for k, v in groups.items()}


# -- train_step ----------------------------------------------------------------


def test_identical_seeds_give_identical_reports(toy_root, tmp_path, datasets):
    a = make_trainer(toy_root, tmp_path, datasets)
    b = make_trainer(toy_root, tmp_path, datasets)
    for _ in range(2):
        assert a.train_step().as_floats() == b.train_step().as_floats()


def test_step_changes_trainable_groups_only(toy_root, tmp_path, datasets):
    t = make_trainer(toy_root, tmp_path, datasets)
    before = module_checksums(t.bundle)
    t.train_step()
    after = module_checksums(t.bundle)
    assert after["phi"] == before["phi"]
    for name in before:
        if name != "phi":
            assert after[name] != before[name], name


def test_logits_receive_gradient(toy_root, tmp_path, datasets):
    t = make_trainer(toy_root, tmp_path, datasets)
    t.train_step()
    grad = t.bundle.anchor_logits.grad
    assert grad is not None and grad.abs().max() > 0


def test_update_exclusivity(toy_root, tmp_path, datasets):
    t = make_trainer(toy_root, tmp_path, datasets)
    gen, disc = t.bundle.generator_parameters, t.bundle.discriminator_parameters
    seen = []

    def wrap(opt, frozen, moving):
        original = opt.step

        def step(*args, **kw):
            f0, m0 = param_checksum(frozen()), param_checksum(moving())
            out = original(*args, **kw)
            seen.append((f0 == param_checksum(frozen()), m0 != param_checksum(moving())))
            return out
        opt.step = step

    wrap(t.opt_D, gen, disc)
    wrap(t.opt_G, disc, gen)
    for _ in range(3):
        t.train_step()
    assert len(seen) == 6 and all(frozen and moved for frozen, moved in seen)


def test_mode_mixing_frequency(toy_root, tmp_path, datasets):
    t = make_trainer(toy_root, tmp_path, datasets)
    draws = [t.draw_mode() for _ in range(1000)]
    assert abs(draws.count(EXEMPLAR) / 1000 - 0.5) <= 0.05
    assert set(draws) == {EXEMPLAR, GENERAL}


def test_anchor_draw_covers_all_anchors(toy_root, tmp_path, datasets):
    t = make_trainer(toy_root, tmp_path, datasets)
    assert {t.draw_anchor() for _ in range(200)} == {"id", "m"}


def test_simplex_after_steps(toy_root, tmp_path, datasets):
    t = make_trainer(toy_root, tmp_path, datasets, lr_gen=1e-2)
    for _ in range(5):
        extras = t.train_step().extras
        assert abs(extras["w_id"] + extras["w_m"] - 1) <= 1e-6


def test_nan_loss_names_term(toy_root, tmp_path, datasets, monkeypatch):
    t = make_trainer(toy_root, tmp_path, datasets)
    monkeypatch.setattr(L, "style_loss", lambda *a: torch.tensor(float("nan")))
    with pytest.raises(L.NonFiniteLossError, match="style"):
        t.train_step()


# -- ablations -----------------------------------------------------------------------


def test_mask_rules():
    assert AblationMask.from_flags([]) == AblationMask()
    lgfs = AblationMask.from_flags(["lgfs_only"])
    assert lgfs.lgfs_only and not lgfs.wmi and not lgfs.germ
    with pytest.raises(ConfigError):
        AblationMask.from_flags(["no_style", "no_patch"])
    with pytest.raises(ConfigError):
        AblationMask.from_flags(["lgfs_only", "no_style"])
    with pytest.raises(ConfigError):
        AblationMask.from_flags(["no_fun"])
    no_germ = AblationMask.from_flags(["no_germ"])
    with pytest.raises(ValueError):
        ensure_mode_allowed(no_germ, EXEMPLAR)
    ensure_mode_allowed(no_germ, GENERAL)


@pytest.mark.parametrize("flags", ["no_style", "no_patch", "no_germ", "no_wmi", "lgfs_only",
                                   "no_germ,no_wmi"])
def test_each_ablation_trains(toy_root, tmp_path, datasets, flags):
    t = make_trainer(toy_root, tmp_path, datasets, ablate=flags)
    values = t.train_step().as_floats()
    mask = t.mask
    if not mask.style:
        assert values["style"] == 0
    if not mask.patch:
        assert values["patch_G"] == 0 and values["patch_D"] == 0
    if mask.lgfs_only:
        assert values["adv_G"] == 0 and values["adv_D"] == 0


def test_lgfs_only_targets_fewshot_slot(toy_root, tmp_path, datasets):
    t = make_trainer(toy_root, tmp_path, datasets, ablate="lgfs_only")
    batches = t.draw_batches()
    fw = t.forward(batches)
    assert fw["c"] == "m" and torch.equal(fw["a_c"], batches["t"])
    assert fw["mode"] is None and fw["s_tilde"] is fw["s_w"]


def test_no_wmi_uses_target_anchor_code(toy_root, tmp_path, datasets):
    t = make_trainer(toy_root, tmp_path, datasets, ablate="no_wmi")
    fw = t.forward(t.draw_batches())
    expected = t.bundle.decode(fw["content"], fw["codes"]["m"])
    assert torch.allclose(fw["s_w"], expected, atol=1e-6)


# -- fit -------------------------------------------------------------------------


def test_fit_smoke_and_resume(toy_root, tmp_path, datasets):
    cfg = TrainingConfig(**tiny_training_overrides(toy_root, tmp_path / "run", iterations=10,
                                                   checkpoint_every=5))
    ckpt = fit(cfg, datasets, progress_every=0)
    _, meta, _ = load_checkpoint(ckpt)
    assert meta["step"] == 10
    assert (tmp_path / "run" / "config.txt").is_file()
    assert [s for s, _ in read_metrics(tmp_path / "run" / "metrics.tsv")["total_G"]] == \
        list(range(1, 11))
    more = TrainingConfig(**tiny_training_overrides(toy_root, tmp_path / "run", iterations=12,
                                                    resume=True))
    _, meta, _ = load_checkpoint(fit(more, datasets, progress_every=0))
    assert meta["step"] == 12
    assert [s for s, _ in read_metrics(tmp_path / "run" / "metrics.tsv")["total_G"]] == \
        list(range(1, 13))


def test_resume_matches_uninterrupted_run(toy_root, tmp_path, datasets):
    straight = TrainingConfig(**tiny_training_overrides(toy_root, tmp_path / "a", iterations=4))
    fit(straight, datasets, progress_every=0)
    half = TrainingConfig(**tiny_training_overrides(toy_root, tmp_path / "b", iterations=2))
    fit(half, datasets, progress_every=0)
    rest = TrainingConfig(**tiny_training_overrides(toy_root, tmp_path / "b", iterations=4,
                                                    resume=True))
    fit(rest, datasets, progress_every=0)
    assert (tmp_path / "a" / "metrics.tsv").read_text() == \
        (tmp_path / "b" / "metrics.tsv").read_text()


def test_fit_is_reproducible(toy_root, tmp_path, datasets):
    for name in ("x", "y"):
        fit(TrainingConfig(**tiny_training_overrides(toy_root, tmp_path / name)), datasets,
            progress_every=0)
    assert (tmp_path / "x" / "metrics.tsv").read_text() == \
        (tmp_path / "y" / "metrics.tsv").read_text()


def test_one_shot_regime(toy_root, tmp_path):
    cfg = TrainingConfig(**tiny_training_overrides(toy_root, tmp_path, fewshot_size=1))
    ds = load_datasets(cfg)
    assert len(ds.fewshot) == 1
    _, meta, _ = load_checkpoint(fit(cfg, ds, progress_every=0))
    assert meta["step"] == cfg.iterations


def test_fit_reports_missing_data(tmp_path):
    cfg = TrainingConfig(**tiny_training_overrides(tmp_path / "nowhere", tmp_path / "out"))
    with pytest.raises(OSError, match="nowhere"):
        fit(cfg)


# -- config and metrics files ---------------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = TrainingConfig(iterations=7, lr_gen=3e-4, ablate="no_wmi", resume=True)
    loaded = load_config(write_config(cfg, tmp_path / "c.txt"))
    assert loaded == cfg
    assert format_config(loaded) == format_config(cfg)


def test_config_precedence(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# comment\niterations = 50\nbatch_size = 2  # trailing\n")
    cfg = load_config(path, {"iterations": 9})
    assert cfg.iterations == 9 and cfg.batch_size == 2 and cfg.n_patches == 8


@pytest.mark.parametrize("text", ["bogus = 1\n", "iterations = many\n", "no equals sign\n",
                                  "exemplar_prob = 1.5\n", "batch_size = 0\n",
                                  "anchors = m,id\n", "ablate = no_style,no_patch\n"])
def test_config_errors(tmp_path, text):
    path = tmp_path / "c.txt"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)


def test_metrics_round_trip(tmp_path):
    path = tmp_path / "m.tsv"
    with open(path, "w") as fh:
        write_metrics(fh, 1, {"b": 0.1, "a": 1 / 3})
        write_metrics(fh, 2, {"a": 2.0})
    series = read_metrics(path)
    assert series["a"] == [(1, 1 / 3), (2, 2.0)]
    assert series["b"] == [(1, 0.1)]
    assert path.read_text().splitlines()[0] == "1\ta\t0.3333333333333333"

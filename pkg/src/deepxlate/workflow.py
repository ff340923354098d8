"""Config-driven stage sequencing behind the CLI subcommands.

Directory layout under ``paths.work_dir``::

    stats/stats_<domain>_L<level>.json   channel statistics
    cache/<domain>/                      normalized pyramid records (FeatureStore)
    checkpoints/<stage>.ckpt             deepest, conditional<i>, inverter_<domain>_L<i>
    logs/metrics.csv, logs/<stage>_loss.png, logs/effective_config_<cmd>.yaml
    scores.tsv                           evaluation ledger
"""

from __future__ import annotations

import logging
import os
from typing import Dict, List, Optional

import torch

from . import checkpoint as ckpt
from .config import RunConfig, dump_config
from .data import CocoFilter, build_coco_domain, build_folder_domain, item_rng, load_and_augment
from .encoder import EncoderProfile, extract_batch, load_vgg19_profile, make_toy_encoder
from .evaluation import (
    EvalError,
    ProfileExtractor,
    TorchScriptExtractor,
    append_score,
    collect_embeddings,
    frechet_distance,
    project_2d,
    write_point_table,
)
from .featnorm import (
    FeatureStore,
    compute_domain_stats,
    load_stats,
    normalize,
    save_stats,
    stats_path,
)
from .networks import build_conditional_translator, build_deep_translator
from .pipeline import (
    Cascade,
    CascadeSpec,
    _list_inputs,
    batch_translate,
    checkpoint_file,
    inverter_stage,
    stage_name,
)
from .plotting import plot_loss_trace, scatter_projection
from .training import (
    ConditionalTrainer,
    DeepestTrainer,
    InverterTrainer,
    StageOrderError,
    StageSchedule,
)

log = logging.getLogger(__name__)


class ArtifactConflict(Exception):
    """An existing artifact was produced by a different configuration."""


def build_profile(cfg: RunConfig) -> EncoderProfile:
    e = cfg.encoder
    if e.profile == "toy":
        return make_toy_encoder(e.seed, e.channels, e.input_side, e.embedding_dim)
    return load_vgg19_profile(e.weights)


def build_domain(cfg: RunConfig, key: str):
    d = cfg.domains[key]
    if d.folder:
        return build_folder_domain(d.folder, key)
    return build_coco_domain(CocoFilter(d.coco_annotations, d.category, d.min_area_fraction), d.coco_images, key)


def log_effective_config(cfg: RunConfig, command: str) -> None:
    text = dump_config(cfg)
    log.info("effective config (hash %s):\n%s", cfg.config_hash, text)
    logs = cfg.dir("logs")
    os.makedirs(logs, exist_ok=True)
    with open(os.path.join(logs, f"effective_config_{command}.yaml"), "w") as fh:
        fh.write(f"# config_hash: {cfg.config_hash}\n{text}")


def _guard_stats(path: str, cfg: RunConfig, force: bool) -> None:
    if os.path.exists(path) and not force:
        old = load_stats(path).config_hash
        if old != cfg.config_hash:
            raise ArtifactConflict(f"{path} belongs to config {old}; rerun with --force to replace it")


def _guard_checkpoint(path: str, cfg: RunConfig, force: bool) -> None:
    if os.path.exists(path) and not force:
        _, meta, _ = ckpt.read_archive(path)
        if meta.get("config_hash") != cfg.config_hash:
            raise ArtifactConflict(
                f"{path} belongs to config {meta.get('config_hash')}; use --force to overwrite"
            )


def cache_levels(cfg: RunConfig) -> List[int]:
    return sorted(cfg.levels)


def run_stats(cfg: RunConfig, force: bool = False, batch_size: int = 8) -> Dict[str, dict]:
    """Channel stats for all five levels, then normalized caches for the trained levels."""
    profile = build_profile(cfg)
    out = {}
    for key in ("A", "B"):
        ds = build_domain(cfg, key)
        paths = {lvl: stats_path(cfg.dir("stats"), key, lvl) for lvl in range(1, 6)}
        for p in paths.values():
            _guard_stats(p, cfg, force)
        stats = compute_domain_stats(ds, profile, batch_size=batch_size, config_hash=cfg.config_hash)
        for lvl, st in stats.items():
            save_stats(st, paths[lvl])
        store = FeatureStore.create(os.path.join(cfg.dir("cache"), key), key, "normalized", cfg.config_hash)
        levels = cache_levels(cfg)
        side = profile.input_side
        for item in ds.items:
            variants = [("eval", item.id, None)]
            variants += [("train", f"{item.id}#aug{k}", item_rng(cfg.seed, item.id, k))
                         for k in range(cfg.augment_copies)]
            for policy, rec_id, rng in variants:
                img = load_and_augment(item, policy, rng, side)
                feats = extract_batch(img, profile)
                store.write(rec_id, 0, img * 2 - 1)
                for lvl in levels:
                    store.write(rec_id, lvl, normalize(feats[lvl][0], stats[lvl]))
        log.info("domain %s: %d items, stats + cache written", key, len(ds))
        out[key] = stats
    return out


def _open_cache(cfg: RunConfig, domain: str) -> FeatureStore:
    store = FeatureStore.open(os.path.join(cfg.dir("cache"), domain))
    if store.config_hash != cfg.config_hash:
        raise ArtifactConflict(
            f"feature cache for {domain} belongs to config {store.config_hash}; rerun `stats`"
        )
    return store


def _schedule(cfg: RunConfig, inverter: bool = False) -> StageSchedule:
    s = cfg.schedule
    return StageSchedule(
        epochs=s.epochs, lr=s.lr, adam_beta1=s.beta1, adam_beta2=s.beta2,
        batch_size=s.inverter_batch_size if inverter else s.batch_size,
        critic_steps_per_gen=s.critic_steps, seed=cfg.seed,
    )


def load_translator_stack(cfg: RunConfig, profile: EncoderProfile, level: int, target: str) -> Dict[int, torch.nn.Module]:
    """Trained translators into ``target`` for every level deeper than ``level``."""
    stack = {}
    net_cfg = cfg.network_config
    for lvl in range(5, level, -1):
        path = checkpoint_file(cfg.dir("checkpoints"), stage_name(lvl))
        if not os.path.exists(path):
            raise StageOrderError(
                f"cannot train level {level}: prerequisite stage {stage_name(lvl)} (level {lvl}) "
                f"has no checkpoint at {path}"
            )
        net = build_deep_translator(profile, net_cfg) if lvl == 5 else build_conditional_translator(profile, lvl, net_cfg)
        ckpt.load_networks(path, stage_name(lvl), {f"G_{target}": net}, cfg.config_hash)
        stack[lvl] = net
    return stack


def make_trainer(cfg: RunConfig, kind: str, level: Optional[int] = None, domain: Optional[str] = None):
    metrics = os.path.join(cfg.dir("logs"), "metrics.csv")
    w = cfg.loss_weights
    n = cfg.network_config
    if kind == "deepest":
        a5 = _open_cache(cfg, "A").load_level(5)
        b5 = _open_cache(cfg, "B").load_level(5)
        return DeepestTrainer(a5, b5, _schedule(cfg), w, n.gn_groups, n.critic_max_width,
                              cfg.config_hash, metrics)
    if kind == "conditional":
        if level is None or not 1 <= level <= 4:
            raise StageOrderError(f"conditional stage needs --level in 1..4, got {level}")
        if level not in cfg.levels:
            raise StageOrderError(f"level {level} is not among the configured levels {cfg.levels}")
        profile = build_profile(cfg)
        stack_a = load_translator_stack(cfg, profile, level, "A")
        stack_b = load_translator_stack(cfg, profile, level, "B")
        ca, cb = _open_cache(cfg, "A"), _open_cache(cfg, "B")
        fa = {l: ca.load_level(l) for l in range(level, 6)}
        fb = {l: cb.load_level(l) for l in range(level, 6)}
        return ConditionalTrainer(level, fa, fb, stack_a, stack_b, _schedule(cfg), w,
                                  n.controller_width, n.controller_hidden, n.critic_max_width,
                                  cfg.config_hash, metrics)
    if kind == "inverter":
        level = level or cfg.levels[-1]
        domain = domain or "B"
        if domain not in ("A", "B"):
            raise StageOrderError(f"unknown domain {domain!r}")
        store = _open_cache(cfg, domain)
        if level not in store.levels():
            raise StageOrderError(f"no cached level-{level} features for domain {domain}; check `levels`")
        return InverterTrainer(domain, level, store.load_level(level), store.load_level(0),
                               _schedule(cfg, inverter=True), cfg.loss.inverter_l1, cfg.loss.inverter_adv,
                               n.disc_base_width, cfg.config_hash, metrics)
    raise StageOrderError(f"unknown stage kind {kind!r}")


def run_train(cfg: RunConfig, kind: str, level: Optional[int] = None, domain: Optional[str] = None,
              resume: bool = False, force: bool = False, max_steps: Optional[int] = None):
    trainer = make_trainer(cfg, kind, level, domain)
    path = checkpoint_file(cfg.dir("checkpoints"), trainer.stage)
    if resume:
        meta = trainer.resume(path)
        log.info("resumed %s at epoch %d step %d", trainer.stage, meta["epoch"], meta["step"])
    else:
        _guard_checkpoint(path, cfg, force)
    trainer.run(max_steps=max_steps, checkpoint_path=path)
    trainer.save(path)
    metrics = trainer.metrics.path
    if metrics and os.path.exists(metrics):
        plot_loss_trace(metrics, os.path.join(cfg.dir("logs"), f"{trainer.stage}_loss.png"))
    log.info("%s: %d generator steps, %d critic updates -> %s", trainer.stage,
             trainer.counters["generator_updates"], trainer.counters["critic_updates"], path)
    return trainer


def load_all_stats(cfg: RunConfig) -> Dict[str, Dict[int, object]]:
    out = {}
    for key in ("A", "B"):
        out[key] = {}
        for lvl in range(1, 6):
            p = stats_path(cfg.dir("stats"), key, lvl)
            if os.path.exists(p):
                st = load_stats(p)
                if st.config_hash != cfg.config_hash:
                    raise ArtifactConflict(f"{p} belongs to config {st.config_hash}; rerun `stats`")
                out[key][lvl] = st
    return out


def build_cascade(cfg: RunConfig, direction: str = "AtoB", profile: Optional[EncoderProfile] = None) -> Cascade:
    spec = CascadeSpec(direction, cfg.dir("checkpoints"), load_all_stats(cfg), list(cfg.levels),
                       config_hash=cfg.config_hash)
    return Cascade(spec, profile or build_profile(cfg), cfg.network_config)


def run_translate(cfg: RunConfig, inp: str, out: str, direction: str = "AtoB"):
    from .data import DomainItem, save_image

    cascade = build_cascade(cfg, direction)
    if os.path.isdir(inp):
        return batch_translate(inp, cascade, out)
    image = load_and_augment(DomainItem(os.path.basename(inp), inp), "eval", side=cascade.profile.input_side)
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    save_image(cascade.translate_image(image), out)
    return [{"input": inp, "output": out, "direction": direction, "config_hash": cfg.config_hash, "status": "ok"}]


def run_evaluate(cfg: RunConfig, source: str, target: str, translated: str, direction: str = "AtoB",
                 method: str = "tsne", out_dir: Optional[str] = None, extractor_path: Optional[str] = None,
                 extractor_side: int = 299, dataset: Optional[str] = None) -> dict:
    """Fréchet distance translated vs target, plus a labelled 2-D projection table and figure."""
    if extractor_path:
        extractor = TorchScriptExtractor(extractor_path, extractor_side)
    else:
        profile = build_profile(cfg)
        if profile.embedding_dim is None:
            raise EvalError("encoder profile has no embedding head; set encoder.embedding_dim or pass --extractor")
        extractor = ProfileExtractor(profile)
    sets = {}
    for label, folder in (("source", source), ("target", target), ("translated", translated)):
        paths = _list_inputs(folder)
        sets[label] = collect_embeddings(paths, extractor, label)
    score = frechet_distance(sets["translated"], sets["target"])
    row = append_score(os.path.join(cfg.paths.work_dir, "scores.tsv"), dataset or cfg.name, direction, score,
                       sets["translated"].n, sets["target"].n, extractor.tag, cfg.config_hash)
    out_dir = out_dir or os.path.join(cfg.dir("eval"), direction)
    os.makedirs(out_dir, exist_ok=True)
    pts, labels = project_2d(list(sets.values()), method, seed=cfg.seed)
    table = os.path.join(out_dir, f"projection_{method}.tsv")
    write_point_table(table, pts, labels)
    fig = scatter_projection(pts, labels, os.path.join(out_dir, f"projection_{method}.png"),
                             title=f"{direction} ({method})")
    log.info("FD(translated, target) = %.4f over %d/%d images", score, sets["translated"].n, sets["target"].n)
    return {"score": score, "ledger_row": row, "points": table, "figure": fig}

"""Command-line entry point: ``cdrlab <command> [options]``.

Every command reads one JSON config (``--config`` or ``$CDR_CONFIG``) plus
``--set section.key=value`` overrides. Failures print a single line
``error kind=<kind> detail=<json string>`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, config_from_dict, load_config, save_config
from .datagen import DatasetError, family_pools, generate_dataset, load_dataset, save_dataset
from .evaluation import (
    EvalError,
    invariance_eval,
    invariance_sets,
    nearest_neighbors,
    prop1_experiment,
    retrieval_eval,
    retrieval_sets,
)
from .models import encode_batched
from .planner import PlanError, planning_eval
from .renderer import render, to_ppm, write_ppm
from .training import TrainingDiverged, build_models, train

EXIT_CODES = {"usage": 2, "missing_file": 3, "hash_mismatch": 4, "invalid_input": 5, "diverged": 6, "invalid_config": 7}


class CommandError(Exception):
    def __init__(self, kind: str, detail: str):
        super().__init__(detail)
        self.kind = kind
        self.detail = detail


def _fail(kind: str, detail: str) -> int:
    print(f"error kind={kind} detail={json.dumps(detail)}", file=sys.stderr)
    return EXIT_CODES.get(kind, 1)


def _hex(digest: bytes) -> str:
    return digest.hex()


def _need(path: str | None, what: str) -> Path:
    if not path:
        raise CommandError("usage", f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise CommandError("missing_file", f"{what} not found: {p}")
    return p


def _with(cfg: ExperimentConfig, section: str, **changes) -> ExperimentConfig:
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **changes)})


def _emit(tag: str, values: dict, out: str | None = None) -> None:
    parts = " ".join(f"{k}={v:.17g}" if isinstance(v, float) else f"{k}={v}" for k, v in values.items())
    print(f"{tag} {parts}")
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(json.dumps(values, indent=2, sort_keys=True) + "\n")


# commands

def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    paradigm = args.paradigm
    n = args.episodes
    if n is not None and n < 1:
        raise CommandError("usage", "--episodes must be positive")
    ds = generate_dataset(cfg, paradigm, n)
    out = Path(args.out or Path(cfg.output_dir) / f"{paradigm}.cdrd")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    _emit("dataset", {"path": str(out), "paradigm": paradigm, "episodes": len(ds),
                      "transitions": ds.n_transitions(), "data_hash": _hex(ds.config_hash)})
    return 0


def _check_hash(kind: str, expected: bytes | str, found: bytes | str, force: bool) -> None:
    e = expected.hex() if isinstance(expected, bytes) else expected
    f = found.hex() if isinstance(found, bytes) else found
    if e != f and not force:
        raise CommandError("hash_mismatch", f"{kind} hash {f[:16]} does not match config {e[:16]}; pass --force to override")


def cmd_train(cfg: ExperimentConfig, args) -> int:
    path = _need(args.dataset, "dataset")
    ds = load_dataset(path)
    _check_hash("dataset", cfg.data_hash(), ds.config_hash, args.force)
    loss = args.loss.replace("-", "_")
    cfg = _with(cfg, "training", paradigm=ds.paradigm, loss=loss).validate()
    out = Path(args.out or Path(cfg.output_dir) / f"{ds.paradigm}-{loss}")
    out.mkdir(parents=True, exist_ok=True)
    res = train(cfg, ds, log=None if args.quiet else print)
    manifest = {
        "config": cfg.to_dict(), "config_hash": _hex(cfg.hash()), "model_hash": _hex(cfg.model_hash()),
        "data_hash": _hex(ds.config_hash), "loss": loss, "paradigm": ds.paradigm,
        "kind": cfg.training.similarity_kind, "best_epoch": res.best_epoch, "episodes": len(ds),
    }
    save_checkpoint(out / "model.ckpt", res.params, manifest)
    (out / "metrics.log").write_text("\n".join(res.metrics) + "\n")
    (out / "timing.log").write_text("\n".join(res.timing) + "\n")
    save_config(cfg, out / "config.json")
    _emit("trained", {"checkpoint": str(out / "model.ckpt"), "best_epoch": res.best_epoch,
                      "best_val_loss": res.best_val, "epochs_run": res.epochs_run})
    return 0


def _load_models(cfg: ExperimentConfig, args):
    """Models from a checkpoint; the model sections come from the checkpoint's own config."""
    params, manifest = load_checkpoint(_need(args.checkpoint, "checkpoint"))
    # paradigm and loss come from train's dataset and --loss, not from the config
    expected = _with(cfg, "training", paradigm=manifest.get("paradigm", cfg.training.paradigm),
                     loss=manifest.get("loss", cfg.training.loss))
    _check_hash("checkpoint", expected.model_hash(), manifest.get("model_hash", ""), args.force)
    trained = config_from_dict(manifest["config"])
    cfg = dataclasses.replace(cfg, seed=trained.seed, scene=trained.scene, renderer=trained.renderer,
                              model=trained.model, training=trained.training)
    models = build_models(cfg, manifest["paradigm"], params, manifest["kind"])
    return cfg, models, manifest


def cmd_eval_retrieval(cfg: ExperimentConfig, args) -> int:
    cfg, models, manifest = _load_models(cfg, args)
    queries, pool = retrieval_sets(cfg, manifest["paradigm"], args.pool, args.queries, args.split)
    rep = retrieval_eval(models.encoder, queries, pool, split=args.split)
    _emit("retrieval", rep.as_dict(), args.report)
    if args.dump:
        _dump_pairs(models.encoder, queries, pool, Path(args.dump), args.dump_count)
    return 0


def _dump_pairs(encoder, queries, pool, out: Path, count: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    qz = encode_batched(encoder, queries.images[:count])
    pz = encode_batched(encoder, pool.images)
    for i, j in enumerate(nearest_neighbors(qz, pz)):
        pair = np.concatenate([queries.images[i], pool.images[j]], axis=1)
        write_ppm(out / f"pair_{i:03d}.ppm", pair)


def cmd_eval_invariance(cfg: ExperimentConfig, args) -> int:
    cfg, models, manifest = _load_models(cfg, args)
    states, pairs = invariance_sets(cfg, manifest["paradigm"], args.pairs, args.split)
    rep = invariance_eval(models.encoder, states, pairs, cfg.renderer.resolution, min_pairs=args.min_pairs)
    _emit("invariance", rep.as_dict(), args.report)
    return 0


def cmd_prop1(cfg: ExperimentConfig, args) -> int:
    rep = prop1_experiment(cfg.prop1, args.regime, args.trials)
    for t in rep.trials:
        print(f"trial seed={t.seed} ratio={t.ratio:.6g} loss_full={t.loss_full:.6g} "
              f"loss_restricted={t.loss_restricted:.6g} loss_substituted={t.loss_substituted:.6g} "
              f"converged={t.converged}")
    _emit("prop1", {"regime": args.regime, "trials": len(rep.trials), "median_ratio": rep.median_ratio,
                    "below_0.05": rep.count_below(0.05), "max_restricted_gap": rep.max_restricted_gap,
                    "max_substituted_gap": rep.max_substituted_gap, "converged": rep.all_converged}, args.report)
    return 0


def cmd_plan(cfg: ExperimentConfig, args) -> int:
    cfg, models, manifest = _load_models(cfg, args)
    if manifest["paradigm"] != "controlled":
        raise CommandError("invalid_input", "planning needs a controlled-paradigm checkpoint")
    rep = planning_eval(cfg, models.encoder, models.forward, args.goal_domain, args.policy, args.episodes)
    for i, ep in enumerate(rep.episodes):
        print(f"episode index={i} initial={ep.initial_distance:.6g} final={ep.final_distance:.6g} "
              f"steps={len(ep.actions)} reached={ep.reached}")
    _emit("plan", rep.as_dict(), args.report)
    return 0


def cmd_render(cfg: ExperimentConfig, args) -> int:
    from .datagen import derive_seed, gen_controlled_episode, gen_uncontrolled_episode

    scene = cfg.scene.for_paradigm(args.paradigm)
    gen = gen_controlled_episode if args.paradigm == "controlled" else gen_uncontrolled_episode
    train_pool, ood_pool = family_pools(cfg)
    pool = ood_pool if args.split == "ood" else train_pool
    ep = gen(derive_seed(cfg.seed, args.paradigm, "render", args.index), scene.episode_length, scene, pool,
             **cfg.renderer.domain_kwargs())
    if not 0 <= args.frame < ep.length:
        raise CommandError("usage", f"--frame must be in [0, {ep.length})")
    img = render(ep.states[args.frame], ep.domain_a, cfg.renderer.resolution)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(to_ppm(img))
    _emit("render", {"path": str(out), "frame": args.frame, "seed": ep.seed})
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-invariance": cmd_eval_invariance,
    "prop1": cmd_prop1,
    "plan": cmd_plan,
    "render": cmd_render,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CommandError("usage", f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (default: $CDR_CONFIG or built-in defaults)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config leaf, e.g. training.epochs=5")
    common.add_argument("--force", action="store_true", help="accept config hash mismatches")
    common.add_argument("--report", help="also write the report as JSON here")

    parser = _Parser(prog="cdrlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate a paired-domain dataset")
    p.add_argument("--paradigm", choices=("controlled", "uncontrolled"), default="controlled")
    p.add_argument("--episodes", type=int)
    p.add_argument("--out")

    p = sub.add_parser("train", parents=[common], help="train encoder and predictor")
    p.add_argument("--loss", choices=("cdr", "naive", "same-domain"), default="cdr")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval-retrieval", parents=[common], help="nearest-neighbour retrieval report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pool", type=int)
    p.add_argument("--queries", type=int)
    p.add_argument("--split", choices=("in", "ood"), default="ood")
    p.add_argument("--dump", help="directory for (query, retrieved) PPM pairs")
    p.add_argument("--dump-count", type=int, default=8)

    p = sub.add_parser("eval-invariance", parents=[common], help="latent invariance report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", type=int)
    p.add_argument("--split", choices=("in", "ood"), default="in")
    p.add_argument("--min-pairs", type=int, default=200)

    p = sub.add_parser("prop1", parents=[common], help="separable-encoder domain-weight experiment")
    p.add_argument("--regime", choices=("indep", "dep"), default="indep")
    p.add_argument("--trials", type=int)

    p = sub.add_parser("plan", parents=[common], help="latent MPC planning benchmark")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--goal-domain", choices=("same", "different"), default="same")
    p.add_argument("--policy", choices=("mpc", "random"), default="mpc")

    p = sub.add_parser("render", parents=[common], help="render one frame of a seeded episode to PPM")
    p.add_argument("--paradigm", choices=("controlled", "uncontrolled"), default="controlled")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--split", choices=("in", "ood"), default="in")
    p.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, args.set)
        return COMMANDS[args.command](cfg, args)
    except CommandError as exc:
        return _fail(exc.kind, exc.detail)
    except ConfigError as exc:
        return _fail("invalid_config", str(exc))
    except (DatasetError, CheckpointError) as exc:
        return _fail("invalid_input", str(exc))
    except TrainingDiverged as exc:
        return _fail("diverged", str(exc))
    except (EvalError, PlanError, ValueError) as exc:
        return _fail("invalid_input", str(exc))
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc))


if __name__ == "__main__":
    sys.exit(main())

"""``gea`` command-line tool.

Every command is deterministic given its inputs and ``--seed``.  Failures
print one line ``<CODE>: <message>`` to stderr and exit with 2 (validation),
3 (numeric) or 4 (I/O).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import __version__
from .errors import GEAError, NumericError, ValidationError
from .exports import (PROJECTION_COLUMNS, SWEEP_COLUMNS, export_heatmap, heatmap_rows,
                      omega_sweep, project_2d, write_csv)
from .feature_store import FeatureBundle, Sample, build_manifest, ingest_manifest, write_feature_bundle
from .fixture import make_fixture
from .flow_sampler import GenerationConfig, generate_for_text
from .retrieval_eval import SCHEMA_VERSION, digest, evaluate
from .trainer import ABLATIONS, ABLATION_SWITCHES, Trainer, TrainConfig, load_model

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
log = logging.getLogger("gea")


class RunDirectory:
    """An output directory held under an exclusive lock for one command."""

    def __init__(self, path, command: str, settings: dict):
        self.path = Path(path)
        self.command = command
        self.settings = settings
        self._lock = None

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.path / ".gea.lock"))
        try:
            self._lock.acquire(timeout=0)
        except Timeout:
            raise OSError(f"{self.path} is locked by another gea process") from None
        self.write_json("config.json", {"command": self.command, "config": self.settings,
                                        "config_digest": digest(self.settings)})
        return self

    def __exit__(self, *exc):
        self._lock.release()
        return False

    def write_json(self, name: str, obj) -> Path:
        path = self.path / name
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps({"schema_version": SCHEMA_VERSION, **obj}, indent=1, default=str) + "\n")
        os.replace(tmp, path)
        return path


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{p}: no such file")
    return p


def _manifest(path):
    return ingest_manifest(_require_file(path))


def _model(path):
    return load_model(_require_file(path))


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"expected comma-separated numbers, got {text!r}") from None


def _load_config(args) -> dict:
    if not args.config:
        return {}
    try:
        raw = json.loads(_require_file(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{args.config}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ValidationError(f"{args.config}: config must be a JSON object")
    return raw


def _train_setup(args):
    raw = _load_config(args)
    train_path = args.train or raw.get("train_manifest")
    val_path = args.val or raw.get("val_manifest")
    if not train_path:
        raise ValidationError("no training manifest (use --train or train_manifest in the config)")
    base = Path(args.config).parent if args.config else Path(".")
    resolve = lambda p: p if Path(p).is_absolute() or not args.config else str(base / p)
    cfg = {k: v for k, v in raw.items() if k not in ("train_manifest", "val_manifest", "schema_version")}
    if args.seed is not None:
        cfg["seed"] = args.seed
    config = TrainConfig.from_dict(cfg)
    train = _manifest(resolve(train_path) if not args.train else args.train)
    val = _manifest(resolve(val_path) if not args.val else args.val) if val_path else None
    return config, train, val


def _out(args, default: str) -> Path:
    return Path(args.out or default)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ingest(args):
    m = _manifest(args.manifest)
    summary = {"split": m.split, "records": len(m), "identities": m.num_identities,
               "embedding_dim": m.embedding_dim,
               "with_generated": sum(f.generated is not None for f in m.features.values()),
               "with_text_features": sum(f.text is not None for f in m.features.values()),
               "manifest_digest": digest(m.to_json())}
    if args.out:
        with RunDirectory(args.out, "ingest", {"manifest": str(args.manifest)}) as run:
            run.write_json("ingest.json", summary)
    print(json.dumps(summary, sort_keys=True))


def cmd_make_fixture(args):
    extra = _load_config(args)
    settings = {"num_identities": args.identities, "texts_per_identity": args.texts, "dim": args.dim,
                "noise": args.noise, "seed": args.seed or 0, **extra}
    with RunDirectory(_out(args, "fixture"), "make-fixture", settings) as run:
        try:
            manifests = make_fixture(run.path, **settings)
        except TypeError as exc:
            raise ValidationError(f"bad fixture option: {exc}") from None
    print(json.dumps({k: len(v) for k, v in manifests.items()}, sort_keys=True))


def cmd_sample_flow(args):
    m = _manifest(args.manifest)
    gen = GenerationConfig(steps=args.steps, guidance_scale=args.guidance, seed=args.seed or 0)
    out = _out(args, "generated")
    settings = {"manifest": str(args.manifest), "generation": gen.__dict__}
    with RunDirectory(out, "sample-flow", settings) as run:
        records = []
        for rec in m.records:
            bundle = generate_for_text(rec.text, gen, m.embedding_dim, key=rec.sample_id)
            rel = f"features/{rec.sample_id}.gen.geaf"
            write_feature_bundle(bundle, run.path / rel)
            keep = lambda ref: ref if ref is None or ref.startswith("base64:") or Path(ref).is_absolute() \
                else os.path.relpath((m.root or Path(".")) / ref, run.path)
            records.append(Sample(rec.sample_id, rec.identity, rec.text, keep(rec.image_feature),
                                  rel, keep(rec.text_feature)))
        updated = build_manifest(records, m.embedding_dim, m.split, run.path)
        path = run.path / Path(args.manifest).name
        path.write_text(json.dumps(updated.to_json(), indent=1) + "\n")
    print(path)


def _train_one(config, train, val, out_dir):
    trainer = Trainer(train, config, val)
    history = trainer.fit(out_dir / "checkpoints")
    report = trainer.evaluate() if val is not None else None
    return trainer, history, report


def cmd_train(args):
    config, train, val = _train_setup(args)
    with RunDirectory(_out(args, "run"), "train", config.to_dict()) as run:
        trainer, history, report = _train_one(config, train, val, run.path)
        run.write_json("reports/history.json", {"config_digest": config.digest(), "history": history})
        if report is not None:
            run.write_json("reports/final.json", report.to_json())
            print(report.table())


def cmd_eval(args):
    m = _manifest(args.manifest)
    model, config = _model(args.checkpoint)
    omega = config.test_omega if args.omega is None else args.omega
    rep = evaluate(m, model, omega, args.rerank, config.digest(), config.generated_policy)
    if args.out:
        with RunDirectory(args.out, "eval", {"manifest": str(args.manifest),
                                             "checkpoint": str(args.checkpoint), "omega": omega}) as run:
            run.write_json("report.json", rep.to_json())
    print(rep.table())


def cmd_ablate(args):
    config, train, val = _train_setup(args)
    if val is None:
        raise ValidationError("ablation needs a validation manifest")
    rows = []
    with RunDirectory(_out(args, "ablation"), "ablate", config.to_dict()) as run:
        for ablation in ABLATIONS:
            cfg = config.with_(ablation=ablation)
            _, _, rep = _train_one(cfg, train, val, run.path / ablation)
            tgte, gif = ABLATION_SWITCHES[ablation]
            rows.append((ablation, "yes" if tgte else "no", "yes" if gif else "no",
                         rep.rank1, rep.rank5, rep.rank10, 100 * rep.map))
        write_csv(run.path / "ablation.csv", ("model", "tgte", "gif", "rank1", "rank5", "rank10", "map"), rows)
        run.write_json("ablation.json", {"rows": [dict(zip(("model", "tgte", "gif", "rank1", "rank5",
                                                               "rank10", "map"), r)) for r in rows]})
    print(f"{'Model':<10}{'TGTE':>6}{'GIF':>6}{'R-1':>8}{'R-5':>8}{'R-10':>8}{'mAP':>8}")
    for r in rows:
        print(f"{r[0]:<10}{r[1]:>6}{r[2]:>6}" + "".join(f"{v:>8.2f}" for v in r[3:]))


def cmd_omega_sweep(args):
    m = _manifest(args.manifest)
    model, config = _model(args.checkpoint)
    omegas = _floats(args.omegas)
    rows = omega_sweep(m, model, omegas, config.generated_policy)
    out = _out(args, "sweep")
    with RunDirectory(out, "omega-sweep", {"manifest": str(args.manifest), "omegas": omegas}) as run:
        path = write_csv(run.path / "omega_sweep.csv", SWEEP_COLUMNS, rows)
    print(path)


def cmd_mix(args):
    """Mixed text embeddings ``(1-w) t + w g`` for every record, one feature file each."""
    m = _manifest(args.manifest)
    if not 0.0 <= args.omega <= 1.0:
        raise ValidationError(f"omega {args.omega} outside [0, 1]")
    import torch
    from .model import GEAModel, ModelConfig, manifest_tensors
    if args.checkpoint:
        model, _ = _model(args.checkpoint)
    else:
        model = GEAModel(ModelConfig(embed_dim=m.embedding_dim, fusion_layers=1)).double()
    with torch.no_grad():
        batch = manifest_tensors(m, next(model.parameters()).dtype)
        mixed = model(batch, omega=args.omega, with_fusion=False)["t_cls"].double().numpy()
    if not np.isfinite(mixed).all():
        raise NumericError("mixed embeddings contain non-finite values")
    rows = []
    with RunDirectory(_out(args, "mix"), "mix", {"manifest": str(args.manifest), "omega": args.omega}) as run:
        for sid, vec in zip(batch.sample_ids, mixed):
            rel = f"features/{sid}.mix.geaf"
            write_feature_bundle(FeatureBundle(vec, np.zeros((0, vec.size)), "text"), run.path / rel)
            rows.append((sid, rel, args.omega))
        path = write_csv(run.path / "mixed.csv", ("sample_id", "feature", "omega"), rows)
    print(path)


def cmd_export_heatmap(args):
    m = _manifest(args.manifest)
    model, config = _model(args.checkpoint)
    weights = export_heatmap(m, model, args.sample, args.branch, config.generated_policy)
    out = Path(args.out or f"heatmap_{args.sample}.csv")
    csv_path = out if out.suffix.lower() == ".csv" else out.with_suffix(".csv")
    write_csv(csv_path, ("query_index", "key_index", "weight"), heatmap_rows(weights))
    if out.suffix.lower() == ".png":
        try:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            log.warning("matplotlib not installed; wrote CSV only")
        else:
            fig, ax = plt.subplots(figsize=(4, 4))
            ax.imshow(weights, cmap="viridis", aspect="auto")
            ax.set_xlabel("generated token")
            ax.set_ylabel(f"{args.branch} token")
            fig.savefig(out, dpi=120, bbox_inches="tight")
            plt.close(fig)
    print(csv_path)


def cmd_project_2d(args):
    m = _manifest(args.manifest)
    model = _model(args.checkpoint)[0] if args.checkpoint else None
    rows = project_2d(m, model, args.omega)
    out = Path(args.out or "projection.csv")
    print(write_csv(out, PROJECTION_COLUMNS, rows))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(sub: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    default = argparse.SUPPRESS if sub else None
    p.add_argument("--seed", type=int, default=default, help="random seed")
    p.add_argument("--out", default=default, help="output directory or file")
    p.add_argument("--config", default=default, help="JSON config file")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gea", parents=[_common(False)],
                                     description="Generation-enhanced text-to-image person retrieval.")
    parser.add_argument("--version", action="version", version=f"gea {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True)
    shared = _common(True)

    def add(name, func, help_):
        p = subs.add_parser(name, parents=[shared], help=help_, description=help_)
        p.set_defaults(func=func)
        return p

    p = add("ingest", cmd_ingest, "validate a manifest and load its features")
    p.add_argument("--manifest", required=True)

    p = add("make-fixture", cmd_make_fixture, "write the synthetic identity fixture")
    p.add_argument("--identities", type=int, default=32)
    p.add_argument("--texts", type=int, default=4)
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--noise", type=float, default=1.0)

    p = add("sample-flow", cmd_sample_flow, "generate image features for every record")
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", type=int, default=28)
    p.add_argument("--guidance", type=float, default=7.0)

    for name, func, help_ in (("train", cmd_train, "train one configuration"),
                              ("ablate", cmd_ablate, "train all four ablation settings")):
        p = add(name, func, help_)
        p.add_argument("--train", help="training manifest (overrides train_manifest)")
        p.add_argument("--val", help="validation manifest (overrides val_manifest)")

    p = add("eval", cmd_eval, "evaluate a checkpoint on a val/test manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--omega", type=float)
    p.add_argument("--rerank", action="store_true", help="add fused-branch similarity to the ranking")

    p = add("omega-sweep", cmd_omega_sweep, "evaluate a checkpoint across mix weights")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--omegas", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")

    p = add("mix", cmd_mix, "write mixed text embeddings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--omega", type=float, default=0.6)

    p = add("export-heatmap", cmd_export_heatmap, "cross-attention weights of one sample (CSV, optional PNG)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--branch", choices=("text", "image"), default="text")

    p = add("project-2d", cmd_project_2d, "PCA of image, text and mixed-text embeddings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--omega", type=float, default=0.6)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"{getattr(exc, 'code', 'E_IO') if isinstance(exc, GEAError) else 'E_IO'}: {exc}", file=sys.stderr)
        return EXIT_IO
    except GEAError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

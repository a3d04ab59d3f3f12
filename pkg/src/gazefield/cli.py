"""Command-line interface: ``gazefield <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure (NaN
abort during training), 4 input/output error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import atomic_write
from .config import TrainConfig, load_config
from .errors import CheckpointError, ConfigError, InvalidArgument, NumericFailure
from .experiments import (CalibrationConfig, HelperConfig, ModelPredictor, build_helpers, evaluate_pairs,
                          few_shot_calibration, make_pairs, run_ablation_matrix, split_train_eval)
from .field import LatentCodes
from .synth import SyntheticSubject, generate_dataset, load_dataset, manifest_hash
from .training import finetune_latents, latents_for_subject, load_state, redirect, train

log = logging.getLogger("gazefield")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        over["steps"] = args.steps
    return cfg.with_overrides(**over) if over else cfg


def _dataset(path, train_views: int):
    manifest, samples = load_dataset(path)
    train_s, held = split_train_eval(samples, train_views)
    return manifest, train_s, held


def _write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _helpers(args):
    return build_helpers(HelperConfig(), args.helpers)


def _sample(samples, index: int):
    if not 0 <= index < len(samples):
        raise InvalidArgument(f"sample index {index} out of range (dataset has {len(samples)})")
    return samples[index]


def _latents(state, sample, steps, extractor):
    subject = SyntheticSubject.from_dict(sample.meta["subject"])
    z = latents_for_subject(state, subject)
    masks = (sample.mask_whole_face, sample.mask_face_only, sample.mask_eyes)
    cfg = state.config
    return finetune_latents(state.model, z, sample.image, masks, sample.camera, sample.gaze, steps=steps,
                            lr=cfg.finetune_lr, extractor=extractor if cfg.perceptual else None,
                            weights=cfg.effective_weights())


# --------------------------------------------------------------------------- commands

def cmd_gen_data(args) -> None:
    manifest = generate_dataset(args.subjects, args.views, args.gaze_range, args.seed or 0, args.out,
                                resolution=args.resolution)
    print(f"wrote {len(manifest['samples'])} samples to {args.out} (manifest {manifest_hash(args.out)[:16]})")


def cmd_train(args) -> None:
    cfg = _config(args)
    data = args.data or cfg.dataset
    if not data:
        raise ConfigError("no dataset given (--data or 'dataset' in the config)")
    _, train_s, _ = _dataset(data, args.train_views)
    helpers = _helpers(args)
    out = Path(args.out)
    resume = out / "checkpoint.gznf" if args.resume else None
    state = train(cfg, train_s, out, helpers.aux(), resume=resume)
    print(f"trained {state.step} steps; checkpoint {out / 'checkpoint.gznf'}")


def cmd_finetune(args) -> None:
    state = load_state(args.checkpoint)
    _, samples = load_dataset(args.data)
    sample = _sample(samples, args.sample)
    codes = _latents(state, sample, args.steps, _helpers(args).extractor)
    _write_json(args.out, {"sample": args.sample, "subject_id": int(sample.subject_id), "steps": args.steps,
                           "latents": codes.vector().tolist(), "initial": codes.initial_vector().tolist()})
    print(f"wrote latent codes to {args.out}")


def cmd_redirect(args) -> None:
    state = load_state(args.checkpoint)
    _, samples = load_dataset(args.data)
    sample = _sample(samples, args.sample)
    if args.latents:
        d = json.loads(Path(args.latents).read_text())
        codes = LatentCodes.from_vectors(torch.tensor(d["latents"]), torch.tensor(d["initial"]))
    else:
        codes = _latents(state, sample, args.finetune_steps, _helpers(args).extractor)
    redirect(state.model, codes, np.array([args.pitch, args.yaw]), sample.camera, out_dir=args.out)
    print(f"wrote I_fwo/I_e/I_wf PNGs to {args.out}")


def cmd_eval(args) -> None:
    state = load_state(args.checkpoint)
    _, _, held = _dataset(args.data, args.train_views)
    if not held:
        raise ConfigError(f"dataset has no views at or beyond index {args.train_views} to evaluate on")
    helpers = _helpers(args)
    pairs = make_pairs(held)
    if args.max_pairs is not None:
        pairs = pairs[:args.max_pairs]
    predictor = ModelPredictor(state, helpers.extractor if state.config.perceptual else None,
                               finetune_steps=args.finetune_steps)
    report, rows = evaluate_pairs(predictor, held, pairs, helpers.eval_net, helpers.embedder,
                                  loss_net=helpers.loss_net)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "report.json", (report.to_json() + "\n").encode())
    _write_json(out / "pairs.json", rows)
    print(report.to_json())


def cmd_ablate(args) -> None:
    cfg = _config(args)
    manifest, train_s, held = _dataset(args.data, args.train_views)
    helpers = _helpers(args)
    result = run_ablation_matrix(cfg, train_s, held, helpers, Path(args.out) / "runs",
                                 manifest_hash(args.data), eval_finetune_steps=args.finetune_steps,
                                 max_pairs=args.max_pairs)
    out = Path(args.out)
    atomic_write(out / "ablation.tsv", result["table"].encode())
    _write_json(out / "ablation.json", {k: v for k, v in result.items() if k != "table"})
    print(result["table"], end="")


def cmd_calibrate(args) -> None:
    state = load_state(args.checkpoint)
    _, samples = load_dataset(args.data)
    helpers = _helpers(args)
    by_subject = {}
    for s in samples:
        by_subject.setdefault(int(s.subject_id), []).append(s)
    cal = CalibrationConfig(seed=args.seed or 0)
    pool_size = max(cal.k_values)
    subjects = {sid: (group[:pool_size], group[pool_size:]) for sid, group in by_subject.items()
                if len(group) > pool_size}
    if not subjects:
        raise ConfigError(f"calibration needs subjects with more than {pool_size} views")
    predictor = ModelPredictor(state, helpers.extractor if state.config.perceptual else None,
                               finetune_steps=cal.finetune_steps)
    curve = few_shot_calibration(predictor, helpers.eval_net, subjects, cal)
    _write_json(args.out, {"config": cal.to_dict(), **curve})
    print(json.dumps({k: curve[k] for k in ("k", "real_only", "augmented", "wins")}))


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gazefield", description="Gaze-conditioned feature-field toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=False):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=True)
        sp.add_argument("--helpers", default="artifacts", help="cache directory of the frozen helper networks")
        if config:
            sp.add_argument("--config", default=None, help="JSON or YAML training config")

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    common(g)
    g.add_argument("--subjects", type=int, default=8)
    g.add_argument("--views", type=int, default=30)
    g.add_argument("--gaze-range", type=float, default=0.45)
    g.add_argument("--resolution", type=int, default=64)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    common(t, config=True)
    t.add_argument("--data", default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--train-views", type=int, default=20)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("finetune", help="fit latent codes to one dataset sample")
    common(f)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--sample", type=int, required=True)
    f.add_argument("--steps", type=int, default=200)
    f.set_defaults(func=cmd_finetune)

    r = sub.add_parser("redirect", help="render a sample at a new gaze")
    common(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--sample", type=int, required=True)
    r.add_argument("--pitch", type=float, required=True)
    r.add_argument("--yaw", type=float, required=True)
    r.add_argument("--latents", default=None, help="JSON written by 'finetune'")
    r.add_argument("--finetune-steps", type=int, default=200)
    r.set_defaults(func=cmd_redirect)

    e = sub.add_parser("eval", help="evaluate redirection on held-out views")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--train-views", type=int, default=20)
    e.add_argument("--max-pairs", type=int, default=None)
    e.add_argument("--finetune-steps", type=int, default=50)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate the ablation matrix")
    common(a, config=True)
    a.add_argument("--data", required=True)
    a.add_argument("--steps", type=int, default=None)
    a.add_argument("--train-views", type=int, default=20)
    a.add_argument("--max-pairs", type=int, default=None)
    a.add_argument("--finetune-steps", type=int, default=50)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("calibrate", help="few-shot estimator calibration with generated samples")
    common(c)
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, InvalidArgument) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

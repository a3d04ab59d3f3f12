"""Toy-scale experiment presets shared by the scripts and the acceptance suite.

Every function here caches its result under an artifact directory, keyed
by a hash of the configuration, so a second call only reads JSON.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .config import TrainConfig
from .experiments import (CalibrationConfig, HelperConfig, Helpers, ModelPredictor, RunSpec, build_helpers,
                          few_shot_calibration, run_ablation_matrix, run_and_evaluate, split_train_eval,
                          stable_hash, toy_generator)
from .synth import generate_in_memory
from .training import load_state

log = logging.getLogger(__name__)

# Faster than the 1e-4 default; the toy budget is 5000 steps, not a week.
TOY_LEARNING_RATE = 5e-4
ABLATION_STEPS = 2000
ABLATION_PAIRS = 40
EVAL_FINETUNE_STEPS = 50
TRAIN_VIEWS = 20


def toy_train_config(**overrides) -> TrainConfig:
    return TrainConfig(learning_rate=TOY_LEARNING_RATE).with_overrides(**overrides)


@dataclass
class ToyData:
    train: list
    held: list
    key: str


def toy_data(seed: int = 0) -> ToyData:
    """8 subjects; views 0-19 train the model, views 20-29 are held out."""
    gen = toy_generator(seed)
    train, held = split_train_eval(generate_in_memory(gen), TRAIN_VIEWS)
    return ToyData(train, held, stable_hash(gen.to_dict()))


def helpers_for(artifacts) -> Helpers:
    return build_helpers(HelperConfig(), artifacts)


def main_experiment(artifacts, data: ToyData | None = None) -> dict:
    """Train the full model for 5000 steps and evaluate held-out redirection."""
    data = data or toy_data()
    spec = RunSpec("full", toy_train_config(), eval_finetune_steps=EVAL_FINETUNE_STEPS)
    return run_and_evaluate(spec, data.train, data.held, helpers_for(artifacts), Path(artifacts) / "runs",
                            data.key)


def ablation_experiment(artifacts, data: ToyData | None = None, steps: int = ABLATION_STEPS) -> dict:
    """The architecture and loss ablations at a reduced step budget."""
    data = data or toy_data()
    base = toy_train_config(steps=steps)
    result = run_ablation_matrix(base, data.train, data.held, helpers_for(artifacts), Path(artifacts) / "runs",
                                 data.key, eval_finetune_steps=EVAL_FINETUNE_STEPS, max_pairs=ABLATION_PAIRS)
    out = Path(artifacts)
    (out / "ablation.tsv").write_text(result["table"])
    return result


def calibration_experiment(artifacts, cfg: CalibrationConfig | None = None, test_views: int = 30) -> dict:
    """Few-shot calibration of the eval network on the toy subjects.

    The real pool of each subject is held-out views 20-24 (never seen in
    training); the test set is ``test_views`` further fresh views.
    """
    cfg = cfg or CalibrationConfig()
    main = main_experiment(artifacts)
    helpers = helpers_for(artifacts)
    key = stable_hash({"cal": cfg.to_dict(), "run": main["run_dir"], "test_views": test_views,
                       "helpers": helpers.fingerprints()})
    path = Path(artifacts) / f"calibration-{key}.json"
    if path.exists():
        return json.loads(path.read_text())
    state = load_state(Path(main["run_dir"]) / "checkpoint.gznf")
    gen = toy_generator(views=TRAIN_VIEWS + max(cfg.k_values) + test_views)
    samples = generate_in_memory(gen)
    pool_end = TRAIN_VIEWS + max(cfg.k_values)
    subjects = {}
    for s in samples:
        v = s.meta["view"]
        if v < TRAIN_VIEWS:
            continue
        pool, test = subjects.setdefault(int(s.subject_id), ([], []))
        (pool if v < pool_end else test).append(s)
    predictor = ModelPredictor(state, helpers.extractor if state.config.perceptual else None,
                               finetune_steps=cfg.finetune_steps)
    curve = few_shot_calibration(predictor, helpers.eval_net, subjects, cfg)
    result = {"config": cfg.to_dict(), "run_dir": main["run_dir"], **curve}
    path.write_text(json.dumps(result, indent=2, sort_keys=True))
    return result

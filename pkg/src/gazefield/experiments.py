"""Evaluation protocol, ablation matrix and few-shot calibration.

Heavy intermediate results (helper networks, trained models, metric
reports) are cached in an artifact directory under names derived from a
hash of everything that determines them, so rerunning an experiment with
the same configuration reuses the stored result instead of retraining.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainConfig
from .errors import GazeFieldError, InvalidArgument, NotEstimable
from .estimators import (EstimatorTrainConfig, fingerprint, fresh_copy, images_tensor, load_network,
                         save_network, train_estimator, train_subject_classifier)
from .geometry import pitchyaw_error
from .metrics import MetricReport, cosine_similarity_100, fid_proxy_with_meta, format_table, psnr, ssim
from .synth import (GeneratorConfig, SyntheticSubject, generate_in_memory, generate_sample, oracle_gaze_from_image,
                    render_ground_truth)
from .training import AuxNets, TrainState, finetune_latents, latents_for_subject, load_state, train
from .compositor import render_triplet

log = logging.getLogger(__name__)

PAIRING_SEED = 13


def stable_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------- helper networks

@dataclass
class HelperConfig:
    """Data and budgets for the frozen helper networks."""
    pool: GeneratorConfig = field(default_factory=lambda: GeneratorConfig(
        n_subjects=300, views_per_subject=20, seed=101, subject_offset=1000))
    validation: GeneratorConfig = field(default_factory=lambda: GeneratorConfig(
        n_subjects=20, views_per_subject=20, seed=202, subject_offset=5000))
    gaze_epochs: int = 25
    classifier_epochs: int = 15
    loss_net_seed: int = 1
    eval_net_seed: int = 2
    extractor_seed: int = 3
    embedder_seed: int = 4

    def key(self) -> str:
        return stable_hash(asdict(self))


@dataclass
class Helpers:
    loss_net: torch.nn.Module
    eval_net: torch.nn.Module
    extractor: torch.nn.Module
    embedder: torch.nn.Module

    def aux(self) -> AuxNets:
        return AuxNets(extractor=self.extractor, loss_net=self.loss_net)

    def fingerprints(self) -> dict:
        return {k: fingerprint(getattr(self, k)) for k in ("loss_net", "eval_net", "extractor", "embedder")}


def _split_views(samples, held_out_fraction: float = 0.15):
    """Hold out the last views of every subject (for the classifier gate)."""
    by_subject = {}
    for s in samples:
        by_subject.setdefault(s.subject_id, []).append(s)
    train, held = [], []
    for sid in sorted(by_subject):
        group = sorted(by_subject[sid], key=lambda s: s.meta["view"])
        n_held = max(1, int(round(len(group) * held_out_fraction)))
        train += group[:-n_held]
        held += group[-n_held:]
    return train, held


def build_helpers(cfg: HelperConfig, cache_dir=None) -> Helpers:
    """Train (or load from the cache) the four frozen helper networks."""
    names = ("loss_net", "eval_net", "extractor", "embedder")
    root = Path(cache_dir) / f"helpers-{cfg.key()}" if cache_dir else None
    if root is not None and all((root / f"{n}.gznf").exists() for n in names):
        return Helpers(*(load_network(root / f"{n}.gznf") for n in names))
    log.info("rendering helper training pool")
    pool = generate_in_memory(cfg.pool)
    val = generate_in_memory(cfg.validation)
    gaze_cfg = EstimatorTrainConfig(epochs=cfg.gaze_epochs)
    loss_net = train_estimator(pool, "loss_net", cfg.loss_net_seed, gaze_cfg, val_samples=val)
    eval_net = train_estimator(pool, "eval_net", cfg.eval_net_seed, gaze_cfg, val_samples=val)
    cls_train, cls_val = _split_views(pool)
    cls_cfg = EstimatorTrainConfig(epochs=cfg.classifier_epochs)
    extractor = train_subject_classifier(cls_train, cfg.extractor_seed, cls_cfg, val_samples=cls_val, width=32)
    embedder = train_subject_classifier(cls_train, cfg.embedder_seed, cls_cfg, val_samples=cls_val, width=24,
                                        embed_dim=64)
    helpers = Helpers(loss_net, eval_net, extractor, embedder)
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        for n in names:
            save_network(root / f"{n}.gznf", getattr(helpers, n))
        (root / "validation.json").write_text(json.dumps(
            {n: getattr(helpers, n).validation for n in names}, indent=2, sort_keys=True))
    return helpers


# --------------------------------------------------------------------------- data splits

def toy_generator(seed: int = 0, n_subjects: int = 8, views: int = 30) -> GeneratorConfig:
    return GeneratorConfig(n_subjects=n_subjects, views_per_subject=views, seed=seed)


def split_train_eval(samples, train_views: int = 20):
    """Views [0, train_views) train the model; the remaining views are held out."""
    train = [s for s in samples if s.meta["view"] < train_views]
    held = [s for s in samples if s.meta["view"] >= train_views]
    return train, held


def make_pairs(samples, seed: int = PAIRING_SEED) -> list[tuple[int, int]]:
    """Random (input, target) index pairs within each subject.

    Each subject's samples are shuffled and chained into a cycle, so every
    sample is used once as input and once as target.
    """
    by_subject = {}
    for i, s in enumerate(samples):
        by_subject.setdefault(int(s.subject_id), []).append(i)
    pairs = []
    for sid in sorted(by_subject):
        idx = by_subject[sid]
        if len(idx) < 2:
            continue
        order = np.random.default_rng([seed, sid]).permutation(idx).tolist()
        pairs += [(order[i], order[(i + 1) % len(order)]) for i in range(len(order))]
    return pairs


# --------------------------------------------------------------------------- predictors

class Predictor:
    """Maps an (input, target) sample pair to a redirected image (H, W, 3)."""

    name = "predictor"

    def __call__(self, source, target) -> dict:
        raise NotImplementedError


class OraclePredictor(Predictor):
    """Replays the generator at the target parameters (upper bound)."""

    name = "oracle"

    def __call__(self, source, target) -> dict:
        subject = SyntheticSubject.from_dict(target.meta["subject"])
        img = render_ground_truth(subject, target.gaze, np.zeros(2), target.camera).image
        return {"I_wf": np.round(img * 255) / 255}


class ConstantPredictor(Predictor):
    name = "constant"

    def __init__(self, value: float = 0.5):
        self.value = value

    def __call__(self, source, target) -> dict:
        return {"I_wf": np.full_like(target.image, self.value)}


class IdentityPredictor(Predictor):
    """Returns the input image unchanged (no redirection at all)."""

    name = "identity"

    def __call__(self, source, target) -> dict:
        return {"I_wf": source.image}


class ModelPredictor(Predictor):
    """Fine-tune latents on the input image, then render at the target gaze and camera."""

    name = "model"

    def __init__(self, state: TrainState, extractor=None, finetune_steps: int | None = None,
                 finetune_lr: float | None = None):
        self.state = state
        self.extractor = extractor
        self.steps = state.config.finetune_steps if finetune_steps is None else finetune_steps
        self.lr = state.config.finetune_lr if finetune_lr is None else finetune_lr

    def latents_for(self, source):
        subject = SyntheticSubject.from_dict(source.meta["subject"])
        z = latents_for_subject(self.state, subject)
        masks = (source.mask_whole_face, source.mask_face_only, source.mask_eyes)
        return finetune_latents(self.state.model, z, source.image, masks, source.camera, source.gaze,
                                steps=self.steps, lr=self.lr, extractor=self.extractor,
                                weights=self.state.config.effective_weights())

    @torch.no_grad()
    def render(self, latents, gaze, camera) -> dict:
        i_fwo, i_e, i_wf = render_triplet(self.state.model, latents, gaze, camera)
        to_np = lambda t: None if t is None else t.permute(1, 2, 0).double().numpy()  # noqa: E731
        return {"I_wf": to_np(i_wf), "I_e": to_np(i_e), "I_fwo": to_np(i_fwo)}

    def __call__(self, source, target) -> dict:
        return self.render(self.latents_for(source), target.gaze, target.camera)


# --------------------------------------------------------------------------- evaluation

def leakage_ratio(i_e: np.ndarray, mask_eyes: np.ndarray) -> float:
    """mean |I_e| outside M_e divided by mean |I_e| inside M_e."""
    mag = np.abs(i_e).mean(-1)
    m = np.asarray(mask_eyes, bool)
    if not m.any() or m.all():
        raise InvalidArgument("eye mask must be neither empty nor full")
    inside = mag[m].mean()
    return float(mag[~m].mean() / inside) if inside > 0 else float("inf")


@torch.no_grad()
def _estimate(eval_net, images) -> np.ndarray:
    x = images_tensor_from_arrays(images)
    return eval_net(x).double().numpy()


def images_tensor_from_arrays(images) -> torch.Tensor:
    return torch.tensor(np.stack(images), dtype=torch.float32).permute(0, 3, 1, 2).contiguous()


def evaluate_pairs(predictor: Predictor, samples, pairs, eval_net, embedder, loss_net=None,
                   oracle: bool = True, apply_face_mask: bool = True) -> tuple[MetricReport, list[dict]]:
    """Redirect every pair and aggregate the metric means.

    Gaze and head errors compare the eval network's estimates on the
    redirected and the target image.  Image metrics are computed after
    applying the target's whole-face mask to both images.  When ``oracle``
    is set the analytic iris oracle also measures the redirected gaze
    against the target label, and the eye-stream leakage is recorded.
    """
    if loss_net is not None and fingerprint(loss_net) == fingerprint(eval_net):
        raise InvalidArgument("the evaluation network must differ from the loss network")
    for a, b in pairs:
        if not (0 <= a < len(samples) and 0 <= b < len(samples)):
            raise FileNotFoundError(f"pair ({a}, {b}) refers to a missing sample")
    preds, targets, rows = [], [], []
    for a, b in pairs:
        src, tgt = samples[a], samples[b]
        out = predictor(src, tgt)
        pred = np.clip(np.asarray(out["I_wf"], np.float64), 0, 1)
        m = tgt.mask_whole_face[..., None] if apply_face_mask else 1.0
        p_m, t_m = pred * m, tgt.image * m
        row = {"input": a, "target": b, "subject_id": int(tgt.subject_id),
               "ssim": ssim(p_m, t_m), "psnr": psnr(p_m, t_m),
               "label_gap_deg": float(np.rad2deg(pitchyaw_error(src.gaze, tgt.gaze)))}
        if oracle:
            subject = SyntheticSubject.from_dict(tgt.meta["subject"])
            try:
                g = oracle_gaze_from_image(pred, subject, tgt.camera)
                row["oracle_gaze_deg"] = float(np.rad2deg(pitchyaw_error(g, tgt.gaze)))
            except NotEstimable:
                row["oracle_gaze_deg"] = None
            if out.get("I_e") is not None:
                row["leakage"] = leakage_ratio(out["I_e"], tgt.mask_eyes)
        preds.append(p_m)
        targets.append(t_m)
        rows.append(row)
    est_p = _estimate(eval_net, preds)
    est_t = _estimate(eval_net, targets)
    gaze_err = np.rad2deg(pitchyaw_error(est_p[:, :2], est_t[:, :2]))
    head_err = np.rad2deg(pitchyaw_error(est_p[:, 2:4], est_t[:, 2:4]))
    with torch.no_grad():
        emb_p = embedder.embedding(images_tensor_from_arrays(preds)).double().numpy()
        emb_t = embedder.embedding(images_tensor_from_arrays(targets)).double().numpy()
    ids = []
    for i, row in enumerate(rows):
        row["gaze_deg"], row["head_deg"] = float(gaze_err[i]), float(head_err[i])
        try:
            ids.append(cosine_similarity_100(emb_p[i], emb_t[i]))
        except GazeFieldError:
            ids.append(0.0)
        row["identity"] = ids[-1]
    fid, fid_meta = fid_proxy_with_meta(np.stack(preds), np.stack(targets), eval_net) if len(preds) >= 2 \
        else (0.0, {})
    meta = {"predictor": predictor.name, "fid": fid_meta}
    if oracle:
        vals = [r["oracle_gaze_deg"] for r in rows]
        ok = [v for v in vals if v is not None]
        meta["oracle_gaze_deg"] = float(np.mean(ok)) if ok else None
        meta["oracle_failures"] = len(vals) - len(ok)
        leak = [r["leakage"] for r in rows if "leakage" in r]
        if leak:
            meta["leakage"] = float(np.mean(leak))
    report = MetricReport(
        gaze_error=float(gaze_err.mean()), head_error=float(head_err.mean()),
        ssim=float(np.mean([r["ssim"] for r in rows])), psnr=float(np.mean([r["psnr"] for r in rows])),
        fid_proxy=float(fid), identity_similarity=float(np.mean(ids)), n_pairs=len(rows), meta=meta)
    return report, rows


# --------------------------------------------------------------------------- runs

@dataclass
class RunSpec:
    """One training + evaluation run inside an experiment."""
    label: str
    config: TrainConfig
    eval_finetune_steps: int = 50
    max_pairs: int | None = None


def run_and_evaluate(spec: RunSpec, train_samples, eval_samples, helpers: Helpers, cache_dir,
                     data_key: str) -> dict:
    """Train ``spec`` (or reuse a cached run) and evaluate it on held-out pairs."""
    cache_dir = Path(cache_dir)
    key = stable_hash({"config": spec.config.to_dict(), "data": data_key,
                       "helpers": helpers.fingerprints(), "steps": spec.eval_finetune_steps,
                       "pairs": spec.max_pairs})
    run_dir = cache_dir / f"run-{spec.config.digest()}-{stable_hash([data_key, helpers.fingerprints()])}"
    result_path = cache_dir / f"eval-{key}.json"
    if result_path.exists():
        return json.loads(result_path.read_text())
    ckpt = run_dir / "checkpoint.gznf"
    state = None
    if ckpt.exists():
        state = load_state(ckpt)
        if state.step < spec.config.steps:
            state = None
    if state is None:
        state = train(spec.config, train_samples, run_dir, helpers.aux(),
                      resume=ckpt if ckpt.exists() else None)
    pairs = make_pairs(eval_samples)
    if spec.max_pairs is not None:
        pairs = pairs[:spec.max_pairs]
    predictor = ModelPredictor(state, helpers.extractor if spec.config.perceptual else None,
                               finetune_steps=spec.eval_finetune_steps)
    report, rows = evaluate_pairs(predictor, eval_samples, pairs, helpers.eval_net, helpers.embedder,
                                  loss_net=helpers.loss_net)
    result = {"label": spec.label, "config_digest": spec.config.digest(), "data": data_key,
              "report": json.loads(report.to_json()), "rows": rows, "run_dir": str(run_dir)}
    cache_dir.mkdir(parents=True, exist_ok=True)
    result_path.write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


ARCH_VARIANTS = {
    # label: (two_stream, rotation, functional)
    "vanilla": (False, False, False),
    "vanilla+rot": (False, True, False),
    "two-stream": (True, False, False),
    "two-stream+rot": (True, True, False),
    "vanilla+func": (False, False, True),
    "full": (True, True, True),
}

LOSS_VARIANTS = {
    # label: (perceptual, disentangle, functional)
    "recon": (False, False, False),
    "recon+perc": (True, False, False),
    "recon+perc+dis": (True, True, False),
    "recon+perc+dis+func": (True, True, True),
}


def ablation_specs(base: TrainConfig, eval_finetune_steps: int = 50, max_pairs: int | None = None) -> list:
    specs = []
    for label, (ts, rot, func) in ARCH_VARIANTS.items():
        cfg = base.with_overrides(two_stream=ts, rotation=rot, functional=func, perceptual=True, disentangle=True)
        specs.append(RunSpec(label, cfg, eval_finetune_steps, max_pairs))
    for label, (perc, dis, func) in LOSS_VARIANTS.items():
        cfg = base.with_overrides(two_stream=True, rotation=True, functional=func, perceptual=perc, disentangle=dis)
        specs.append(RunSpec(label, cfg, eval_finetune_steps, max_pairs))
    return specs


def run_ablation_matrix(base: TrainConfig, train_samples, eval_samples, helpers: Helpers, cache_dir,
                        data_key: str, eval_finetune_steps: int = 50, max_pairs: int | None = None) -> dict:
    """Train every architecture and loss variant with shared seeds and data.

    Identical configurations (e.g. two-stream+rot and recon+perc+dis) share
    one cached run.  A failing run is recorded and does not stop the others.
    """
    results, errors = {}, {}
    for spec in ablation_specs(base, eval_finetune_steps, max_pairs):
        try:
            results[spec.label] = run_and_evaluate(spec, train_samples, eval_samples, helpers, cache_dir, data_key)
        except GazeFieldError as e:
            log.error("ablation run %s failed: %s", spec.label, e)
            errors[spec.label] = f"failed: {type(e).__name__}"
    rows = []
    for label in list(ARCH_VARIANTS) + list(LOSS_VARIANTS):
        rep = results.get(label)
        rows.append((label, MetricReport(**rep["report"]) if rep else None))
    return {"results": results, "errors": errors, "table": format_table(rows, errors), "data": data_key}


# --------------------------------------------------------------------------- few-shot calibration

@dataclass
class CalibrationConfig:
    k_values: tuple = (1, 2, 3, 4, 5)
    total: int = 50
    steps: int = 60
    batch_size: int = 10
    lr: float = 1e-4
    seed: int = 0
    target_gaze_range: float = 0.45
    finetune_steps: int = 100

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_values"] = list(self.k_values)
        return d


def _finetune_estimator(base, images, labels, cfg: CalibrationConfig, seed: int):
    """Fine-tune a fresh copy of the eval network (batch-norm statistics frozen)."""
    net = fresh_copy(base)
    net.eval()
    x = images_tensor_from_arrays(images)
    y = torch.tensor(np.stack(labels), dtype=torch.float32)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(cfg.steps):
        idx = torch.randint(0, len(x), (min(cfg.batch_size, len(x)),), generator=gen)
        loss = F.l1_loss(net(x[idx]), y[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return net


def gaze_error_on(net, samples) -> float:
    est = _estimate(net, [s.image for s in samples])
    return float(np.rad2deg(pitchyaw_error(est[:, :2], np.stack([s.gaze for s in samples]))).mean())


def generated_samples(predictor: ModelPredictor, real, n: int, cfg: CalibrationConfig, seed: int):
    """``n`` redirections of the real samples to random gazes, with their target labels."""
    if n == 0:
        return [], []
    rng = np.random.default_rng([seed, 0x6E7])
    latents = [predictor.latents_for(s) for s in real]
    images, labels = [], []
    for j in range(n):
        i = j % len(real)
        src = real[i]
        g = np.array([rng.uniform(-0.75, 0.75), rng.uniform(-1, 1)]) * cfg.target_gaze_range
        out = predictor.render(latents[i], g, src.camera)
        images.append(np.clip(out["I_wf"], 0, 1))
        labels.append(np.concatenate([g, src.head_pose]))
    return images, labels


def few_shot_calibration(predictor: ModelPredictor | None, eval_net, subjects_data: dict,
                         cfg: CalibrationConfig) -> dict:
    """Error curves for real-only versus real+generated fine-tuning.

    ``subjects_data`` maps subject id -> (calibration pool, test samples).
    For each k the first k pool samples are the real data; the augmented
    set adds ``total - k`` redirections of them so both arms see the same
    number of optimization steps.
    """
    for k in cfg.k_values:
        if not 1 <= k <= cfg.total:
            raise InvalidArgument("every k must satisfy 1 <= k <= total")
    curve = {"k": list(cfg.k_values), "real_only": [], "augmented": [], "pretrained": []}
    per_subject = {}
    for sid, (pool, test) in sorted(subjects_data.items()):
        base_err = gaze_error_on(eval_net, test)
        entry = {"pretrained": base_err, "real_only": [], "augmented": []}
        for k in cfg.k_values:
            real = pool[:k]
            r_img = [s.image for s in real]
            r_lab = [np.concatenate([s.gaze, s.head_pose]) for s in real]
            seed = int(np.random.default_rng([cfg.seed, sid, k]).integers(2 ** 31))
            net_r = _finetune_estimator(eval_net, r_img, r_lab, cfg, seed)
            g_img, g_lab = (generated_samples(predictor, real, cfg.total - k, cfg, seed)
                            if predictor is not None else ([], []))
            if g_img:
                net_a = _finetune_estimator(eval_net, r_img + g_img, r_lab + g_lab, cfg, seed)
            else:
                net_a = _finetune_estimator(eval_net, r_img, r_lab, cfg, seed)
            entry["real_only"].append(gaze_error_on(net_r, test))
            entry["augmented"].append(gaze_error_on(net_a, test))
        per_subject[str(sid)] = entry
    for key in ("real_only", "augmented"):
        curve[key] = [float(np.mean([e[key][i] for e in per_subject.values()])) for i in range(len(cfg.k_values))]
    curve["pretrained"] = float(np.mean([e["pretrained"] for e in per_subject.values()]))
    curve["per_subject"] = per_subject
    curve["wins"] = int(sum(a < r for a, r in zip(curve["augmented"], curve["real_only"])))
    return curve

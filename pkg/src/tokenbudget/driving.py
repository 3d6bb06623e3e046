"""Synthetic driving scenes, waypoint head, joint loss and the SGD loop.

A scene is a constant-speed, constant-yaw-rate trajectory. A few tokens per
frame (the salient ones) carry a shared signature vector plus an encoding of
the frame's heading, yaw rate and speed; all other tokens are Gaussian
noise. Waypoints are the next ``T_plus`` ego-frame positions, so they depend
on the salient tokens only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import acm
from . import numerics as nx
from . import predictor as pred
from . import teacher as tch
from .numerics import RngState, Var
from .predictor import ConfigError
from .tensorio import read_tensor, write_tensor


# --------------------------------------------------------------------------
# scenes

@dataclass(frozen=True)
class SceneConfig:
    T: int
    N: int
    D: int
    T_plus: int = 10
    salient_per_frame: int = 2
    speed_range: tuple = (0.5, 1.5)
    yaw_rate_range: tuple = (-0.15, 0.15)
    noise_scale: float = 1.0
    signature_gain: float = 3.0

    def validate(self):
        if min(self.T, self.N, self.D, self.T_plus) < 1:
            raise ConfigError("T, N, D and T_plus must be positive")
        if not 0 <= self.salient_per_frame <= self.N:
            raise ConfigError(f"salient_per_frame={self.salient_per_frame} exceeds N={self.N}")
        if self.D < 4:
            raise ConfigError("D must be >= 4 to embed trajectory features")


@dataclass
class Scene:
    tokens: np.ndarray         # (T, N, D)
    waypoints: np.ndarray      # (T_plus, 2)
    salient_mask: np.ndarray   # (T, N) bool
    seed: int
    speed: float
    yaw_rate: float

    @property
    def salient_positions(self):
        return [[int(i) for i in np.flatnonzero(row)] for row in self.salient_mask]


def trajectory_waypoints(speed, yaw_rate, T_plus):
    """Ego-frame positions after 1..T_plus steps; heading is 0 at the current step."""
    headings = yaw_rate * (np.arange(T_plus) + 0.5)
    steps = speed * np.stack([np.cos(headings), np.sin(headings)], axis=1)
    return np.cumsum(steps, axis=0)


def dataset_basis(data_seed, D):
    """Signature vector and 4 x D feature basis shared by every scene of a dataset."""
    rng = RngState(data_seed).derive("basis")
    raw = rng.normal(size=(5, D))
    q, _ = np.linalg.qr(raw.T)
    return q[:, 0], q[:, 1:5].T


def _frame_features(speed, yaw_rate, T):
    # heading of history frame tau relative to the current one (tau = T-1)
    heading = -yaw_rate * (T - 1 - np.arange(T))
    return np.stack([
        np.cos(heading), np.sin(heading),
        np.full(T, yaw_rate / 0.15), np.full(T, speed),
    ], axis=1)


def synthesize_scene(seed, config, data_seed=0, noise_seed=None):
    """Deterministic scene for ``seed``; ``noise_seed`` resamples the noise tokens only."""
    config.validate()
    T, N, D = config.T, config.N, config.D
    rng = RngState(seed)
    traj = rng.derive("trajectory")
    speed = float(traj.uniform(*config.speed_range))
    yaw_rate = float(traj.uniform(*config.yaw_rate_range))
    mask = np.zeros((T, N), dtype=bool)
    pos = rng.derive("positions")
    for t in range(T):
        mask[t, np.sort(pos.permutation(N)[:config.salient_per_frame])] = True

    signature, basis = dataset_basis(data_seed, D)
    noise_rng = rng.derive("noise") if noise_seed is None else RngState(noise_seed).derive("noise")
    tokens = config.noise_scale * noise_rng.normal(size=(T, N, D))
    feats = _frame_features(speed, yaw_rate, T)
    jitter = rng.derive("salient").normal(scale=0.1, size=(T, N, D))
    salient = config.signature_gain * signature + feats @ basis    # (T, D)
    for t in range(T):
        idx = np.flatnonzero(mask[t])
        tokens[t, idx] = salient[t] + config.noise_scale * jitter[t, idx]
    return Scene(tokens, trajectory_waypoints(speed, yaw_rate, config.T_plus), mask, seed, speed, yaw_rate)


def resample_noise(scene, config, noise_seed, data_seed=0):
    """Same trajectory and salient tokens, fresh noise tokens."""
    fresh = synthesize_scene(scene.seed, config, data_seed=data_seed, noise_seed=noise_seed)
    tokens = np.where(scene.salient_mask[..., None], scene.tokens, fresh.tokens)
    return Scene(tokens, scene.waypoints.copy(), scene.salient_mask.copy(), scene.seed,
                 scene.speed, scene.yaw_rate)


def instruction_tokens(data_seed, n_text, width):
    """Fixed stand-in embeddings for the language instruction."""
    return RngState(data_seed).derive("instruction").normal(size=(n_text, width))


def save_dataset(directory, scenes, config, data_seed):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, sc in enumerate(scenes):
        write_tensor(directory / f"scene_{i:05d}.strmtnsr", sc.tokens)
        meta = {
            "seed": sc.seed, "T": config.T, "N": config.N, "D": config.D,
            "T_plus": config.T_plus, "data_seed": data_seed,
            "salient_positions": sc.salient_positions,
            "waypoints": sc.waypoints.tolist(),
            "speed": sc.speed, "yaw_rate": sc.yaw_rate,
        }
        (directory / f"scene_{i:05d}.json").write_text(json.dumps(meta))


def load_dataset(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(str(directory))
    scenes = []
    for meta_path in sorted(directory.glob("scene_*.json")):
        meta = json.loads(meta_path.read_text())
        tokens = read_tensor(meta_path.with_suffix(".strmtnsr"))
        mask = np.zeros((meta["T"], meta["N"]), dtype=bool)
        for t, row in enumerate(meta["salient_positions"]):
            mask[t, row] = True
        scenes.append(Scene(tokens, np.asarray(meta["waypoints"], dtype=np.float64), mask,
                            meta["seed"], meta.get("speed", 0.0), meta.get("yaw_rate", 0.0)))
    return scenes


# --------------------------------------------------------------------------
# waypoint head and loss

def init_head(width, T_plus, rng, hidden=64):
    return {
        "head.W1": nx.uniform_init(rng, (width, hidden), width),
        "head.b1": np.zeros(hidden),
        "head.W2": nx.uniform_init(rng, (hidden, 2 * T_plus), hidden),
        "head.b2": np.zeros(2 * T_plus),
    }


def predict_waypoints(decoder_outputs, head):
    """Mean-pool over positions, two-layer GELU MLP, reshape to (T_plus, 2)."""
    x = nx.as_var(decoder_outputs)
    w1 = nx.value_of(head["head.W1"])
    if x.shape[-1] != w1.shape[0]:
        raise nx.ShapeError(f"pooled width {x.shape[-1]} != head input {w1.shape[0]}")
    pooled = nx.mean(x, axis=0, keepdims=True)
    hidden = nx.gelu(nx.matmul(pooled, head["head.W1"]) + head["head.b1"])
    out = nx.matmul(hidden, head["head.W2"]) + head["head.b2"]
    return nx.reshape(out, (-1, 2))


@dataclass
class LossBreakdown:
    total: float
    wp: float
    score: float
    lam: float


# --------------------------------------------------------------------------
# model bundle

@dataclass
class Model:
    """Trainable parameters plus the frozen teacher and fixed text tokens."""

    params: dict
    teacher: tch.ToyDecoder
    text: np.ndarray
    spec: pred.WindowSpec
    K: int
    merge_mode: str = acm.HARD
    predictor_mode: str = pred.MIXER
    strided_tau: bool = False


def build_model(T, N, D, *, T_plus=10, ell=1, kappa=1, L=2, K=2, D_head=64,
                teacher_width=128, teacher_depth=2, teacher_heads=4, n_text=8,
                init_seed=0, teacher_seed=0, data_seed=0, focus_gain=3.0,
                merge_mode=acm.HARD, predictor_mode=pred.MIXER, strided_tau=False,
                head_hidden=64):
    spec = pred.WindowSpec(ell, kappa)
    rng = RngState(init_seed)
    params = {}
    params.update({f"predictor.{k}": v for k, v in
                   pred.init_params(T, N, D, spec, L, rng.derive("predictor"), mode=predictor_mode).items()})
    params.update({f"acm.{k}": v for k, v in acm.init_params(D, D_head, rng.derive("acm")).items()})
    params["proj"] = nx.uniform_init(rng.derive("proj"), (D, teacher_width), D)
    params.update(init_head(teacher_width, T_plus, rng.derive("head"), hidden=head_hidden))
    signature, _ = dataset_basis(data_seed, D)
    teacher = tch.ToyDecoder(D, teacher_width, teacher_depth, teacher_heads, seed=teacher_seed,
                             focus=signature, focus_gain=focus_gain)
    text = instruction_tokens(data_seed, n_text, teacher_width)
    return Model(params, teacher, text, spec, K, merge_mode, predictor_mode, strided_tau)


def subparams(params, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def scores_for(model, tokens, params=None):
    params = model.params if params is None else params
    return pred.predict_importance(tokens, subparams(params, "predictor."), model.spec,
                                   strided_tau=model.strided_tau, mode=model.predictor_mode)


def main_path(model, tokens, params, temperature=1.0, rng=None):
    """Predictor -> reduction -> projection -> frozen decoder -> waypoints."""
    scores = scores_for(model, tokens, params)
    reduced = acm.reduce_stack(tokens, scores, subparams(params, "acm."), model.K,
                               temperature, rng, mode=model.merge_mode)
    visual = nx.matmul(reduced.tokens, params["proj"])
    seq = tch.TokenSequence(visual, model.text, model.K)
    outputs, _ = tch.decode(seq, model.teacher)
    return scores, predict_waypoints(outputs, params), reduced


def loss_terms(model, scene, params, lam, temperature=1.0, rng=None, pseudo=None):
    """Return (total Var, wp Var, score Var) for one scene."""
    if pseudo is None:
        pseudo = tch.auxiliary_pass(scene.tokens, model.text, model.teacher)
    scores, waypoints, _ = main_path(model, scene.tokens, params, temperature, rng)
    wp = nx.l1_loss(waypoints, scene.waypoints)
    score = nx.l1_loss(scores, pseudo.scores)
    return wp + nx.mul(score, lam), wp, score


def training_step(model, scene, lam, temperature=1.0, rng=None, pseudo=None):
    """One forward/backward pass; returns (LossBreakdown, grads)."""
    params = {k: Var(v, requires_grad=True) for k, v in model.params.items()}
    total, wp, score = loss_terms(model, scene, params, lam, temperature, rng, pseudo)
    total.backward()
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in params.items()}
    wp_f, score_f = float(wp.value), float(score.value)
    breakdown = LossBreakdown(wp_f + lam * score_f, wp_f, score_f, lam)
    return breakdown, grads


# --------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    clip_norm: float = 1.0
    lam: float = 50.0
    temp_start: float = 1.0
    temp_end: float = 0.3
    gumbel_seed: int = 0
    shuffle_seed: int = 0
    gumbel_noise: bool = True   # off -> deterministic soft assignments


@dataclass
class TrainResult:
    curve: list = field(default_factory=list)   # per-epoch mean LossBreakdown
    params: dict = field(default_factory=dict)


def temperature_at(step, total_steps, start, end):
    if total_steps <= 1:
        return start
    return start + (end - start) * step / (total_steps - 1)


def clip_grads(grads, max_norm):
    if not max_norm or max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def train(model, scenes, config, log=None):
    """Plain SGD, one scene per step. Updates ``model.params`` in place."""
    if not scenes:
        raise ConfigError("empty dataset")
    gumbel = RngState(config.gumbel_seed) if config.gumbel_noise else None
    order_rng = RngState(config.shuffle_seed).derive("shuffle")
    pseudo = [tch.auxiliary_pass(s.tokens, model.text, model.teacher) for s in scenes]
    total_steps = config.epochs * len(scenes)
    step = 0
    result = TrainResult()
    for epoch in range(config.epochs):
        sums = np.zeros(3)
        for i in order_rng.permutation(len(scenes)):
            temp = temperature_at(step, total_steps, config.temp_start, config.temp_end)
            br, grads = training_step(model, scenes[i], config.lam, temp, gumbel, pseudo[i])
            grads = clip_grads(grads, config.clip_norm)
            if config.lr:
                for k, g in grads.items():
                    model.params[k] = model.params[k] - config.lr * g
            sums += (br.wp, br.score, br.total)
            step += 1
        wp, score = sums[0] / len(scenes), sums[1] / len(scenes)
        row = LossBreakdown(float(sums[2] / len(scenes)), float(wp), float(score), config.lam)
        result.curve.append(row)
        if log is not None:
            log(epoch, row)
    result.params = model.params
    return result


def evaluate(model, scenes, lam=50.0):
    """Deterministic (noise-free, temperature 1) losses and salience statistics."""
    wp_sum = score_sum = 0.0
    sal, non = [], []
    for sc in scenes:
        pseudo = tch.auxiliary_pass(sc.tokens, model.text, model.teacher)
        _, wp, score = loss_terms(model, sc, model.params, lam, pseudo=pseudo)
        wp_sum += float(wp.value)
        score_sum += float(score.value)
        s = scores_for(model, sc.tokens).value.reshape(sc.salient_mask.shape)
        sal.append(s[sc.salient_mask])
        non.append(s[~sc.salient_mask])
    n = len(scenes)
    return {
        "wp": wp_sum / n,
        "score": score_sum / n,
        "total": wp_sum / n + lam * score_sum / n,
        "salient_mean": float(np.concatenate(sal).mean()),
        "noise_mean": float(np.concatenate(non).mean()),
    }

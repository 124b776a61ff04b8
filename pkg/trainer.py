"""
Episodic training and evaluation of the FSSD model.

Loss per episode: cross-entropy over temperature-scaled cosine logits of the
queries, plus the mask/edge MSE reconstruction terms for each decoded feature
(Q, Q′_H, Q′) over every support and query image.
"""

import csv
import os
from collections import OrderedDict
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from checkpoint import load_checkpoint, save_checkpoint
from classical import classical_episode_eval
from errors import CheckpointError, ConfigError, NonFiniteError, TrainingDivergedError
from fssd import ATTENTION_MODES, DECODER_MODES, FSSDModel, ModelConfig, episode_similarity, predict
from logger_config import TrainingLogger, setup_logger
from metrics import MetricsReport, mean_and_ci95, psnr, ssim
from shapegen import Episode, ShapeSplit, sample_episode
from tensor import Adam, Tensor, add, cross_entropy_logits, getitem, mse_loss, no_grad, scale

logger = setup_logger('trainer')

BACKBONE_CODES = ('gcnn', 'plain')
CHECKPOINT_NAME = 'checkpoint.fssd'
CURVES_NAME = 'curves.csv'
CURVE_COLUMNS = ['episode', 'cls', 'mask_q', 'edge_q', 'mask_q_h', 'edge_q_h',
                 'mask_q_prime', 'edge_q_prime', 'align', 'lr']
MODEL_FIELDS = ('primitives', 'heads', 'embed_dim', 'backbone', 'attention', 'decoder')


class TrainConfig:
    """Experiment settings; defaults are the desk-scale schedule."""

    def __init__(self, ways: int = 5, shots: int = 1, queries: int = 15, episodes: int = 3000,
                 lr: float = 1e-3, lr_decay_factor: float = 0.5, lr_decay_every: int = 1000,
                 seed: int = 0, primitives: int = 60, heads: int = 4, embed_dim: int = 64,
                 decoder: str = 'both', attention: str = 'dual', backbone: str = 'gcnn',
                 align_loss: bool = False, temperature: float = 10.0, checkpoint_every: int = 500,
                 eval_episodes: int = 500, image_size: int = 32, log_every: int = 50):
        self.ways = ways
        self.shots = shots
        self.queries = queries
        self.episodes = episodes
        self.lr = lr
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_every = lr_decay_every
        self.seed = seed
        self.primitives = primitives
        self.heads = heads
        self.embed_dim = embed_dim
        self.decoder = decoder
        self.attention = attention
        self.backbone = backbone
        self.align_loss = align_loss
        self.temperature = temperature
        self.checkpoint_every = checkpoint_every
        self.eval_episodes = eval_episodes
        self.image_size = image_size
        self.log_every = log_every

    def validate(self):
        """Validate training settings."""
        errors = []

        if self.lr <= 0:
            errors.append("lr must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            errors.append("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_every < 1:
            errors.append("lr_decay_every must be at least 1")
        if self.episodes < 1:
            errors.append("episodes must be at least 1")
        if min(self.ways, self.shots, self.queries) < 1:
            errors.append("ways, shots and queries must be at least 1")
        if self.checkpoint_every < 1:
            errors.append("checkpoint_every must be at least 1")
        if self.temperature <= 0:
            errors.append("temperature must be positive")
        try:
            self.model_config().validate()
        except ConfigError as e:
            errors.append(str(e))

        if errors:
            raise ConfigError("Training configuration invalid:\n" + "\n".join(f"- {error}" for error in errors))

        return True

    def model_config(self) -> ModelConfig:
        return ModelConfig(primitives=self.primitives, heads=self.heads, embed_dim=self.embed_dim,
                           backbone=self.backbone, attention=self.attention, decoder=self.decoder,
                           image_size=self.image_size)

    def lr_at(self, episode: int) -> float:
        return self.lr * self.lr_decay_factor ** (episode // self.lr_decay_every)

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


# Forward pass over one episode

def forward_episode(model: FSSDModel, episode: Episode, decode: bool = True) -> Dict:
    """Embed support+query in one batch, reconstruct, score queries, decode features."""
    support_images = episode.images('support')
    images = Tensor(np.concatenate([support_images, episode.images('query')]))
    features = model(images)
    n_support = support_images.shape[0]
    q_prime = features['q_prime']
    logits, zero_norm = episode_similarity(
        getitem(q_prime, slice(0, n_support)), getitem(q_prime, slice(n_support, None)),
        episode.shots, episode.ways,
    )
    decoded: Dict[Tuple[str, str], Tensor] = {}
    if decode:
        heads = [head for head, enabled in (('mask', model.decodes_mask), ('edge', model.decodes_edge)) if enabled]
        for key in model.decoded_features(features):
            for head in heads:
                decoded[(key, head)] = model.decode(features[key], head)
    return {'features': features, 'logits': logits, 'decoded': decoded,
            'zero_norm': zero_norm, 'n_support': n_support}


def episode_targets(episode: Episode) -> Dict[str, np.ndarray]:
    return {
        'labels': episode.labels('query'),
        'mask': np.concatenate([episode.masks('support'), episode.masks('query')]),
        'edge': np.concatenate([episode.edges('support'), episode.edges('query')]),
    }


def total_loss(outputs: Dict, truth: Dict[str, np.ndarray], temperature: float = 10.0,
               align_loss: bool = False) -> Tuple[Tensor, Dict[str, float]]:
    """L = L_cls + Σ reconstruction MSE terms (+ optional MSE(Q′_H, Q))."""
    terms: 'OrderedDict[str, Tensor]' = OrderedDict()
    terms['cls'] = cross_entropy_logits(scale(outputs['logits'], temperature), truth['labels'])
    for (key, head), decoded in outputs['decoded'].items():
        terms[f'{head}_{key}'] = mse_loss(decoded, Tensor(truth[head].astype(decoded.dtype)))
    features = outputs.get('features', {})
    if align_loss and 'q_h' in features:
        terms['align'] = mse_loss(features['q_h'], features['q'])
    total = None
    for value in terms.values():
        total = value if total is None else add(total, value)
    values = {name: float(term.data) for name, term in terms.items()}
    if not np.isfinite(float(total.data)):
        raise TrainingDivergedError("non-finite episode loss", values)
    return total, values


def train_step(model: FSSDModel, optimizer: Adam, episode: Episode, config: TrainConfig) -> Dict[str, float]:
    optimizer.zero_grad()
    try:
        outputs = forward_episode(model, episode, decode=config.decoder != 'none')
        loss, terms = total_loss(outputs, episode_targets(episode), config.temperature, config.align_loss)
        loss.backward()
    except NonFiniteError as e:
        raise TrainingDivergedError(f"non-finite values during the training step: {e}")
    optimizer.step()
    return terms


# Checkpoints

def checkpoint_records(model: FSSDModel, optimizer: Optional[Adam], episode: int) -> 'OrderedDict[str, np.ndarray]':
    config = model.config
    records: 'OrderedDict[str, np.ndarray]' = OrderedDict()
    records['meta.primitives'] = np.int64(config.primitives)
    records['meta.heads'] = np.int64(config.heads)
    records['meta.embed_dim'] = np.int64(config.embed_dim)
    records['meta.backbone'] = np.int64(BACKBONE_CODES.index(config.backbone))
    records['meta.attention'] = np.int64(ATTENTION_MODES.index(config.attention))
    records['meta.decoder'] = np.int64(DECODER_MODES.index(config.decoder))
    records['episode'] = np.int64(episode)
    named = list(model.named_parameters())
    for name, param in named:
        records[name] = param.data
    if optimizer is not None:
        records['adam.t'] = np.int64(optimizer.state['t'])
        for (name, _), m, v in zip(named, optimizer.state['m'], optimizer.state['v']):
            records[f'adam.m.{name}'] = m
            records[f'adam.v.{name}'] = v
    return records


def model_config_from_records(records: Dict[str, np.ndarray]) -> ModelConfig:
    try:
        return ModelConfig(
            primitives=int(records['meta.primitives']),
            heads=int(records['meta.heads']),
            embed_dim=int(records['meta.embed_dim']),
            backbone=BACKBONE_CODES[int(records['meta.backbone'])],
            attention=ATTENTION_MODES[int(records['meta.attention'])],
            decoder=DECODER_MODES[int(records['meta.decoder'])],
        )
    except (KeyError, IndexError) as e:
        raise CheckpointError(f"checkpoint lacks model metadata: {e}")


def load_model(path: str, expected: Optional[Dict] = None) -> FSSDModel:
    """Rebuild a model from a checkpoint; `expected` model fields must match its metadata."""
    records = load_checkpoint(path)
    config = model_config_from_records(records)
    for name, value in (expected or {}).items():
        if value is not None and getattr(config, name) != value:
            raise CheckpointError(f"checkpoint has {name}={getattr(config, name)}, configuration asks for {value}")
    model = FSSDModel(config, np.random.default_rng(0))
    for name, param in model.named_parameters():
        if name not in records:
            raise CheckpointError(f"checkpoint is missing parameter '{name}'")
        if records[name].shape != param.shape:
            raise CheckpointError(f"parameter '{name}' has shape {records[name].shape}, model expects {param.shape}")
        param.data = records[name].astype(param.dtype)
    return model


def write_curves(path: str, curves: List[Dict[str, float]]):
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.DictWriter(handle, fieldnames=CURVE_COLUMNS, restval='', extrasaction='ignore')
        writer.writeheader()
        for row in curves:
            writer.writerow({key: repr(value) if isinstance(value, float) else value for key, value in row.items()})


# Training

def train(config: TrainConfig, split: ShapeSplit, out_dir: Optional[str] = None,
          progress: bool = False) -> Tuple[FSSDModel, MetricsReport]:
    """Episodic training; writes checkpoint + curves to out_dir when given."""
    config.validate()
    data_rng = np.random.default_rng([config.seed, 0])
    init_rng = np.random.default_rng([config.seed, 1])
    model = FSSDModel(config.model_config(), init_rng)
    optimizer = Adam(model.parameters(), lr=config.lr)
    run_log = TrainingLogger(log_every=config.log_every)
    run_log.start_run('episodic training', config.to_dict())
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    checkpoint_path = os.path.join(out_dir, CHECKPOINT_NAME) if out_dir else None

    curves: List[Dict[str, float]] = []
    for episode_index in tqdm(range(config.episodes), desc='train', disable=not progress):
        optimizer.lr = config.lr_at(episode_index)
        episode = sample_episode(split, config.ways, config.shots, config.queries, data_rng)
        try:
            terms = train_step(model, optimizer, episode, config)
        except TrainingDivergedError as e:
            run_log.log_nonfinite(episode_index, e.diagnostics)
            raise TrainingDivergedError(f"episode {episode_index}: {e} (lr={optimizer.lr:.2e})", e.diagnostics)
        curves.append({'episode': episode_index, **terms, 'lr': optimizer.lr})
        run_log.log_episode(episode_index, terms, optimizer.lr)
        if checkpoint_path and (episode_index + 1) % config.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, checkpoint_records(model, optimizer, episode_index + 1))
            run_log.log_checkpoint(episode_index + 1, checkpoint_path)

    if checkpoint_path:
        save_checkpoint(checkpoint_path, checkpoint_records(model, optimizer, config.episodes))
        run_log.log_checkpoint(config.episodes, checkpoint_path)
        write_curves(os.path.join(out_dir, CURVES_NAME), curves)

    final = curves[-1] if curves else {}
    run_log.end_run('episodic training', {'final loss terms': {k: v for k, v in final.items() if k not in ('episode', 'lr')}})
    return model, MetricsReport(episodes=config.episodes, loss_curves=curves)


def train_on_episode(config: TrainConfig, episode: Episode, steps: int = 300) -> Tuple[FSSDModel, List[Dict[str, float]]]:
    """Repeatedly fit one fixed episode (capacity check)."""
    config.validate()
    model = FSSDModel(config.model_config(), np.random.default_rng([config.seed, 1]))
    optimizer = Adam(model.parameters(), lr=config.lr)
    history = [train_step(model, optimizer, episode, config) for _ in range(steps)]
    return model, history


# Evaluation

def evaluate(model: FSSDModel, split: ShapeSplit, config: TrainConfig,
             episodes: Optional[int] = None, progress: bool = False) -> MetricsReport:
    """Accuracy mean ± CI and query reconstruction quality; no weight updates."""
    count = episodes if episodes is not None else config.eval_episodes
    accuracies: List[float] = []
    quality: Dict[str, Dict[str, List[float]]] = {}
    decode = model.config.decoder != 'none'
    with no_grad():
        for index in tqdm(range(count), desc='evaluate', disable=not progress):
            rng = np.random.default_rng([config.seed, 2, index])
            episode = sample_episode(split, config.ways, config.shots, config.queries, rng)
            outputs = forward_episode(model, episode, decode=decode)
            labels = episode.labels('query')
            accuracies.append(float(np.mean(predict(outputs['logits'].data) == labels)))
            truth = episode_targets(episode)
            start = outputs['n_support']
            for (key, head), decoded in outputs['decoded'].items():
                entry = quality.setdefault(f'{head}_{key}', {'psnr': [], 'ssim': []})
                for predicted, target in zip(decoded.data[start:], truth[head][start:]):
                    entry['psnr'].append(psnr(predicted[0], target[0]))
                    entry['ssim'].append(ssim(predicted[0], target[0]))
    accuracy_mean, accuracy_ci95 = mean_and_ci95(accuracies)
    reconstruction = {
        name: {metric: float(np.mean(values)) for metric, values in entry.items()}
        for name, entry in sorted(quality.items())
    }
    logger.info(f"Evaluated {count} episodes: accuracy {accuracy_mean:.4f} ± {accuracy_ci95:.4f}")
    return MetricsReport(accuracy_mean=accuracy_mean, accuracy_ci95=accuracy_ci95,
                         episodes=count, reconstruction=reconstruction)


def evaluate_checkpoint(path: str, split: ShapeSplit, config: TrainConfig,
                        expected: Optional[Dict] = None, progress: bool = False) -> MetricsReport:
    return evaluate(load_model(path, expected), split, config, progress=progress)


def run_baseline(kind: str, split: ShapeSplit, config: TrainConfig, episodes: Optional[int] = None,
                 progress: bool = False) -> MetricsReport:
    """Classical descriptor baseline over the same episode stream evaluate() draws."""
    count = episodes if episodes is not None else config.eval_episodes
    accuracies = []
    for index in tqdm(range(count), desc=f'baseline {kind}', disable=not progress):
        rng = np.random.default_rng([config.seed, 2, index])
        episode = sample_episode(split, config.ways, config.shots, config.queries, rng)
        _, accuracy = classical_episode_eval(kind, episode)
        accuracies.append(accuracy)
    accuracy_mean, accuracy_ci95 = mean_and_ci95(accuracies)
    logger.info(f"Baseline {kind} over {count} episodes: accuracy {accuracy_mean:.4f} ± {accuracy_ci95:.4f}")
    return MetricsReport(accuracy_mean=accuracy_mean, accuracy_ci95=accuracy_ci95, episodes=count)

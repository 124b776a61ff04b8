"""
Feature reconstruction from learnable shape primitives.

A query feature Q is rebuilt as an attention-weighted combination of the
primitive bank Φ. Two attention paths share Φ as their value source:
H-MCA keeps whole primitives in every head, S-MCA splits them across heads.
Their sum is the reconstruction; the model adds it to the standardised
embedding through an identity skip and compares the result by cosine
similarity. Paired decoders map features back to mask and edge rasters.
"""

from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import ConfigError, DimensionError
from gcnn import BackboneConfig, build_backbone
from layers import Conv2d, Linear, Module
from logger_config import setup_logger
from tensor import (Tensor, add, concat, l2_normalize_rows, matmul, mean, no_grad, relu, reshape, scale,
                    sigmoid, softmax_rows, sub, transpose, upsample_nearest2x)

logger = setup_logger('fssd')

ATTENTION_MODES = ('smca', 'hmca', 'dual')
DECODER_MODES = ('none', 'mask', 'edge', 'both')


class PrimitiveBank(Module):
    """N learnable primitives of width d, rows initialised to unit norm."""

    def __init__(self, num_primitives: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        if num_primitives < 1:
            raise ConfigError("the primitive bank needs at least one primitive")
        rows = rng.normal(0.0, 1.0, size=(num_primitives, dim))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        self.phi = Tensor(rows.astype(dtype), requires_grad=True)

    @property
    def num_primitives(self) -> int:
        return self.phi.shape[0]


class AttentionConfig:
    """Feature width, head count and the query/key init gain.

    With unit-RMS queries and unit-norm primitives, plain Linear init gives
    logits with std ≈ 1/(3√d) and a uniform softmax; a gain g scales that
    std by g².
    """

    def __init__(self, dim: int = 64, heads: int = 4, init_gain: float = 4.0):
        self.dim = dim
        self.heads = heads
        self.init_gain = init_gain

    @property
    def hmca_key_dim(self) -> int:
        return self.dim

    @property
    def smca_key_dim(self) -> int:
        return self.dim // self.heads

    def validate(self):
        if self.heads < 1:
            raise ConfigError("attention needs at least one head")
        if self.dim % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide the feature width ({self.dim})")
        if self.init_gain <= 0:
            raise ConfigError("init_gain must be positive")
        return True


def sharpen_init(config: AttentionConfig, *layers: Linear):
    for layer in layers:
        layer.weight.data *= config.init_gain


def standardize_rows(x: Tensor) -> Tensor:
    """Centre each row and rescale it to norm √d, so every entry has unit RMS.

    The result does not depend on the row's scale: attention logits stay
    bounded however large the backbone output grows. Constant rows map to zero.
    """
    centred = sub(x, mean(x, axis=1, keepdims=True))
    return scale(l2_normalize_rows(centred), float(np.sqrt(x.shape[1])))


def attend_single(q: Tensor, phi: Tensor, key_dim: Optional[int] = None) -> Tuple[Tensor, Tensor]:
    """W = softmax(QΦᵀ/√d_k), Q′ = WΦ."""
    if phi.shape[0] == 0:
        raise DimensionError("attention over an empty primitive bank")
    if q.shape[1] != phi.shape[1]:
        raise DimensionError(f"query width {q.shape[1]} does not match primitive width {phi.shape[1]}")
    key_dim = key_dim or phi.shape[1]
    weights = softmax_rows(scale(matmul(q, transpose(phi)), 1.0 / np.sqrt(key_dim)))
    return weights, matmul(weights, phi)


class HolisticAttentionOutput:
    def __init__(self, output: Tensor, pre_projection: Tensor, effective_weights: Tensor):
        self.output = output
        self.pre_projection = pre_projection
        self.effective_weights = effective_weights


class HolisticCrossAttention(Module):
    """H-MCA: per-head weights over whole primitives, heads averaged, then projected."""

    def __init__(self, bank: PrimitiveBank, config: AttentionConfig, rng: np.random.Generator):
        config.validate()
        self.bank = bank
        self.config = config
        wide = config.dim * config.heads
        self.query = Linear(config.dim, wide, rng)
        self.key = Linear(config.dim, wide, rng)
        self.out = Linear(config.dim, config.dim, rng)
        sharpen_init(config, self.query, self.key)

    def attend(self, q: Tensor) -> HolisticAttentionOutput:
        phi = self.bank.phi
        dim, heads = self.config.dim, self.config.heads
        if q.shape[1] != dim:
            raise DimensionError(f"H-MCA expects width {dim}, got {q.shape[1]}")
        queries = self.query(q)
        keys = self.key(phi)
        head_weights = []
        for j in range(heads):
            qj = queries[:, j * dim:(j + 1) * dim]
            kj = keys[:, j * dim:(j + 1) * dim]
            logits = scale(matmul(qj, transpose(kj)), 1.0 / np.sqrt(self.config.hmca_key_dim))
            head_weights.append(reshape(softmax_rows(logits), (1, q.shape[0], phi.shape[0])))
        effective = mean(concat(head_weights, axis=0), axis=0)
        # Mean of per-head W⁽ʲ⁾Φ equals (mean W⁽ʲ⁾)Φ: one product keeps the row-space form literal.
        pre = matmul(effective, phi)
        return HolisticAttentionOutput(self.out(pre), pre, effective)

    def forward(self, q: Tensor) -> Tensor:
        return self.attend(q).output


class StandardCrossAttention(Module):
    """S-MCA: conventional multi-head cross-attention with Φ as keys and values."""

    def __init__(self, bank: PrimitiveBank, config: AttentionConfig, rng: np.random.Generator):
        config.validate()
        self.bank = bank
        self.config = config
        self.query = Linear(config.dim, config.dim, rng)
        self.key = Linear(config.dim, config.dim, rng)
        self.value = Linear(config.dim, config.dim, rng)
        self.out = Linear(config.dim, config.dim, rng)
        sharpen_init(config, self.query, self.key)

    def forward(self, q: Tensor) -> Tensor:
        phi = self.bank.phi
        dim, heads = self.config.dim, self.config.heads
        if q.shape[1] != dim:
            raise DimensionError(f"S-MCA expects width {dim}, got {q.shape[1]}")
        width = self.config.smca_key_dim
        queries, keys, values = self.query(q), self.key(phi), self.value(phi)
        outputs = []
        for j in range(heads):
            columns = slice(j * width, (j + 1) * width)
            logits = scale(matmul(queries[:, columns], transpose(keys[:, columns])), 1.0 / np.sqrt(width))
            outputs.append(matmul(softmax_rows(logits), values[:, columns]))
        return self.out(concat(outputs, axis=1))


def h_mca(q: Tensor, attention: HolisticCrossAttention) -> Tensor:
    return attention(q)


def s_mca(q: Tensor, attention: StandardCrossAttention) -> Tensor:
    return attention(q)


def dual_reconstruct(q: Tensor, holistic: HolisticCrossAttention,
                     standard: StandardCrossAttention) -> Tuple[Tensor, Tensor, Tensor]:
    """Q′ = H-MCA(Q) + S-MCA(Q); all three are returned for decoder supervision."""
    q_h = holistic(q)
    q_s = standard(q)
    return q_h, q_s, add(q_h, q_s)


def episode_similarity(support: Tensor, query: Tensor, shots: int, ways: int) -> Tuple[Tensor, bool]:
    """Cosine logits (queries × ways) against per-class prototypes.

    Support rows must be slot-major: rows k·shots … (k+1)·shots−1 belong to slot k.
    Returns the logits and whether any row had zero norm (its cosines are 0).
    """
    if support.shape[0] != shots * ways:
        raise DimensionError(f"expected {shots * ways} support rows, got {support.shape[0]}")
    if shots > 1:
        prototypes = mean(reshape(support, (ways, shots, support.shape[1])), axis=1)
    else:
        prototypes = support
    zero_norm = bool(
        (np.linalg.norm(prototypes.data, axis=1) < 1e-12).any() or (np.linalg.norm(query.data, axis=1) < 1e-12).any()
    )
    if zero_norm:
        logger.warning("zero-norm feature in episode similarity; its cosine scores are set to 0")
    logits = matmul(l2_normalize_rows(query), transpose(l2_normalize_rows(prototypes)))
    return logits, zero_norm


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax per row; np.argmax already returns the lowest slot on ties."""
    return np.argmax(np.asarray(logits), axis=1)


class DecoderHead(Module):
    """d → 32×4×4 seed, three (upsample, 3×3 conv, ReLU) stages, 1-channel conv + sigmoid."""

    STAGE_CHANNELS = (32, 32, 16, 8)

    def __init__(self, dim: int, rng: np.random.Generator):
        seed_channels = self.STAGE_CHANNELS[0]
        self.project = Linear(dim, seed_channels * 4 * 4, rng)
        self.stages = [Conv2d(c_in, c_out, 3, rng)
                       for c_in, c_out in zip(self.STAGE_CHANNELS[:-1], self.STAGE_CHANNELS[1:])]
        self.final = Conv2d(self.STAGE_CHANNELS[-1], 1, 3, rng)

    def forward(self, features: Tensor) -> Tensor:
        batch = features.shape[0]
        h = reshape(relu(self.project(features)), (batch, self.STAGE_CHANNELS[0], 4, 4))
        for conv in self.stages:
            h = relu(conv(upsample_nearest2x(h)))
        return sigmoid(self.final(h))


class ModelConfig:
    """Everything needed to rebuild an FSSDModel."""

    def __init__(self, primitives: int = 60, heads: int = 4, embed_dim: int = 64, backbone: str = 'gcnn',
                 attention: str = 'dual', decoder: str = 'both', image_size: int = 32):
        self.primitives = primitives
        self.heads = heads
        self.embed_dim = embed_dim
        self.backbone = backbone
        self.attention = attention
        self.decoder = decoder
        self.image_size = image_size

    def validate(self):
        errors = []
        if self.primitives < 1:
            errors.append("primitives must be at least 1")
        if self.heads < 1 or self.embed_dim % self.heads:
            errors.append(f"heads ({self.heads}) must divide embed_dim ({self.embed_dim})")
        if self.backbone not in ('gcnn', 'plain'):
            errors.append(f"unknown backbone '{self.backbone}'")
        if self.attention not in ATTENTION_MODES:
            errors.append(f"attention must be one of {ATTENTION_MODES}")
        if self.decoder not in DECODER_MODES:
            errors.append(f"decoder must be one of {DECODER_MODES}")
        if self.image_size != 32:
            errors.append("decoders produce 32×32 rasters; image_size must be 32")
        if errors:
            raise ConfigError("Model configuration invalid:\n" + "\n".join(f"- {e}" for e in errors))
        return True


class FSSDModel(Module):
    """Backbone, shared primitive bank, dual attention and the mask/edge decoders."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        # Bank first so its parameter is named bank.phi in checkpoints.
        self.bank = PrimitiveBank(config.primitives, config.embed_dim, rng)
        backbone_config = BackboneConfig(embed_dim=config.embed_dim, image_size=config.image_size)
        self.backbone = build_backbone(config.backbone, backbone_config, rng)
        attention = AttentionConfig(config.embed_dim, config.heads)
        self.h_mca = HolisticCrossAttention(self.bank, attention, rng)
        self.s_mca = StandardCrossAttention(self.bank, attention, rng)
        self.mask_decoder = DecoderHead(config.embed_dim, rng)
        self.edge_decoder = DecoderHead(config.embed_dim, rng)

    @property
    def decodes_mask(self) -> bool:
        return self.config.decoder in ('mask', 'both')

    @property
    def decodes_edge(self) -> bool:
        return self.config.decoder in ('edge', 'both')

    def reconstruct(self, q: Tensor) -> Dict[str, Tensor]:
        """Apply the configured attention variant; keys present depend on it.

        q_h and q_s are the attention outputs; q_prime is q plus their sum
        (dual) or plus the single path's output.
        """
        mode = self.config.attention
        if mode == 'dual':
            q_h, q_s, reconstruction = dual_reconstruct(q, self.h_mca, self.s_mca)
            return {'q_h': q_h, 'q_s': q_s, 'q_prime': add(q, reconstruction)}
        if mode == 'hmca':
            q_h = self.h_mca(q)
            return {'q_h': q_h, 'q_prime': add(q, q_h)}
        q_s = self.s_mca(q)
        return {'q_s': q_s, 'q_prime': add(q, q_s)}

    def embed(self, images: Tensor) -> Tensor:
        """Backbone output, standardised per row."""
        return standardize_rows(self.backbone(images))

    def forward(self, images: Tensor) -> Dict[str, Tensor]:
        features = {'q': self.embed(images)}
        features.update(self.reconstruct(features['q']))
        return features

    def decode(self, features: Tensor, head: str) -> Tensor:
        if head == 'mask':
            return self.mask_decoder(features)
        if head == 'edge':
            return self.edge_decoder(features)
        raise ConfigError(f"unknown decoder head '{head}'")

    def decoded_features(self, features: Dict[str, Tensor]) -> List[str]:
        """Feature keys fed to the decoders: Q, Q′_H (when present) and Q′."""
        keys = ['q']
        if 'q_h' in features and self.config.attention == 'dual':
            keys.append('q_h')
        keys.append('q_prime')
        return keys


def interpolate_primitives(model: FSSDModel, i: int, j: int, steps: int = 11) -> List[np.ndarray]:
    """Decoded masks of α·φᵢ + (1−α)·φⱼ for α = 0, 0.1, …, 1 (frame k has α = k/10)."""
    num = model.bank.num_primitives
    if not (0 <= i < num and 0 <= j < num):
        raise DimensionError(f"primitive indices must lie in [0, {num}), got {i}, {j}")
    if i == j:
        raise DimensionError("interpolation needs two distinct primitives")
    phi = model.bank.phi.data
    frames = []
    for step in range(steps):
        alpha = step / (steps - 1)
        vector = alpha * phi[i] + (1.0 - alpha) * phi[j]
        frames.append(decode_vector(model, vector))
    return frames


def decode_vector(model: FSSDModel, vector: np.ndarray, head: str = 'mask') -> np.ndarray:
    """Decode one feature vector to a H×W raster without recording a tape."""
    with no_grad():
        row = Tensor(np.asarray(vector, dtype=model.bank.phi.dtype).reshape(1, -1))
        return model.decode(row, head).data[0, 0]

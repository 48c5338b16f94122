"""
Point-cloud-conditioned regressor used by the learned descriptor fields.

A per-point encoder with max pooling summarizes the object cloud into an
embedding; a fully connected decoder maps (normalized query, embedding) to
SCF band powers or an occupancy logit. Clouds and queries are expressed in
the cloud's own frame (centroid, max radius), so predictions are exactly
translation and scale invariant; rotation invariance is learned through
augmentation. Forward, backward and input vector-Jacobian products are
written out in numpy.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from errors import FieldError, FieldTrainingError
from geometry import haar_random_rotation
from logging_config import get_logger
from models import (
    Activation,
    FieldHeader,
    RegressorConfig,
    ScfConfig,
    TargetKind,
    TrainConfig,
    TrainingMetadata,
)
from optim import AdamState, adam_step

logger = get_logger(__name__)

MAGIC = b"NIFT"
CONTAINER_VERSION = 1

Layer = Tuple[np.ndarray, np.ndarray]


# ============ Activations ============

def activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == Activation.SOFTPLUS:
        return np.logaddexp(0.0, z)
    if activation == Activation.TANH:
        return np.tanh(z)
    return z


def activate_grad(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == Activation.SOFTPLUS:
        return expit(z)
    if activation == Activation.TANH:
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


# ============ Weights ============

@dataclass
class RegressorWeights:
    encoder: List[Layer]
    decoder: List[Layer]
    activation: Activation = Activation.SOFTPLUS
    cloud_points: int = 256
    include_output_layer: bool = True
    concat_pre_activation: bool = False
    metadata: TrainingMetadata = field(default_factory=TrainingMetadata)

    def __post_init__(self):
        self.activation = Activation(self.activation)
        self.validate()

    def validate(self) -> None:
        if not self.encoder:
            raise FieldError("encoder needs at least one layer")
        if len(self.decoder) < 2:
            raise FieldError("decoder needs at least two layers")
        width = 3
        for name, layers in (("encoder", self.encoder), ("decoder", self.decoder)):
            if name == "decoder":
                width = 3 + self.embedding_dim
            for i, (w, b) in enumerate(layers):
                if w.ndim != 2 or w.shape[0] != width or b.shape != (w.shape[1],):
                    raise FieldError(f"{name} layer {i} has inconsistent shape {w.shape}/{b.shape}")
                if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                    raise FieldError(f"{name} layer {i} has non-finite weights")
                width = w.shape[1]

    @property
    def embedding_dim(self) -> int:
        return self.encoder[-1][0].shape[1]

    @property
    def decoder_widths(self) -> List[int]:
        return [w.shape[1] for w, _ in self.decoder]

    @property
    def output_width(self) -> int:
        return self.decoder_widths[-1]

    @property
    def descriptor_dim(self) -> int:
        widths = self.decoder_widths
        return sum(widths if self.include_output_layer else widths[:-1])

    def parameters(self) -> List[np.ndarray]:
        return [a for layer in self.encoder + self.decoder for a in layer]

    def with_parameters(self, arrays: List[np.ndarray]) -> "RegressorWeights":
        it = iter(np.array(a, dtype=float) for a in arrays)
        encoder = [(next(it), next(it)) for _ in self.encoder]
        decoder = [(next(it), next(it)) for _ in self.decoder]
        return replace(self, encoder=encoder, decoder=decoder, metadata=self.metadata.model_copy(deep=True))

    def header(self) -> FieldHeader:
        return FieldHeader(
            version=CONTAINER_VERSION,
            activation=self.activation,
            encoder_shapes=[list(w.shape) for w, _ in self.encoder],
            decoder_shapes=[list(w.shape) for w, _ in self.decoder],
            include_output_layer=self.include_output_layer,
            concat_pre_activation=self.concat_pre_activation,
            cloud_points=self.cloud_points,
            metadata=self.metadata,
        )

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        header = self.header().model_dump(mode="json", exclude={"metadata"})
        digest.update(json.dumps(header, sort_keys=True).encode("utf-8"))
        for array in self.parameters():
            digest.update(np.ascontiguousarray(array, dtype="<f8").tobytes())
        return f"learned:{self.metadata.target_kind.value}:{digest.hexdigest()[:16]}"

    # ---- binary container ----

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = self.header().model_dump_json().encode("utf-8")
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", CONTAINER_VERSION, len(header)))
            f.write(header)
            for array in self.parameters():
                f.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
        logger.info("Saved field weights to %s (%s)", path, self.fingerprint())
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RegressorWeights":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Field weights not found: {path}")
        blob = path.read_bytes()
        if blob[:4] != MAGIC:
            raise FieldError(f"{path} is not a NIFT weight container")
        version, header_len = struct.unpack("<II", blob[4:12])
        if version != CONTAINER_VERSION:
            raise FieldError(f"unsupported weight container version {version}")
        header = FieldHeader.model_validate_json(blob[12:12 + header_len])
        offset = 12 + header_len

        def read(shape: Tuple[int, ...]) -> np.ndarray:
            nonlocal offset
            size = int(np.prod(shape)) * 8
            if offset + size > len(blob):
                raise FieldError("weight container is truncated")
            array = np.frombuffer(blob, dtype="<f8", count=int(np.prod(shape)), offset=offset).reshape(shape)
            offset += size
            return array.astype(float)

        encoder = [(read(tuple(s)), read((s[1],))) for s in header.encoder_shapes]
        decoder = [(read(tuple(s)), read((s[1],))) for s in header.decoder_shapes]
        if offset != len(blob):
            raise FieldError("weight container has trailing bytes")
        return cls(
            encoder=encoder,
            decoder=decoder,
            activation=header.activation,
            cloud_points=header.cloud_points,
            include_output_layer=header.include_output_layer,
            concat_pre_activation=header.concat_pre_activation,
            metadata=header.metadata,
        )


def init_weights(
    config: RegressorConfig,
    output_width: int,
    seed: Union[int, np.random.Generator] = 0,
) -> RegressorWeights:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def layer(n_in: int, n_out: int) -> Layer:
        std = np.sqrt(2.0 / (n_in + n_out))
        return rng.normal(0.0, std, size=(n_in, n_out)), np.zeros(n_out)

    encoder, width = [], 3
    for w in config.encoder_widths:
        encoder.append(layer(width, w))
        width = w
    decoder, width = [], 3 + config.encoder_widths[-1]
    for w in list(config.decoder_widths) + [output_width]:
        decoder.append(layer(width, w))
        width = w
    return RegressorWeights(
        encoder=encoder,
        decoder=decoder,
        activation=config.activation,
        cloud_points=config.cloud_points,
        include_output_layer=config.include_output_layer,
        concat_pre_activation=config.concat_pre_activation,
    )


# ============ Forward / backward ============

def cloud_frame(cloud: np.ndarray) -> Tuple[np.ndarray, float]:
    """Centroid and max radius of a cloud; queries are normalized with them."""
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    center = pts.mean(axis=0)
    scale = float(np.linalg.norm(pts - center, axis=1).max())
    if not scale > 0:
        raise FieldError("object cloud is degenerate")
    return center, scale


def encoder_forward(weights: RegressorWeights, clouds: np.ndarray):
    """clouds: (B, P, 3) normalized. Returns embeddings (B, E) and a backward cache."""
    a = clouds
    layers = []
    for w, b in weights.encoder:
        z = a @ w + b
        layers.append((a, z))
        a = activate(z, weights.activation)
    return a.max(axis=1), (layers, a.argmax(axis=1), a.shape)


def encoder_backward(weights: RegressorWeights, cache, g_embedding: np.ndarray) -> List[Layer]:
    layers, argmax, shape = cache
    g_a = np.zeros(shape)
    np.put_along_axis(g_a, argmax[:, None, :], g_embedding[:, None, :], axis=1)
    grads = []
    for (w, _), (a_in, z) in zip(reversed(weights.encoder), reversed(layers)):
        g_z = g_a * activate_grad(z, weights.activation)
        grads.append((np.einsum("bpi,bpo->io", a_in, g_z), g_z.sum(axis=(0, 1))))
        g_a = g_z @ w.T
    return grads[::-1]


def decoder_forward(weights: RegressorWeights, inputs: np.ndarray):
    """Returns pre-activations and activations per decoder layer; the output layer is linear."""
    a = inputs
    zs, acts = [], []
    last = len(weights.decoder) - 1
    for i, (w, b) in enumerate(weights.decoder):
        z = a @ w + b
        a = z if i == last else activate(z, weights.activation)
        zs.append(z)
        acts.append(a)
    return zs, acts


def decoder_backward(weights: RegressorWeights, inputs: np.ndarray, zs, acts, g_out: np.ndarray):
    g_a = g_out
    last = len(weights.decoder) - 1
    grads = []
    for i in range(last, -1, -1):
        w = weights.decoder[i][0]
        g_z = g_a if i == last else g_a * activate_grad(zs[i], weights.activation)
        a_in = inputs if i == 0 else acts[i - 1]
        grads.append((a_in.T @ g_z, g_z.sum(axis=0)))
        g_a = g_z @ w.T
    return grads[::-1], g_a


def _descriptor_layers(weights: RegressorWeights) -> List[int]:
    n = len(weights.decoder)
    return list(range(n)) if weights.include_output_layer else list(range(n - 1))


def descriptor_from_forward(weights: RegressorWeights, zs, acts) -> np.ndarray:
    """Concatenated decoder activations (pre-activations for hidden layers when flagged)."""
    last = len(weights.decoder) - 1
    blocks = []
    for i in _descriptor_layers(weights):
        use_pre = weights.concat_pre_activation and i != last
        blocks.append(zs[i] if use_pre else acts[i])
    return np.concatenate(blocks, axis=1)


def descriptor_vjp(weights: RegressorWeights, zs, cotangent: np.ndarray) -> np.ndarray:
    """Reverse accumulation of a descriptor cotangent down to the decoder input."""
    last = len(weights.decoder) - 1
    widths = weights.decoder_widths
    blocks, offset = {}, 0
    for i in _descriptor_layers(weights):
        blocks[i] = cotangent[:, offset:offset + widths[i]]
        offset += widths[i]

    g_a = np.zeros((cotangent.shape[0], widths[-1]))
    for i in range(last, -1, -1):
        block = blocks.get(i)
        pre = weights.concat_pre_activation and i != last
        if block is not None and not pre:
            g_a = g_a + block
        g_z = g_a if i == last else g_a * activate_grad(zs[i], weights.activation)
        if block is not None and pre:
            g_z = g_z + block
        g_a = g_z @ weights.decoder[i][0].T
    return g_a


def predict(weights: RegressorWeights, cloud: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Raw decoder output for query points given an object cloud."""
    center, scale = cloud_frame(cloud)
    embedding, _ = encoder_forward(weights, ((cloud - center) / scale)[None])
    q = (np.asarray(points, dtype=float).reshape(-1, 3) - center) / scale
    inputs = np.concatenate([q, np.repeat(embedding, len(q), axis=0)], axis=1)
    _, acts = decoder_forward(weights, inputs)
    return acts[-1]


# ============ Training ============

@dataclass
class TrainingSet:
    """Per object: a surface cloud, query points in its 1.5x box, and targets per query."""
    clouds: np.ndarray   # (O, P, 3)
    queries: np.ndarray  # (O, Q, 3)
    targets: np.ndarray  # (O, Q, D)
    target_kind: TargetKind = TargetKind.SCF
    scf: Optional[ScfConfig] = None
    seed: int = 0

    @property
    def num_objects(self) -> int:
        return self.clouds.shape[0]

    @property
    def pair_count(self) -> int:
        return self.queries.shape[0] * self.queries.shape[1]

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"target_kind": self.target_kind.value, "seed": self.seed,
                "scf": self.scf.model_dump(mode="json") if self.scf else None}
        with open(path, "wb") as f:
            np.savez_compressed(f, clouds=self.clouds, queries=self.queries, targets=self.targets,
                                meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8))
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrainingSet":
        with np.load(Path(path)) as data:
            meta = json.loads(bytes(data["meta"]).decode("utf-8"))
            return cls(
                clouds=data["clouds"], queries=data["queries"], targets=data["targets"],
                target_kind=TargetKind(meta["target_kind"]), seed=int(meta["seed"]),
                scf=ScfConfig(**meta["scf"]) if meta.get("scf") else None,
            )


def _normalize_set(train: TrainingSet):
    clouds, queries = [], []
    for cloud, q in zip(train.clouds, train.queries):
        center, scale = cloud_frame(cloud)
        clouds.append((cloud - center) / scale)
        queries.append((q - center) / scale)
    return np.asarray(clouds), np.asarray(queries)


def _loss_and_grad(y: np.ndarray, t: np.ndarray, kind: TargetKind) -> Tuple[float, np.ndarray]:
    if kind == TargetKind.SCF:
        diff = y - t
        return float(np.abs(diff).mean()), np.sign(diff) / diff.size
    loss = np.logaddexp(0.0, y) - t * y
    return float(loss.mean()), (expit(y) - t) / y.size


def _forward_batch(weights: RegressorWeights, clouds: np.ndarray, queries: np.ndarray):
    embedding, enc_cache = encoder_forward(weights, clouds)
    b, q = queries.shape[:2]
    inputs = np.concatenate([queries.reshape(b * q, 3), np.repeat(embedding, q, axis=0)], axis=1)
    zs, acts = decoder_forward(weights, inputs)
    return inputs, zs, acts, enc_cache


def evaluate(weights: RegressorWeights, clouds: np.ndarray, queries: np.ndarray, targets: np.ndarray,
             kind: TargetKind) -> dict:
    """Loss plus per-band R² (SCF) or accuracy (occupancy) on normalized data."""
    preds = []
    for s in range(0, len(clouds), 16):
        _, _, acts, _ = _forward_batch(weights, clouds[s:s + 16], queries[s:s + 16])
        preds.append(acts[-1])
    y = np.concatenate(preds, axis=0)
    t = targets.reshape(-1, targets.shape[-1])
    loss, _ = _loss_and_grad(y, t, kind)
    if kind == TargetKind.OCCUPANCY:
        return {"loss": loss, "accuracy": float(((y > 0.0) == (t > 0.5)).mean())}
    r2 = []
    for band in range(t.shape[1]):
        ss_tot = float(((t[:, band] - t[:, band].mean()) ** 2).sum())
        ss_res = float(((y[:, band] - t[:, band]) ** 2).sum())
        r2.append(1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0))
    return {"loss": loss, "r2": r2, "mean_r2": float(np.mean(r2))}


def train_regressor(
    train: TrainingSet,
    reg_config: Optional[RegressorConfig] = None,
    train_config: Optional[TrainConfig] = None,
) -> RegressorWeights:
    """
    Mini-batch Adam on L1 (SCF) or binary cross entropy (occupancy) loss.
    A fraction of the objects is held out for validation; the final
    held-out metrics are stored in the weight metadata.
    """
    reg_config = reg_config or RegressorConfig()
    train_config = train_config or TrainConfig()
    if train.num_objects == 0 or train.pair_count == 0:
        raise FieldError("training set is empty")
    kind = train.target_kind
    rng = np.random.default_rng(train_config.seed)

    clouds, queries = _normalize_set(train)
    targets = train.targets.astype(float)
    order = rng.permutation(train.num_objects)
    n_hold = int(round(train_config.holdout_fraction * train.num_objects))
    if train.num_objects > 1 and train_config.holdout_fraction > 0:
        n_hold = min(max(n_hold, 1), train.num_objects - 1)
    else:
        n_hold = 0
    hold, fit = order[:n_hold], order[n_hold:]
    if n_hold == 0:
        hold = fit
        logger.warning("No held-out objects; validation metrics are computed on the training set")

    weights = init_weights(reg_config, targets.shape[-1], rng)
    params = weights.parameters()
    states = [AdamState.zeros(p.shape) for p in params]
    last_good = weights
    loss_curve, val_curve = [], []
    n_queries = queries.shape[1]

    for epoch in range(train_config.epochs):
        batch_losses = []
        perm = rng.permutation(fit)
        for s in range(0, len(perm), train_config.batch_objects):
            objs = perm[s:s + train_config.batch_objects]
            q_idx = np.stack([rng.choice(n_queries, size=min(train_config.batch_queries, n_queries), replace=False)
                              for _ in objs])
            c_b = clouds[objs]
            q_b = np.take_along_axis(queries[objs], q_idx[:, :, None], axis=1)
            t_b = np.take_along_axis(targets[objs], q_idx[:, :, None], axis=1)
            if train_config.augment_rotations:
                rots = np.stack([haar_random_rotation(rng) for _ in objs])
                c_b = np.einsum("bij,bpj->bpi", rots, c_b)
                q_b = np.einsum("bij,bpj->bpi", rots, q_b)

            inputs, zs, acts, enc_cache = _forward_batch(weights, c_b, q_b)
            loss, g_out = _loss_and_grad(acts[-1], t_b.reshape(-1, t_b.shape[-1]), kind)
            if not np.isfinite(loss):
                raise FieldTrainingError(f"training diverged at epoch {epoch}", checkpoint=last_good)
            dec_grads, g_inputs = decoder_backward(weights, inputs, zs, acts, g_out)
            g_embedding = g_inputs[:, 3:].reshape(len(objs), q_b.shape[1], -1).sum(axis=1)
            enc_grads = encoder_backward(weights, enc_cache, g_embedding)

            grads = [g for layer in enc_grads + dec_grads for g in layer]
            updated = []
            for i, (p, g) in enumerate(zip(params, grads)):
                p_new, states[i] = adam_step(p, g, states[i], train_config.lr)
                updated.append(p_new)
            params = updated
            weights = weights.with_parameters(params)
            batch_losses.append(loss)

        epoch_loss = float(np.mean(batch_losses)) if batch_losses else float("nan")
        val = evaluate(weights, clouds[hold], queries[hold], targets[hold], kind)
        if not (np.isfinite(epoch_loss) and np.isfinite(val["loss"])):
            raise FieldTrainingError(f"training diverged at epoch {epoch}", checkpoint=last_good)
        last_good = weights
        loss_curve.append(epoch_loss)
        val_curve.append(val["loss"])
        logger.info("Epoch %d/%d: train loss %.5f, val loss %.5f", epoch + 1, train_config.epochs,
                    epoch_loss, val["loss"])

    final = evaluate(weights, clouds[hold], queries[hold], targets[hold], kind)
    weights.metadata = TrainingMetadata(
        target_kind=kind,
        epochs=train_config.epochs,
        loss_curve=loss_curve,
        val_loss_curve=val_curve,
        heldout_r2=final.get("r2", []),
        heldout_mean_r2=final.get("mean_r2"),
        heldout_accuracy=final.get("accuracy"),
        seed=train_config.seed,
        scf=train.scf,
    )
    if kind == TargetKind.SCF:
        logger.info("Held-out mean R² %.3f (per band %s)", final["mean_r2"],
                    ", ".join(f"{v:.3f}" for v in final["r2"]))
    else:
        logger.info("Held-out occupancy accuracy %.3f", final["accuracy"])
    return weights

"""Feature-inversion attack: train a mirrored decoder on leaked cut-layer features.

The decoder reverses the extractor layer by layer (conv -> transposed conv,
relu -> tanh, maxpool -> 2x nearest upsampling) and finishes with a tanh
rescaled onto [0, 1]. Reconstruction quality is scored as
``1 - 1000 * mean_i(mean pixel squared error of sample i)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .model import LayerSpec
from .tensor import make_rng

log = logging.getLogger(__name__)

DECODER_PREFIX = "dec."


class AttackDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class DecoderSpec:
    layers: tuple[LayerSpec, ...]
    depth: int
    input_shape: tuple[int, ...]     # per-sample feature shape the decoder consumes

    def output_shape(self) -> tuple[int, ...]:
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape


def invert_layer(layer: LayerSpec) -> LayerSpec:
    if layer.kind == "conv":
        return M.transposed_conv(layer.out_channels, layer.in_channels, layer.kernel, layer.stride, layer.pad)
    if layer.kind == "relu":
        return LayerSpec("tanh")
    if layer.kind == "maxpool":
        return LayerSpec("upsample")
    raise ValueError(f"cannot invert a {layer.kind} layer")


def build_decoder(extractor: Sequence[LayerSpec], input_shape: tuple[int, ...] = (), depth: int = 0) -> DecoderSpec:
    """Mirror ``extractor`` in reverse order; empty in, empty out.

    ``input_shape`` is the per-sample shape of the extractor's *input*; it is
    used to derive the feature shape and to check the decoder maps back to it.
    """
    extractor = list(extractor)
    if not extractor:
        return DecoderSpec((), depth, tuple(input_shape))
    layers = [invert_layer(layer) for layer in reversed(extractor)]
    layers.append(LayerSpec("tanh", scaled=True))
    feature_shape = tuple(input_shape)
    if input_shape:
        for layer in extractor:
            feature_shape = layer.output_shape(feature_shape)
    spec = DecoderSpec(tuple(layers), depth, feature_shape)
    if input_shape and spec.output_shape() != tuple(input_shape):
        raise M.T.ShapeError(f"decoder maps {feature_shape} to {spec.output_shape()}, expected {tuple(input_shape)}")
    return spec


def decoder_for(model: M.ModelSpec, depth: int) -> DecoderSpec:
    plan = M.split(model, depth)
    return build_decoder([model.layers[i] for i in plan.extractor], model.input_shape, depth)


def init_decoder(decoder: DecoderSpec, seed: int) -> M.Params:
    return M.init_params(decoder.layers, seed, "decoder-init", DECODER_PREFIX, rng_keys=(decoder.depth,))


def decode(decoder: DecoderSpec, params: M.Params, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    if not decoder.layers:
        return features
    outs = [M.forward(decoder.layers, params, features[s:s + batch_size], prefix=DECODER_PREFIX)[0]
            for s in range(0, len(features), batch_size)]
    return np.concatenate(outs)


def extract_features(model: M.ModelSpec, params: M.Params, depth: int, images: np.ndarray,
                     batch_size: int = 256) -> np.ndarray:
    """Cut-layer features for ``images`` under the frozen extractor at ``depth``."""
    part = M.split(model, depth).extractor
    outs = [M.forward(model, params, images[s:s + batch_size], part)[0] for s in range(0, len(images), batch_size)]
    return np.concatenate(outs)


def mse(a: np.ndarray, b: np.ndarray) -> float:
    d = a.astype(np.float64) - b
    return float(np.mean(d * d))


def windowed_trend_ok(curve: Sequence[float], window: int = 100, tolerance: float = 0.05) -> bool:
    """True when each window's mean loss is at most ``1 + tolerance`` times the previous one."""
    n = len(curve) // window
    means = [float(np.mean(curve[i * window:(i + 1) * window])) for i in range(n)]
    return all(b <= a * (1 + tolerance) for a, b in zip(means, means[1:]))


@dataclass
class DecoderTraining:
    params: M.Params
    losses: list[float]
    initial_loss: float

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else self.initial_loss


def train_decoder(decoder: DecoderSpec, features: np.ndarray, images: np.ndarray, steps: int = 5000,
                  lr: float = 0.01, batch_size: int = 64, seed: int = 0, params: M.Params | None = None,
                  divergence_factor: float = 10.0, divergence_patience: int = 200) -> DecoderTraining:
    """Fit the decoder by SGD on mean squared error between decoded features and images.

    ``features`` are precomputed by the frozen extractor, so the victim model
    is never touched. Raises ``AttackDiverged`` if the batch loss stays above
    ``divergence_factor`` times the initial loss for ``divergence_patience``
    consecutive steps.
    """
    if len(features) != len(images):
        raise ValueError(f"{len(features)} feature rows for {len(images)} images")
    params = dict(params) if params is not None else init_decoder(decoder, seed)
    if not decoder.layers:
        return DecoderTraining(params, [], mse(features, images))
    probe = slice(0, min(len(images), 256))
    initial = mse(decode(decoder, params, features[probe]), images[probe])
    rng = make_rng(seed, "attack", decoder.depth)
    losses: list[float] = []
    over = 0
    for step in range(steps):
        idx = rng.integers(0, len(images), size=min(batch_size, len(images)))
        x = images[idx]
        out, cache = M.forward(decoder.layers, params, features[idx], prefix=DECODER_PREFIX)
        diff = out - x
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        grad = diff * out.dtype.type(2.0 / diff.size)
        _, grads = M.backward(decoder.layers, params, cache, grad)
        M.apply_sgd(params, grads, lr)
        losses.append(loss)
        over = over + 1 if loss > divergence_factor * initial else 0
        if over >= divergence_patience:
            raise AttackDiverged(f"decoder loss stayed above {divergence_factor}x the initial "
                                 f"{initial:.4g} for {divergence_patience} steps (step {step}, loss {loss:.4g})")
        if step % 1000 == 0:
            log.debug("depth %d step %d loss %.5f", decoder.depth, step, loss)
    return DecoderTraining(params, losses, initial)


def reconstruction_score(originals: np.ndarray, reconstructions: np.ndarray) -> float:
    """Raw score ``1 - 1000 * mean over samples of the per-sample pixel-mean squared error``.

    1.0 means a perfect reconstruction; multiply by 100 for the presentation form.
    """
    originals = np.asarray(originals, dtype=np.float64)
    reconstructions = np.asarray(reconstructions, dtype=np.float64)
    if originals.shape != reconstructions.shape:
        raise ValueError(f"originals {originals.shape} and reconstructions {reconstructions.shape} differ in shape")
    if originals.ndim < 2 or len(originals) == 0:
        raise ValueError(f"need a non-empty batch of samples, got shape {originals.shape}")
    per_sample = ((originals - reconstructions) ** 2).reshape(len(originals), -1).mean(axis=1)
    return 1.0 - 1000.0 * float(per_sample.mean())


def presentation_score(raw: float) -> float:
    return raw * 100.0


@dataclass
class ReconstructionReport:
    depth: int
    decoder_loss: float
    score_raw: float
    images: list[Path] = field(default_factory=list)
    loss_curve: list[float] = field(default_factory=list)
    trend_ok: bool = True

    @property
    def score(self) -> float:
        return presentation_score(self.score_raw)


def run_attack(model: M.ModelSpec, params: M.Params, depth: int, attack_images: np.ndarray,
               eval_images: np.ndarray, steps: int = 5000, lr: float = 0.01, batch_size: int = 64,
               seed: int = 0, out_dir: Path | None = None, grid: int = 8) -> ReconstructionReport:
    """Build, train and score the decoder for one cut depth."""
    decoder = decoder_for(model, depth)
    train_feats = extract_features(model, params, depth, attack_images)
    trained = train_decoder(decoder, train_feats, attack_images, steps, lr, batch_size, seed)
    recon = decode(decoder, trained.params, extract_features(model, params, depth, eval_images))
    report = ReconstructionReport(depth, trained.final_loss, reconstruction_score(eval_images, recon),
                                  loss_curve=trained.losses, trend_ok=windowed_trend_ok(trained.losses))
    if out_dir is not None:
        out_dir = Path(out_dir)
        n = min(grid * grid, len(eval_images))
        report.images = [
            write_image_grid(out_dir / f"depth{depth}_original", eval_images[:n], grid),
            write_image_grid(out_dir / f"depth{depth}_reconstructed", recon[:n], grid),
        ]
    return report


def write_image_grid(path, images: np.ndarray, cols: int = 8, pad: int = 1) -> Path:
    """Tile [N,C,H,W] images in [0,1] into a plain PGM (C=1) or PPM (C=3) file.

    The extension is added from the channel count.
    """
    images = np.clip(np.asarray(images, dtype=np.float64), 0, 1)
    n, c, h, w = images.shape
    if c not in (1, 3):
        raise ValueError(f"can only write 1- or 3-channel images, got {c}")
    cols = max(1, min(cols, n))
    rows = -(-n // cols)
    canvas = np.zeros((c, rows * (h + pad) + pad, cols * (w + pad) + pad))
    for i in range(n):
        r, q = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        canvas[:, y:y + h, x:x + w] = images[i]
    pixels = np.rint(canvas * 255).astype(np.int64)
    path = Path(path).with_suffix(".pgm" if c == 1 else ".ppm")
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width = pixels.shape[1:]
    if c == 1:
        body = pixels[0]
    else:
        body = pixels.transpose(1, 2, 0).reshape(height, width * 3)
    lines = [f"{'P2' if c == 1 else 'P3'}", f"{width} {height}", "255"]
    lines += [" ".join(map(str, row)) for row in body]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def read_pgm(path) -> np.ndarray:
    """Read a plain PGM/PPM back as integer pixels ([H,W] or [H,W,3])."""
    tokens = Path(path).read_text(encoding="ascii").split()
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    values = np.array(tokens[4:], dtype=np.int64)
    if magic == "P2":
        return values.reshape(height, width)
    if magic == "P3":
        return values.reshape(height, width, 3)
    raise ValueError(f"{path}: not a plain PGM/PPM ({magic})")


def format_reports(reports: Sequence[ReconstructionReport]) -> str:
    lines = [f"{'depth':>5}  {'decoder_loss':>12}  {'score_raw':>10}  {'score':>8}",
             "-" * 42]
    for r in reports:
        lines.append(f"{r.depth:>5}  {r.decoder_loss:>12.6f}  {r.score_raw:>10.5f}  {r.score:>8.2f}")
    lines.append("score = 100 x raw; raw = 1 - 1000 * mean per-sample pixel MSE")
    return "\n".join(lines) + "\n"

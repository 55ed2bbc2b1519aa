"""Coordinate networks for the body and the compactified scene layers.

Two networks cover the whole scene. A body network maps canonical-frame
positions to a signed distance, a feature vector, and radiance. A scene
network maps the 4-tuple layer coordinate plus a per-frame latent code to
density and radiance; the same weights serve the occlusion and background
layers, told apart only by the sign of the depth channel and by which
latent bank conditions the call.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class PositionalEncoding:
    """Fourier features: [x, sin(2^k pi x), cos(2^k pi x)] for k < octaves."""

    octaves: int
    input_dim: int
    include_input: bool = True

    @property
    def out_dim(self) -> int:
        return self.input_dim * (2 * self.octaves + int(self.include_input))

    def __call__(self, x):
        parts = [x] if self.include_input else []
        for k in range(self.octaves):
            scaled = x * (np.pi * (2.0**k))
            parts.append(ad.sin(scaled))
            parts.append(ad.cos(scaled))
        if not parts:
            return ad.as_tensor(x)
        if len(parts) == 1:
            return ad.as_tensor(parts[0])
        return ad.concatenate([ad.as_tensor(p) for p in parts], axis=-1)


@dataclass(frozen=True)
class MlpSpec:
    """Shape of one MLP: ``depth`` linear layers of ``width`` features."""

    in_dim: int
    width: int
    depth: int
    out_dim: int
    activation: str = "relu"  # relu | softplus
    skip_at: int | None = None  # layer index whose input gets the encoding again
    skip_dim: int = 0

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = []
        for i in range(self.depth):
            d_in = self.in_dim if i == 0 else self.width
            if self.skip_at is not None and i == self.skip_at:
                d_in += self.skip_dim
            d_out = self.out_dim if i == self.depth - 1 else self.width
            dims.append((d_in, d_out))
        return dims

    @property
    def param_count(self) -> int:
        return sum((i + 1) * o for i, o in self.layer_dims())


class Mlp:
    """Multilayer perceptron whose weights live in a shared ParameterStore."""

    def __init__(
        self,
        store: ParameterStore,
        prefix: str,
        spec: MlpSpec,
        rng: np.random.Generator,
        geometric_radius: float | None = None,
        raw_input_dim: int = 0,
    ):
        self.spec = spec
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        dims = spec.layer_dims()
        for i, (d_in, d_out) in enumerate(dims):
            w = rng.normal(0.0, np.sqrt(2.0 / d_out), size=(d_in, d_out))
            b = np.zeros(d_out)
            if geometric_radius is not None:
                w, b = self._geometric_init(i, d_in, d_out, w, b, rng, geometric_radius, raw_input_dim)
            self.weights.append(store.add(f"{prefix}.w{i}", w))
            self.biases.append(store.add(f"{prefix}.b{i}", b))

    def _geometric_init(self, i, d_in, d_out, w, b, rng, radius, raw_dim):
        """Bias the net toward s(x) = |x| - radius at initialization.

        Encoded sin/cos channels and the skip block start at zero weight so
        the initial function sees only the raw coordinates, which is what
        makes the spherical level set come out.
        """
        if i == self.spec.depth - 1:
            w = rng.normal(np.sqrt(np.pi / d_in), 1e-4, size=(d_in, d_out))
            w[:, 1:] = rng.normal(0.0, np.sqrt(2.0 / d_out), size=(d_in, d_out - 1))
            b = np.zeros(d_out)
            b[0] = -radius
        if i == 0 and raw_dim:
            w[raw_dim:, :] = 0.0
        if self.spec.skip_at is not None and i == self.spec.skip_at:
            w[self.spec.width :, :] = 0.0
        return w, b

    def __call__(self, x: Tensor, skip_input: Tensor | None = None) -> Tensor:
        h = x
        for i in range(self.spec.depth):
            if self.spec.skip_at is not None and i == self.spec.skip_at:
                h = ad.concatenate([h, skip_input if skip_input is not None else x], axis=-1)
            h = ad.matmul(h, self.weights[i]) + self.biases[i]
            if i < self.spec.depth - 1:
                if self.spec.activation == "softplus":
                    h = ad.softplus(h, beta=100.0)
                else:
                    h = ad.relu(h)
        return h


@dataclass
class FieldConfig:
    """Network sizes; defaults follow the reference training setup."""

    pos_octaves: int = 6
    view_octaves: int = 4
    fg_depth: int = 8
    fg_width: int = 256
    fg_rgb_depth: int = 4
    fg_rgb_width: int = 256
    fg_skip_at: int = 4
    scene_depth: int = 8
    scene_width: int = 256
    scene_rgb_width: int = 256
    latent_dim: int = 32
    init_radius: float = 0.5
    beta_init: float = 0.1
    beta_floor: float = 1e-4

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "FieldConfig":
        cfg = FieldConfig()
        for k, v in d.items():
            if not hasattr(cfg, k):
                raise ValueError(f"unknown field config key {k!r}")
            setattr(cfg, k, type(getattr(cfg, k))(v))
        return cfg


class TriLayerModel:
    """All trainable state: both networks, latent banks, density scale."""

    def __init__(self, n_frames: int, config: FieldConfig | None = None, seed: int = 3):
        self.config = cfg = config or FieldConfig()
        self.n_frames = n_frames
        self.store = ParameterStore()
        rng = np.random.default_rng(seed)

        self.pos_enc = PositionalEncoding(cfg.pos_octaves, 3)
        self.quad_enc = PositionalEncoding(cfg.pos_octaves, 4)
        self.view_enc = PositionalEncoding(cfg.view_octaves, 3)

        self.fg_imp = Mlp(
            self.store,
            "fg.imp",
            MlpSpec(
                in_dim=self.pos_enc.out_dim,
                width=cfg.fg_width,
                depth=cfg.fg_depth,
                out_dim=1 + cfg.fg_width,
                activation="softplus",
                skip_at=cfg.fg_skip_at if 0 < cfg.fg_skip_at < cfg.fg_depth else None,
                skip_dim=self.pos_enc.out_dim,
            ),
            rng,
            geometric_radius=cfg.init_radius,
            raw_input_dim=3,
        )
        self.fg_rgb = Mlp(
            self.store,
            "fg.rgb",
            MlpSpec(
                in_dim=self.pos_enc.out_dim + cfg.fg_width,
                width=cfg.fg_rgb_width,
                depth=cfg.fg_rgb_depth,
                out_dim=3,
            ),
            rng,
        )
        self.scene_imp = Mlp(
            self.store,
            "scene.imp",
            MlpSpec(
                in_dim=self.quad_enc.out_dim + cfg.latent_dim,
                width=cfg.scene_width,
                depth=cfg.scene_depth,
                out_dim=1 + cfg.scene_width,
            ),
            rng,
        )
        self.scene_rgb = Mlp(
            self.store,
            "scene.rgb",
            MlpSpec(
                in_dim=cfg.scene_width + self.view_enc.out_dim,
                width=cfg.scene_rgb_width,
                depth=2,
                out_dim=3,
            ),
            rng,
        )
        self.store.add("latent.occ", rng.normal(0.0, 0.01, size=(n_frames, cfg.latent_dim)))
        self.store.add("latent.bg", rng.normal(0.0, 0.01, size=(n_frames, cfg.latent_dim)))
        self.store.add("density.beta_raw", np.log(cfg.beta_init - cfg.beta_floor))

    # forward passes --------------------------------------------------------

    def beta(self) -> Tensor:
        """Laplace scale, kept positive by construction."""
        return ad.exp(self.store["density.beta_raw"]) + self.config.beta_floor

    def eval_fg(self, x: Tensor | np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """Canonical (N, 3) points -> signed distance (N,), feature, rgb (N, 3)."""
        x = ad.as_tensor(x)
        enc = self.pos_enc(x)
        out = self.fg_imp(enc, skip_input=enc)
        s = out[..., 0]
        feat = out[..., 1:]
        rgb = ad.sigmoid(self.fg_rgb(ad.concatenate([enc, feat], axis=-1)))
        return s, feat, rgb

    def eval_scene(
        self,
        sample4: Tensor | np.ndarray,
        latent_rows: Tensor,
        view_dirs: np.ndarray,
    ) -> tuple[Tensor, Tensor]:
        """Compactified (N, 4) samples -> density (N,), rgb (N, 3).

        ``latent_rows`` is (N, latent_dim); ``view_dirs`` is (N, 3) and is
        treated as a constant with respect to the parameters.
        """
        enc = self.quad_enc(ad.as_tensor(sample4))
        h = self.scene_imp(ad.concatenate([enc, latent_rows], axis=-1))
        sigma = ad.softplus(h[..., 0])
        feat = h[..., 1:]
        venc = self.view_enc(Tensor(np.asarray(view_dirs, dtype=np.float64)))
        rgb = ad.sigmoid(self.scene_rgb(ad.concatenate([feat, venc], axis=-1)))
        return sigma, rgb

    def latent_rows(self, layer: str, frame_ids: np.ndarray) -> Tensor:
        """Per-sample latent codes for one bank, gathered by frame index."""
        bank = self.store[f"latent.{layer}"]
        ids = np.asarray(frame_ids, dtype=np.int64)
        if np.any(ids < 0) or np.any(ids >= self.n_frames):
            raise CheckpointError(f"frame id out of range 0..{self.n_frames - 1}")
        return bank[ids]

    def sdf_only(self, x: Tensor) -> Tensor:
        enc = self.pos_enc(x)
        return self.fg_imp(enc, skip_input=enc)[..., 0]


def spatial_gradient(fn, x: np.ndarray) -> tuple[Tensor, Tensor]:
    """Reverse-mode input gradient of a scalar field over (N, 3) points.

    Returns (value, gradient); the gradient is itself a graph node, so a
    loss built from it backpropagates into the field parameters.
    """
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    value = fn(xt)
    grad = ad.grad(value, [xt])[0]
    return value, grad


# checkpoints ---------------------------------------------------------------


def save_checkpoint(
    path,
    store: ParameterStore,
    step: int,
    extras: dict[str, np.ndarray] | None = None,
    rng_state: dict | None = None,
    meta: dict | None = None,
) -> None:
    """Write parameters (and optimizer extras) as JSON header + raw float64.

    Serialization is deterministic: sorted keys, no timestamps, fixed byte
    order, so identical state produces identical files. ``meta`` carries
    whatever the writer needs to rebuild the model (sizes, pipeline mode).
    """
    extras = extras or {}
    names = store.names()
    header = {
        "format": 1,
        "step": int(step),
        "params": [{"name": n, "shape": list(store[n].shape)} for n in names],
        "extras": [{"name": k, "shape": list(np.asarray(v).shape)} for k, v in sorted(extras.items())],
        "rng": rng_state,
        "meta": meta or {},
    }
    blob = b"".join(store[n].data.astype("<f8").tobytes() for n in names)
    blob += b"".join(np.ascontiguousarray(extras[k], dtype="<f8").tobytes() for k, _ in sorted(extras.items()))
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(blob)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (header, name -> array) for params and extras."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from e
    sep = raw.find(b"\n")
    if sep < 0:
        raise CheckpointError("checkpoint missing header separator")
    try:
        header = json.loads(raw[:sep].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint header is not valid JSON: {e}") from e
    if header.get("format") != 1:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format')!r}")
    blob = raw[sep + 1 :]
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in list(header["params"]) + list(header["extras"]):
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(blob):
            raise CheckpointError("checkpoint truncated")
        arrays[entry["name"]] = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise CheckpointError("checkpoint has trailing bytes")
    return header, arrays


def restore_model(model: TriLayerModel, arrays: dict[str, np.ndarray]) -> None:
    """Load parameter arrays into the model store by name."""
    for name in model.store.names():
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        p = model.store[name]
        if arrays[name].shape != p.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {arrays[name].shape}, model {p.shape}"
            )
        p.data = arrays[name].astype(np.float64)

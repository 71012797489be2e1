"""Layer specs, model builders, and the variational-bottleneck block.

Three baseline presets are provided: ``smlp`` (2 hidden dense+ReLU blocks),
``dmlp`` (4 hidden blocks), and ``convnet`` (4 conv/sigmoid stages, stride 2,
followed by a dense classifier). Any preset accepts an optional
``+precode(k=..., beta=..., position=...)`` suffix that inserts a stochastic
encoder/decoder bottleneck, by default between the last feature-extracting
layer and the output layer.

Weights are initialized uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
"""

import re
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import BuildError, UsageError
from .tensor import Tensor


@dataclass
class LayerSpec:
    kind: str  # dense | conv2d | relu | sigmoid | flatten | softmax-output | precode
    units: int = 0
    channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    k: int = 0
    beta: float = 0.0

    def to_dict(self):
        d = {"kind": self.kind}
        for f in ("units", "channels", "kernel", "stride", "padding", "k", "beta"):
            v = getattr(self, f)
            if v:
                d[f] = v
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ModelSpec:
    name: str
    layers: list
    dataset_shape: tuple  # (H, W, C)
    classes: int

    @property
    def precode_positions(self):
        return [i for i, l in enumerate(self.layers) if l.kind == "precode"]

    def to_dict(self):
        return {
            "name": self.name,
            "layers": [l.to_dict() for l in self.layers],
            "dataset_shape": list(self.dataset_shape),
            "classes": self.classes,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            layers=[LayerSpec.from_dict(l) for l in d["layers"]],
            dataset_shape=tuple(d["dataset_shape"]),
            classes=int(d["classes"]),
        )


class Dense:
    def __init__(self, w, b):
        self.w = w
        self.b = b

    def __call__(self, x, ctx):
        return ops.add(ops.matmul(x, self.w), self.b)

    def params(self):
        return [("w", self.w), ("b", self.b)]


class Conv2d:
    def __init__(self, w, b, stride, padding):
        self.w = w
        self.b = b
        self.stride = stride
        self.padding = padding

    def __call__(self, x, ctx):
        return ops.add(ops.conv2d(x, self.w, self.stride, self.padding), self.b)

    def params(self):
        return [("w", self.w), ("b", self.b)]


class Activation:
    def __init__(self, kind):
        self.kind = kind
        self.fn = ops.relu if kind == "relu" else ops.sigmoid

    def __call__(self, x, ctx):
        return self.fn(x)

    def params(self):
        return []


class Flatten:
    def __call__(self, x, ctx):
        n = 1
        for d in x.shape[1:]:
            n *= d
        return ops.reshape(x, (x.shape[0], n))

    def params(self):
        return []


class PrecodeBlock:
    """Stochastic bottleneck: dense encoder to (mu, log-variance), a
    reparameterized sample b = mu + sigma * eps, and a linear dense decoder
    restoring the incoming feature width."""

    def __init__(self, enc_w, enc_b, dec_w, dec_b, k, beta, rng):
        self.enc_w = enc_w
        self.enc_b = enc_b
        self.dec_w = dec_w
        self.dec_b = dec_b
        self.k = k
        self.beta = beta
        self.rng = rng

    def __call__(self, z, ctx):
        k = self.k
        h = ops.add(ops.matmul(z, self.enc_w), self.enc_b)
        mu = ops.slice_(h, (slice(None), slice(0, k)))
        logvar = ops.slice_(h, (slice(None), slice(k, 2 * k)))
        sigma = ops.exp(ops.mul(logvar, ops.constant(0.5)))
        eps = ctx.draw_eps(self, (z.shape[0], k))
        b = ops.add(mu, ops.mul(sigma, ops.constant(eps)))
        zhat = ops.add(ops.matmul(b, self.dec_w), self.dec_b)
        ctx.stats.append((mu, sigma))
        return zhat

    def params(self):
        return [
            ("enc.w", self.enc_w),
            ("enc.b", self.enc_b),
            ("dec.w", self.dec_w),
            ("dec.b", self.dec_b),
        ]


class _ForwardCtx:
    """Per-forward bookkeeping: bottleneck stats and the eps policy."""

    def __init__(self, eps, rng):
        self.stats = []
        self._eps = eps
        self._rng = rng
        self._block_idx = 0

    def draw_eps(self, block, shape):
        i = self._block_idx
        self._block_idx += 1
        if self._eps is None:
            rng = self._rng if self._rng is not None else block.rng
            return rng.standard_normal(shape)
        if isinstance(self._eps, str) and self._eps == "zero":
            return np.zeros(shape)
        return np.asarray(self._eps[i], dtype=np.float64).reshape(shape)


class Model:
    """Ordered layer composition with named parameters in definition order."""

    def __init__(self, spec, layers, seed):
        self.spec = spec
        self.layers = layers
        self.seed = seed
        self.named_params = []
        for i, layer in enumerate(layers):
            for suffix, p in layer.params():
                name = f"{i}.{spec.layers[i].kind}.{suffix}"
                p.name = name
                self.named_params.append((name, p))
        self.blocks = [l for l in layers if isinstance(l, PrecodeBlock)]

    @property
    def classes(self):
        return self.spec.classes

    @property
    def param_tensors(self):
        return [p for _, p in self.named_params]

    @property
    def input_kind(self):
        return "image" if self.spec.layers[0].kind == "conv2d" else "flat"

    @property
    def input_shape(self):
        """Per-sample model input shape."""
        h, w, c = self.spec.dataset_shape
        if self.input_kind == "image":
            return (c, h, w)
        return (h * w * c,)

    @property
    def output_layer_name(self):
        for i in range(len(self.spec.layers) - 1, -1, -1):
            if self.spec.layers[i].kind == "softmax-output":
                return f"{i}.softmax-output"
        raise UsageError("model has no softmax-output layer")

    def forward(self, x, mode="train", eps=None, rng=None):
        """Run the network; returns (logits, [(mu, sigma), ...]).

        Bottleneck sampling is active in every mode; pass eps="zero" for the
        deterministic path through mu, or a list of arrays to pin the noise.
        """
        if mode not in ("train", "eval", "attack"):
            raise UsageError(f"unknown forward mode {mode!r}")
        if not isinstance(x, Tensor):
            x = ops.constant(np.asarray(x, dtype=np.float64))
        expected = self.input_shape
        if tuple(x.shape[1:]) != expected:
            raise UsageError(f"input shape {x.shape[1:]} does not match model {expected}")
        ctx = _ForwardCtx(eps, rng)
        out = x
        for layer in self.layers:
            out = layer(out, ctx)
        return out, ctx.stats

    def predict(self, images, rng=None, eps=None, batch_size=256):
        """Class predictions for dataset-layout images (N, H, W, C)."""
        from .tensor import no_grad

        xs = self.inputs_from_images(images)
        preds = []
        with no_grad():
            for i in range(0, xs.shape[0], batch_size):
                logits, _ = self.forward(xs[i : i + batch_size], mode="eval", eps=eps, rng=rng)
                preds.append(np.argmax(logits.data, axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    def inputs_from_images(self, images):
        """Dataset layout (N, H, W, C) -> model input layout."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:  # single image
            images = images[None]
        if self.input_kind == "image":
            return np.ascontiguousarray(images.transpose(0, 3, 1, 2))
        return images.reshape(images.shape[0], -1)

    def images_from_inputs(self, xs):
        """Model input layout -> dataset layout (N, H, W, C)."""
        xs = np.asarray(xs, dtype=np.float64)
        h, w, c = self.spec.dataset_shape
        if self.input_kind == "image":
            return np.ascontiguousarray(xs.reshape(-1, c, h, w).transpose(0, 2, 3, 1))
        return xs.reshape(-1, h, w, c)

    def snapshot(self):
        return {name: p.data.copy() for name, p in self.named_params}

    def load_snapshot(self, snap):
        for name, p in self.named_params:
            if name not in snap:
                raise UsageError(f"snapshot missing parameter {name!r}")
            if snap[name].shape != p.data.shape:
                raise UsageError(f"snapshot shape mismatch for {name!r}")
            p.data[...] = snap[name]

    def reseed_blocks(self, seed):
        """Give every bottleneck an independent stream derived from seed."""
        ss = np.random.SeedSequence(seed)
        for block, child in zip(self.blocks, ss.spawn(len(self.blocks))):
            block.rng = np.random.default_rng(child)


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_model(spec, seed=0):
    """Materialize a ModelSpec; raises BuildError if shapes do not compose."""
    h, w, c = spec.dataset_shape
    first = spec.layers[0].kind if spec.layers else "dense"
    shape = (c, h, w) if first == "conv2d" else h * w * c  # int means flat width
    ss = np.random.SeedSequence(seed)
    init_rng = np.random.default_rng(ss.spawn(1)[0])
    layers = []
    prev_desc = "input"
    for i, ls in enumerate(spec.layers):
        desc = f"layer {i} ({ls.kind})"
        if ls.kind in ("dense", "softmax-output"):
            if not isinstance(shape, int):
                raise BuildError(f"{desc} needs a flat input but {prev_desc} produced {shape}")
            units = spec.classes if ls.kind == "softmax-output" else ls.units
            if units < 1:
                raise BuildError(f"{desc} has no units")
            wt = Tensor(_uniform_init(init_rng, (shape, units), shape), requires_grad=True)
            bt = Tensor(_uniform_init(init_rng, (units,), shape), requires_grad=True)
            layers.append(Dense(wt, bt))
            shape = units
        elif ls.kind == "conv2d":
            if isinstance(shape, int):
                raise BuildError(f"{desc} needs an image input but {prev_desc} produced width {shape}")
            ci, hh, ww = shape
            fan_in = ci * ls.kernel * ls.kernel
            wt = Tensor(
                _uniform_init(init_rng, (ls.channels, ci, ls.kernel, ls.kernel), fan_in),
                requires_grad=True,
            )
            bt = Tensor(_uniform_init(init_rng, (ls.channels, 1, 1), fan_in), requires_grad=True)
            ho = (hh + 2 * ls.padding - ls.kernel) // ls.stride + 1
            wo = (ww + 2 * ls.padding - ls.kernel) // ls.stride + 1
            if ho < 1 or wo < 1:
                raise BuildError(f"{desc} does not fit input {(hh, ww)} from {prev_desc}")
            layers.append(Conv2d(wt, bt, ls.stride, ls.padding))
            shape = (ls.channels, ho, wo)
        elif ls.kind in ("relu", "sigmoid"):
            layers.append(Activation(ls.kind))
        elif ls.kind == "flatten":
            if isinstance(shape, int):
                raise BuildError(f"{desc} after flat {prev_desc}")
            shape = int(np.prod(shape))
            layers.append(Flatten())
        elif ls.kind == "precode":
            if not isinstance(shape, int):
                raise BuildError(f"{desc} needs a flat input but {prev_desc} produced {shape}")
            if ls.k < 1:
                raise BuildError(f"{desc} has non-positive bottleneck width")
            z_dim, k = shape, ls.k
            enc_w = Tensor(_uniform_init(init_rng, (z_dim, 2 * k), z_dim), requires_grad=True)
            enc_b = Tensor(_uniform_init(init_rng, (2 * k,), z_dim), requires_grad=True)
            dec_w = Tensor(_uniform_init(init_rng, (k, z_dim), k), requires_grad=True)
            dec_b = Tensor(_uniform_init(init_rng, (z_dim,), k), requires_grad=True)
            rng = np.random.default_rng(ss.spawn(1)[0])
            layers.append(PrecodeBlock(enc_w, enc_b, dec_w, dec_b, k, ls.beta, rng))
        else:
            raise BuildError(f"unknown layer kind {ls.kind!r} at index {i}")
        prev_desc = desc
    if not spec.layers or spec.layers[-1].kind != "softmax-output":
        raise BuildError("model must end with a softmax-output layer")
    return Model(spec, layers, seed)


def precode_loss(task_loss, blocks, betas):
    """task_loss + sum_i beta_i * KL(N(mu_i, sigma_i) || N(0, 1)).

    The KL uses the diagonal-Gaussian closed form, summed over bottleneck
    dimensions and averaged over the batch.
    """
    if len(blocks) != len(betas):
        raise UsageError(f"{len(blocks)} stat pairs for {len(betas)} betas")
    total = task_loss
    one = ops.constant(1.0)
    half = ops.constant(0.5)
    for (mu, sigma), beta in zip(blocks, betas):
        var = ops.mul(sigma, sigma)
        per_dim = ops.sub(ops.sub(ops.add(ops.mul(mu, mu), var), one), ops.log(var))
        kl = ops.mul(half, ops.mean(ops.sum_(per_dim, axis=1)))
        total = ops.add(total, ops.mul(ops.constant(float(beta)), kl))
    return total


def kl_terms(stats):
    """Per-block KL divergence values (floats) from forward stats."""
    out = []
    for mu, sigma in stats:
        var = sigma.data**2
        out.append(float(0.5 * np.sum(mu.data**2 + var - 1.0 - np.log(var), axis=1).mean()))
    return out


_PRESET_RE = re.compile(
    r"^(?P<base>smlp|dmlp|convnet)"
    r"(?::(?P<width>\d+))?"
    r"(?:\+precode\((?P<args>[^)]*)\))?$"
)


def model_spec(preset, dataset_shape, classes, width=None):
    """Parse a preset string like ``smlp:64+precode(k=16,beta=0.001)``."""
    m = _PRESET_RE.match(preset.strip())
    if m is None:
        raise UsageError(f"unrecognized model preset {preset!r}")
    base = m.group("base")
    if m.group("width"):
        width = int(m.group("width"))
    if width is None:
        width = 1024
    layers = []
    if base in ("smlp", "dmlp"):
        hidden = 2 if base == "smlp" else 4
        for _ in range(hidden):
            layers.append(LayerSpec("dense", units=width))
            layers.append(LayerSpec("relu"))
    else:
        for _ in range(4):
            layers.append(LayerSpec("conv2d", channels=12, kernel=5, stride=2, padding=2))
            layers.append(LayerSpec("sigmoid"))
        layers.append(LayerSpec("flatten"))
    layers.append(LayerSpec("softmax-output"))
    name = preset.strip()
    if m.group("args") is not None:
        kwargs = {"k": 256, "beta": 0.001, "position": None}
        args = m.group("args").strip()
        if args:
            for part in args.split(","):
                key, _, val = part.partition("=")
                key = key.strip()
                if key not in kwargs:
                    raise UsageError(f"unknown precode argument {key!r} in {preset!r}")
                kwargs[key] = float(val) if key == "beta" else int(val)
        pos = kwargs["position"]
        if pos is None:
            pos = len(layers) - 1  # before the output layer
        if pos < 0:
            pos += len(layers)
        if not 0 <= pos < len(layers):
            raise UsageError(f"precode position out of range in {preset!r}")
        layers.insert(pos, LayerSpec("precode", k=kwargs["k"], beta=kwargs["beta"]))
    return ModelSpec(name=name, layers=layers, dataset_shape=tuple(dataset_shape), classes=classes)


def count_params(model):
    return sum(p.data.size for _, p in model.named_params)

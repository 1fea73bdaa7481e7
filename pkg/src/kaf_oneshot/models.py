"""Network construction, weight-shared Siamese evaluation, matching head.

A NetworkSpec is a JSON-friendly list of layer descriptors with
`{"kind": "activation"}` slots that get expanded to the spec's activation
choice (relu, kaf, kaf2d) at build time. Extents are propagated through
the descriptor list, so swapping relu for kaf leaves every inter-layer
extent unchanged, while kaf2d's channel halving flows into whatever
follows it automatically.

Both Siamese branches run through one set of layer objects (a stacked
batch), so weight sharing is exact by construction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .errors import FormatError, NumericError, ParameterError, ShapeError
from .layers import Conv2d, Flatten, Kaf, Kaf2d, Layer, Linear, MaxPool2d, ReLU
from .tensor import Tensor, as_tensor

ACTIVATIONS = ("relu", "kaf", "kaf2d")

_CHECKPOINT_MAGIC = b"KAF1"
_CHECKPOINT_VERSION = 1


@dataclass
class NetworkSpec:
    """Declarative architecture: input extents plus ordered layer descriptors."""

    input_shape: tuple
    layers: list
    activation: str = "relu"
    kaf_d: int = 20
    kaf_bound: float = 3.0
    kaf_per_channel: bool = True
    alpha_init: str = "random"

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.activation not in ACTIVATIONS:
            raise ParameterError(
                f"NetworkSpec: activation {self.activation!r} not one of {ACTIVATIONS}"
            )

    def resolved_layers(self) -> list[dict]:
        """Descriptors with activation slots expanded and extents filled in."""
        shape = self.input_shape
        out = []
        for desc in self.layers:
            desc = dict(desc)
            kind = desc["kind"]
            if kind == "activation":
                desc = {"kind": self.activation}
                if self.activation in ("kaf", "kaf2d"):
                    desc.update(
                        channels=shape[0],
                        d_size=self.kaf_d,
                        bound=self.kaf_bound,
                        per_channel=self.kaf_per_channel,
                        init=self.alpha_init,
                    )
            elif kind == "conv2d":
                desc.setdefault("stride", 1)
                desc["in_channels"] = shape[0]
            elif kind == "linear":
                if len(shape) != 1:
                    raise ShapeError("NetworkSpec: linear layer requires a flattened input")
                desc["in_features"] = shape[0]
            shape = _descriptor_out_shape(desc, shape)
            desc["out_shape"] = shape
            out.append(desc)
        return out

    @property
    def embedding_dim(self) -> int:
        final = self.resolved_layers()[-1]["out_shape"]
        if len(final) != 1:
            raise ShapeError(f"NetworkSpec: final layer must produce a vector, got {final}")
        return final[0]

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_shape=tuple(d["input_shape"]),
            layers=[dict(x) for x in d["layers"]],
            activation=d.get("activation", "relu"),
            kaf_d=int(d.get("kaf_d", 20)),
            kaf_bound=float(d.get("kaf_bound", 3.0)),
            kaf_per_channel=bool(d.get("kaf_per_channel", True)),
            alpha_init=d.get("alpha_init", "random"),
        )


def _descriptor_out_shape(desc: dict, in_shape: tuple) -> tuple:
    kind = desc["kind"]
    if kind == "conv2d":
        probe = Conv2d.__new__(Conv2d)
        probe.in_channels = desc["in_channels"]
        probe.out_channels = desc["out_channels"]
        probe.kernel = desc["kernel"]
        probe.stride = desc.get("stride", 1)
        return probe.out_shape(in_shape)
    if kind == "maxpool2d":
        probe = MaxPool2d(desc["window"])
        return probe.out_shape(in_shape)
    if kind == "flatten":
        return (int(np.prod(in_shape)),)
    if kind == "linear":
        return (desc["out_features"],)
    if kind == "relu":
        return in_shape
    if kind == "kaf":
        return in_shape
    if kind == "kaf2d":
        if in_shape[0] % 2 != 0:
            raise ShapeError(
                f"NetworkSpec: kaf2d requires an even channel extent, got {in_shape[0]}"
            )
        return (in_shape[0] // 2,) + tuple(in_shape[1:])
    raise ParameterError(f"NetworkSpec: unknown layer kind {kind!r}")


def _instantiate(desc: dict, rng: np.random.Generator) -> Layer:
    kind = desc["kind"]
    if kind == "conv2d":
        return Conv2d(desc["in_channels"], desc["out_channels"], desc["kernel"],
                      desc.get("stride", 1), rng=rng)
    if kind == "maxpool2d":
        return MaxPool2d(desc["window"])
    if kind == "flatten":
        return Flatten()
    if kind == "linear":
        return Linear(desc["in_features"], desc["out_features"], rng=rng)
    if kind == "relu":
        return ReLU()
    if kind == "kaf":
        return Kaf(desc["channels"], desc["d_size"], desc["bound"],
                   desc["per_channel"], desc["init"], rng=rng)
    if kind == "kaf2d":
        return Kaf2d(desc["channels"], desc["d_size"], desc["bound"],
                     desc["per_channel"], desc["init"], rng=rng)
    raise ParameterError(f"unknown layer kind {kind!r}")


class Network:
    """An ordered stack of layers with a shared parameter store."""

    model_kind = "network"

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec
        self.seed = int(seed)
        rng = np.random.default_rng(np.random.SeedSequence(self.seed))
        self.layers = [_instantiate(d, rng) for d in spec.resolved_layers()]

    @property
    def embedding_dim(self) -> int:
        return self.spec.embedding_dim

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        x = as_tensor(x, "input batch")
        expected = self.spec.input_shape
        if x.ndim != len(expected) + 1 or tuple(x.shape[1:]) != expected:
            raise ShapeError(
                f"network: input shape {x.shape[1:]} does not match spec {expected}"
            )
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def embed(self, x: Tensor, train: bool = False) -> Tensor:
        return self.forward(x, train=train)

    def backward(self, gout: Tensor) -> Tensor:
        g = as_tensor(gout, "upstream")
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def named_params(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                out.append((f"{i:02d}.{layer.kind}.{name}", p, layer.grads[name]))
        return out

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def clear_caches(self):
        for layer in self.layers:
            layer.clear_cache()

    def param_count(self) -> int:
        return sum(p.size for _, p, _ in self.named_params())


class SiameseModel(Network):
    """Twin evaluation through one weight store; branches cannot diverge."""

    model_kind = "siamese"

    def forward_pair(self, x1: Tensor, x2: Tensor, train: bool = True):
        """Both branches through the shared weights.

        Training stacks the branches into one batch so the single forward
        cache covers both for backward_pair. Evaluation runs two separate
        forwards: identical inputs then produce bit-identical embeddings,
        which the stacked path cannot promise (BLAS rounding differs
        slightly with row position in small matmuls).
        """
        x1 = as_tensor(x1, "x1")
        x2 = as_tensor(x2, "x2")
        if x1.shape != x2.shape:
            raise ShapeError(f"siamese: branch batches differ, {x1.shape} vs {x2.shape}")
        if not train:
            return self.forward(x1, train=False), self.forward(x2, train=False)
        stacked = self.forward(np.concatenate([x1, x2], axis=0), train=True)
        n = x1.shape[0]
        return stacked[:n], stacked[n:]

    def backward_pair(self, g1: Tensor, g2: Tensor):
        return self.backward(np.concatenate([g1, g2], axis=0))


class MatchingModel(Network):
    """Embedding network for episodic matching; the head is parameter-free."""

    model_kind = "matching"


def siamese_forward(model: SiameseModel, x1: Tensor, x2: Tensor, train: bool = True):
    """Embed both inputs through the shared weights; caches kept for backward."""
    return model.forward_pair(x1, x2, train=train)


# ---------------------------------------------------------------------------
# Architecture builders
# ---------------------------------------------------------------------------
# Convolutions are 5x5, stride 1, valid; pooling windows are 2. These are the
# choices that make the listed channel widths compose on the stated input
# sizes (3x3 kernels leave odd extents in front of a pooling layer on both
# the 100x100 and 28x28 stacks, which the fail-fast pooling rejects).


def mnist_spec(activation: str = "relu", **kaf_opts) -> NetworkSpec:
    """28x28 digit backbone: two conv+pool stages, activation on the 500 layer."""
    return NetworkSpec(
        input_shape=(1, 28, 28),
        layers=[
            {"kind": "conv2d", "out_channels": 20, "kernel": 5},
            {"kind": "maxpool2d", "window": 2},
            {"kind": "conv2d", "out_channels": 50, "kernel": 5},
            {"kind": "maxpool2d", "window": 2},
            {"kind": "flatten"},
            {"kind": "linear", "out_features": 500},
            {"kind": "activation"},
            {"kind": "linear", "out_features": 2},
        ],
        activation=activation,
        **kaf_opts,
    )


def att_spec(activation: str = "relu", **kaf_opts) -> NetworkSpec:
    """100x100 face backbone: three conv+activation+pool stages, 5-dim embedding."""
    return NetworkSpec(
        input_shape=(1, 100, 100),
        layers=[
            {"kind": "conv2d", "out_channels": 4, "kernel": 5},
            {"kind": "activation"},
            {"kind": "maxpool2d", "window": 2},
            {"kind": "conv2d", "out_channels": 8, "kernel": 5},
            {"kind": "activation"},
            {"kind": "maxpool2d", "window": 2},
            {"kind": "conv2d", "out_channels": 8, "kernel": 5},
            {"kind": "activation"},
            {"kind": "maxpool2d", "window": 2},
            {"kind": "flatten"},
            {"kind": "linear", "out_features": 500},
            {"kind": "activation"},
            {"kind": "linear", "out_features": 250},
            {"kind": "activation"},
            {"kind": "linear", "out_features": 5},
        ],
        activation=activation,
        **kaf_opts,
    )


def matching_spec(activation: str = "relu", **kaf_opts) -> NetworkSpec:
    """28x28 episodic embedder: two conv+activation+pool stages, three linears."""
    return NetworkSpec(
        input_shape=(1, 28, 28),
        layers=[
            {"kind": "conv2d", "out_channels": 32, "kernel": 5},
            {"kind": "activation"},
            {"kind": "maxpool2d", "window": 2},
            {"kind": "conv2d", "out_channels": 64, "kernel": 5},
            {"kind": "activation"},
            {"kind": "maxpool2d", "window": 2},
            {"kind": "flatten"},
            {"kind": "linear", "out_features": 256},
            {"kind": "activation"},
            {"kind": "linear", "out_features": 128},
            {"kind": "activation"},
            {"kind": "linear", "out_features": 64},
        ],
        activation=activation,
        **kaf_opts,
    )


def build_mnist_siamese(activation: str = "relu", seed: int = 0, **kaf_opts) -> SiameseModel:
    return SiameseModel(mnist_spec(activation, **kaf_opts), seed=seed)


def build_att_siamese(activation: str = "relu", seed: int = 0, **kaf_opts) -> SiameseModel:
    return SiameseModel(att_spec(activation, **kaf_opts), seed=seed)


def build_matching_embedder(activation: str = "relu", seed: int = 0, **kaf_opts) -> MatchingModel:
    return MatchingModel(matching_spec(activation, **kaf_opts), seed=seed)


# ---------------------------------------------------------------------------
# Matching head: cosine attention over the support set
# ---------------------------------------------------------------------------


def matching_forward(
    support_emb: Tensor, support_labels, query_emb: Tensor
) -> tuple[Tensor, Tensor]:
    """Class distribution for one query via softmax cosine attention.

    Attention a_i = softmax_i(cos(query, support_i)); the probability of a
    class is the attention mass of its support items. Returns (probs,
    classes) with classes sorted ascending.
    """
    support_emb = as_tensor(support_emb, "support embeddings")
    query_emb = as_tensor(query_emb, "query embedding")
    if support_emb.ndim != 2 or support_emb.shape[0] == 0:
        raise ShapeError(f"matching: support must be a non-empty (S, E) array, got {support_emb.shape}")
    if query_emb.shape != (support_emb.shape[1],):
        raise ShapeError(
            f"matching: query extent {query_emb.shape} does not match support embedding dim "
            f"{support_emb.shape[1]}"
        )
    labels = np.asarray(support_labels)
    if labels.shape != (support_emb.shape[0],):
        raise ShapeError(f"matching: {labels.shape} labels for {support_emb.shape[0]} supports")

    snorm = np.linalg.norm(support_emb, axis=1)
    qnorm = np.linalg.norm(query_emb)
    if qnorm == 0.0 or np.any(snorm == 0.0):
        raise NumericError("matching: zero-norm embedding has no cosine direction")
    cos = (support_emb @ query_emb) / (snorm * qnorm)
    att = np.exp(cos - cos.max())
    att /= att.sum()
    classes, inv = np.unique(labels, return_inverse=True)
    probs = np.zeros(classes.size)
    np.add.at(probs, inv, att)
    return probs, classes


def matching_episode_loss(
    support_emb: Tensor,
    support_labels,
    query_emb: Tensor,
    query_labels,
) -> tuple[float, Tensor, Tensor]:
    """Mean negative log-likelihood of the true query classes, with gradients.

    Returns (loss, grad wrt support embeddings, grad wrt query embeddings).
    Gradients are exact through the attention softmax and the cosine
    similarities, and are means over the queries.
    """
    support_emb = as_tensor(support_emb, "support embeddings")
    query_emb = as_tensor(query_emb, "query embeddings")
    if query_emb.ndim != 2:
        raise ShapeError(f"matching: queries must be (Q, E), got {query_emb.shape}")
    slabels = np.asarray(support_labels)
    qlabels = np.asarray(query_labels)
    nq = query_emb.shape[0]
    if qlabels.shape != (nq,):
        raise ShapeError(f"matching: {qlabels.shape} labels for {nq} queries")

    snorm = np.linalg.norm(support_emb, axis=1)
    if np.any(snorm == 0.0):
        raise NumericError("matching: zero-norm support embedding")
    shat = support_emb / snorm[:, None]

    total = 0.0
    g_support = np.zeros_like(support_emb)
    g_query = np.zeros_like(query_emb)
    for qi in range(nq):
        q = query_emb[qi]
        qnorm = np.linalg.norm(q)
        if qnorm == 0.0:
            raise NumericError("matching: zero-norm query embedding")
        qhat = q / qnorm
        cos = shat @ qhat
        att = np.exp(cos - cos.max())
        att /= att.sum()
        mask = (slabels == qlabels[qi]).astype(np.float64)
        p_true = float(att @ mask)
        if p_true <= 0.0:
            raise NumericError("matching: query class absent from the support set")
        total += -np.log(p_true)
        # d loss / d cos_j through the softmax and the class aggregation
        gcos = att - att * mask / p_true
        g_query[qi] = (shat.T @ gcos - (gcos @ cos) * qhat) / qnorm
        g_support += gcos[:, None] * (qhat[None, :] - cos[:, None] * shat) / snorm[:, None]
    return float(total) / nq, g_support / nq, g_query / nq


# ---------------------------------------------------------------------------
# Checkpoints: magic + JSON header + raw little-endian float64 tensor bytes
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: Network) -> None:
    """Self-describing container; identical models produce identical bytes."""
    tensors = [(name, p) for name, p, _ in model.named_params()]
    header = {
        "format": "kaf-oneshot-checkpoint",
        "version": _CHECKPOINT_VERSION,
        "kind": model.model_kind,
        "seed": model.seed,
        "spec": model.spec.to_json_dict(),
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in tensors],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, p in tensors:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CHECKPOINT_MAGIC:
            raise FormatError(f"checkpoint: bad magic {magic!r} at offset 0")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"checkpoint: unreadable header: {exc}") from exc
        if header.get("version") != _CHECKPOINT_VERSION:
            raise FormatError(f"checkpoint: unsupported version {header.get('version')}")
        spec = NetworkSpec.from_json_dict(header["spec"])
        kind = header.get("kind", "network")
        cls = {"siamese": SiameseModel, "matching": MatchingModel, "network": Network}.get(kind)
        if cls is None:
            raise FormatError(f"checkpoint: unknown model kind {kind!r}")
        model = cls(spec, seed=int(header.get("seed", 0)))
        stored = {name: p for name, p, _ in model.named_params()}
        for entry in header["tensors"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if name not in stored:
                raise FormatError(f"checkpoint: tensor {name!r} does not exist in the spec")
            if stored[name].shape != shape:
                raise FormatError(
                    f"checkpoint: tensor {name!r} has shape {shape}, expected {stored[name].shape}"
                )
            nbytes = int(np.prod(shape)) * 8
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise FormatError(f"checkpoint: truncated tensor data for {name!r}")
            stored[name][...] = np.frombuffer(raw, dtype="<f8").reshape(shape)
        return model

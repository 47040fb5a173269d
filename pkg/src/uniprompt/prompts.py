"""Multi-part learnable prompts and the visual-enhanced meta-network.

A person prompt is the token sequence

    [X_1(a) .. X_M(a), P_1(a) .. P_R(a), M_1(a) .. M_B(a), person_i]

with identity-specific tokens X, modality tokens P and platform tokens M.
When enhancement is on, one shared network maps the image feature ``a`` to
three part-level biases (sigma_X, sigma_P, sigma_M); every token of a part
receives that part's bias.  The class token is never biased.
"""
import struct
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

N_MODALITIES = 3
N_PLATFORMS = 2


@dataclass
class PromptConfig:
    n_tokens_specific: int = 4
    n_tokens_modality: int = 4
    n_tokens_platform: int = 4
    d_tok: int = 32
    n_identities: int = 64
    n_modalities: int = N_MODALITIES
    n_platforms: int = N_PLATFORMS
    d_hidden: int = 0  # 0 -> max(4, d_tok // 2)
    seed: int = 0

    def validate(self):
        for name in ("n_tokens_specific", "n_tokens_modality", "n_tokens_platform",
                     "d_tok", "n_identities", "n_modalities", "n_platforms"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_hidden < 0:
            raise ValueError("d_hidden must be >= 0")

    @property
    def hidden(self):
        return self.d_hidden or max(4, self.d_tok // 2)

    @property
    def length(self):
        return self.n_tokens_specific + self.n_tokens_modality + self.n_tokens_platform + 1


class PromptBank:
    def __init__(self, specific, modality, platform, class_token):
        self.specific = dc.Tensor(specific, requires_grad=True, name="bank.specific")
        self.modality = dc.Tensor(modality, requires_grad=True, name="bank.modality")
        self.platform = dc.Tensor(platform, requires_grad=True, name="bank.platform")
        self.class_token = class_token  # frozen ndarray, (n_identities, d_tok)

    @classmethod
    def init(cls, config, rng):
        c = config
        return cls(
            rng.normal(0.0, 0.02, (c.n_identities, c.n_tokens_specific, c.d_tok)),
            rng.normal(0.0, 0.02, (c.n_modalities, c.n_tokens_modality, c.d_tok)),
            rng.normal(0.0, 0.02, (c.n_platforms, c.n_tokens_platform, c.d_tok)),
            rng.normal(0.0, 0.02, (c.n_identities, c.d_tok)),
        )

    @property
    def sizes(self):
        return self.specific.shape[1], self.modality.shape[1], self.platform.shape[1]

    def parameters(self):
        return {"bank.specific": self.specific, "bank.modality": self.modality,
                "bank.platform": self.platform}


class VENet:
    """Two-layer perceptron d_feat -> hidden -> 3 * d_tok, split into three biases."""

    def __init__(self, w1, b1, w2, b2):
        self.w1 = dc.Tensor(w1, requires_grad=True, name="venet.w1")
        self.b1 = dc.Tensor(b1, requires_grad=True, name="venet.b1")
        self.w2 = dc.Tensor(w2, requires_grad=True, name="venet.w2")
        self.b2 = dc.Tensor(b2, requires_grad=True, name="venet.b2")

    @classmethod
    def init(cls, d_feat, d_hidden, d_tok, rng):
        bound = 1.0 / np.sqrt(d_feat)
        return cls(
            rng.uniform(-bound, bound, (d_feat, d_hidden)),
            np.zeros(d_hidden),
            rng.normal(0.0, 0.02, (d_hidden, 3 * d_tok)),
            np.zeros(3 * d_tok),
        )

    @property
    def d_tok(self):
        return self.w2.shape[1] // 3

    def forward(self, a):
        a = np.asarray(a, dtype=np.float64)
        if a.shape[-1] != self.w1.shape[0]:
            raise ValueError(f"expected features of length {self.w1.shape[0]}, got {a.shape[-1]}")
        out = dc.relu(dc.constant(a) @ self.w1 + self.b1) @ self.w2 + self.b2
        d = self.d_tok
        axis = out.data.ndim - 1
        return tuple(dc.take(out, slice(k * d, (k + 1) * d), axis=axis) for k in range(3))

    def parameters(self):
        return {"venet.w1": self.w1, "venet.b1": self.b1, "venet.w2": self.w2, "venet.b2": self.b2}


def init_prompts(config, d_feat):
    config.validate()
    rng = np.random.default_rng([config.seed, 0xB4A])
    bank = PromptBank.init(config, rng)
    net = VENet.init(d_feat, config.hidden, config.d_tok, rng)
    return bank, net


def venet_forward(net, a):
    return net.forward(a)


@dataclass
class ComposedPrompt:
    tokens: dc.Tensor  # (M + R + B_tok + 1, d_tok)
    identity: int
    modality: int
    platform: int


def _check_index(name, value, upper):
    if not 0 <= value < upper:
        raise IndexError(f"{name} index {value} out of range [0, {upper})")


def compose_prompt(bank, net, identity, modality, platform, a, enhance=True):
    _check_index("identity", identity, bank.specific.shape[0])
    _check_index("modality", modality, bank.modality.shape[0])
    _check_index("platform", platform, bank.platform.shape[0])
    x = dc.take(bank.specific, identity)
    p = dc.take(bank.modality, modality)
    m = dc.take(bank.platform, platform)
    if enhance:
        sx, sp, sm = net.forward(a)
        x, p, m = x + sx, p + sp, m + sm
    cls_tok = dc.constant(bank.class_token[identity][None, :])
    return ComposedPrompt(dc.concatenate([x, p, m, cls_tok], axis=0), identity, modality, platform)


def _part_sums(bank, y, mod, plat):
    spec = dc.take(dc.sum(bank.specific, axis=1), y)
    modp = dc.take(dc.sum(bank.modality, axis=1), mod)
    platp = dc.take(dc.sum(bank.platform, axis=1), plat)
    return spec, modp, platp


def _part_totals(bank, net, y, mod, plat, feats, enhance):
    n_x, n_p, n_m = bank.sizes
    spec, modp, platp = _part_sums(bank, y, mod, plat)
    if enhance:
        sx, sp, sm = net.forward(feats)
        spec, modp, platp = spec + n_x * sx, modp + n_p * sp, platp + n_m * sm
    return {"specific": spec, "modality": modp, "platform": platp}


PARTS = ("specific", "modality", "platform")


def pooled_prompts(bank, net, y, mod, plat, feats, enhance, live=PARTS, fixed=None):
    """Mean-pooled prompt tokens for many (identity, modality, platform, a) rows.

    Equal to ``mean(compose_prompt(...).tokens)`` row by row, computed from part
    sums.  Parts not named in ``live`` are detached, bias included, so they act
    as fixed values.  ``fixed`` optionally supplies a ``(bank, net)`` pair the
    detached parts are read from; by default they come from ``bank``/``net``.
    """
    y, mod, plat = (np.asarray(v, dtype=np.intp) for v in (y, mod, plat))
    parts = _part_totals(bank, net, y, mod, plat, feats, enhance)
    if fixed is not None and set(live) != set(PARTS):
        held = _part_totals(fixed[0], fixed[1], y, mod, plat, feats, enhance)
    else:
        held = parts
    total = dc.constant(bank.class_token[y])
    for key in PARTS:
        total = total + (parts[key] if key in live else dc.detach(held[key]))
    n_x, n_p, n_m = bank.sizes
    return total / (n_x + n_p + n_m + 1)


def batch_text_embeddings(bank, net, text_enc, batch, enhance=True, fixed=None):
    """(T_identity, T_m, T_p) for every sample, each a ``(B, d_emb)`` tensor.

    T_m keeps a gradient path only through the modality tokens (and sigma_P);
    T_p only through the platform tokens (and sigma_M).
    """
    args = (bank, net, batch.y, batch.modality, batch.platform, batch.feats, enhance)
    t_id = text_enc.encode_pooled(pooled_prompts(*args))
    t_m = text_enc.encode_pooled(pooled_prompts(*args, live=("modality",), fixed=fixed))
    t_p = text_enc.encode_pooled(pooled_prompts(*args, live=("platform",), fixed=fixed))
    return t_id, t_m, t_p


def identity_text_grid(bank, net, text_enc, batch, classes, enhance=False):
    """Text of every class in ``classes`` rendered in every sample's context.

    Row ``i * len(classes) + k`` is the prompt of identity ``classes[k]`` with
    sample i's modality, platform and image feature.
    """
    classes = np.asarray(classes, dtype=np.intp)
    b, k = len(batch.y), len(classes)
    ctx = np.repeat(np.arange(b), k)
    pooled = pooled_prompts(bank, net, np.tile(classes, b), np.asarray(batch.modality)[ctx],
                            np.asarray(batch.platform)[ctx], np.asarray(batch.feats)[ctx], enhance)
    return text_enc.encode_pooled(pooled)


# checkpoint container ------------------------------------------------------

MAGIC = b"UPRM"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors):
    """Write ``{name: ndarray}`` as a flat little-endian container.

    Layout: b"UPRM", u32 version, u32 entry count, then per entry
    u32 name length, utf-8 name, u32 ndim, ndim x u64 dims, f64 data (row-major).
    """
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.require(arr, dtype="<f8", requirements="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_tensors(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 4

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = read("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out = {}
    for _ in range(count):
        (n,) = read("<I")
        name = bytes(read(f"<{n}s")[0]).decode("utf-8")
        (ndim,) = read("<I")
        shape = read(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * size > len(buf):
            raise CheckpointError(f"{path}: truncated in tensor {name!r}")
        data = np.frombuffer(buf, dtype="<f8", count=size, offset=pos)
        pos += 8 * size
        out[name] = data.astype(np.float64).reshape(shape)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out

"""Two-stage prompt training.

Stage 1 warms up the identity-specific tokens with everything else fixed.
Stage 2 freezes those tokens and trains the modality / platform tokens, the
meta-network and the image adapter on the sum of the enabled stage-2 losses.
Each step draws its batch from an rng seeded by ``(seed, stage, step)`` so a
run split across checkpoints replays the exact same batches.
"""
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import losses as L
from . import prompts as P
from .encoders import EncoderConfig, init_encoders


class TrainingAbort(RuntimeError):
    pass


class DatasetTooSmallError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage1_steps: int = 300
    stage2_steps: int = 600
    lr1: float = 5e-3
    lr2: float = 5e-3
    n_ids_per_batch: int = 4
    n_samples_per_id: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    enhance: bool = True
    train_modality_prompt: bool = True
    train_platform_prompt: bool = True
    stage1_enhance: bool = False

    def validate(self):
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ValueError("step counts must be >= 0")
        if self.n_ids_per_batch < 2:
            raise ValueError("n_ids_per_batch must be >= 2")
        if self.n_samples_per_id < 1:
            raise ValueError("n_samples_per_id must be >= 1")
        if not (self.lr1 > 0 and self.lr2 > 0):
            raise ValueError("learning rates must be > 0")

    @property
    def batch_size(self):
        return self.n_ids_per_batch * self.n_samples_per_id


# ablation ladder: base -> +modality prompt -> +platform prompt -> +visual enhancement
PRESETS = {
    "base": dict(train_modality_prompt=False, train_platform_prompt=False, enhance=False),
    "mp": dict(train_modality_prompt=True, train_platform_prompt=False, enhance=False),
    "mp_pp": dict(train_modality_prompt=True, train_platform_prompt=True, enhance=False),
    "full": dict(train_modality_prompt=True, train_platform_prompt=True, enhance=True),
}


class UniPromptModel:
    def __init__(self, encoder_config, prompt_config):
        self.encoder_config = encoder_config
        self.prompt_config = prompt_config
        if encoder_config.d_tok != prompt_config.d_tok:
            raise ValueError("encoder and prompt token widths differ")
        self.image_encoder, self.text_encoder = init_encoders(encoder_config)
        self.bank, self.venet = P.init_prompts(prompt_config, encoder_config.d_feat)

    def encode_image(self, feats):
        """Unit image embeddings as a plain array (no graph)."""
        return self.image_encoder.encode_numpy(feats)

    def parameters(self):
        out = {}
        out.update(self.bank.parameters())
        out.update(self.venet.parameters())
        out.update(self.image_encoder.parameters())
        return out

    def frozen_arrays(self):
        return {"encoder.frozen": self.image_encoder.frozen,
                "encoder.projection": self.text_encoder.projection,
                "bank.class_token": self.bank.class_token}

    def state_dict(self):
        state = {k: v.data.copy() for k, v in self.parameters().items()}
        state.update({k: v.copy() for k, v in self.frozen_arrays().items()})
        return state

    def load_state_dict(self, state):
        for k, t in self.parameters().items():
            if state[k].shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {t.shape}")
            t.data[...] = state[k]
        self.image_encoder.frozen = np.array(state["encoder.frozen"])
        self.text_encoder.projection = np.array(state["encoder.projection"])
        self.bank.class_token = np.array(state["bank.class_token"])


def tensor_hash(arr):
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=np.float64).tobytes()).hexdigest()


def param_hashes(model, names=None):
    params = model.parameters()
    return {k: tensor_hash(params[k].data) for k in (names or params)}


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, {}

    def step(self, params, grads, lr):
        """Update ``params[name].data`` in place for every name in ``grads``.

        Parameters whose gradient is exactly zero are skipped (moments untouched).
        """
        for name, g in grads.items():
            if not np.any(g):
                continue
            p = params[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            t = self.t.get(name, 0) + 1
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self.m[name], self.v[name], self.t[name] = m, v, t

    def state_dict(self):
        out = {}
        for name in self.m:
            out[f"adam.m/{name}"] = self.m[name]
            out[f"adam.v/{name}"] = self.v[name]
            out[f"adam.t/{name}"] = np.array(float(self.t[name]))
        return out

    def load_state_dict(self, state):
        self.m, self.v, self.t = {}, {}, {}
        for key, val in state.items():
            if key.startswith("adam.m/"):
                name = key[len("adam.m/"):]
                self.m[name] = np.array(val)
                self.v[name] = np.array(state[f"adam.v/{name}"])
                self.t[name] = int(state[f"adam.t/{name}"])


@dataclass
class SampleBatch:
    index: np.ndarray
    y: np.ndarray
    modality: np.ndarray
    platform: np.ndarray
    feats: np.ndarray


def sample_pk_batch(dataset, rng, n_ids, n_per_id):
    """Identity-balanced batch: ``n_ids`` identities x ``n_per_id`` records."""
    ids = dataset.identities
    if len(ids) < n_ids:
        raise DatasetTooSmallError(f"need {n_ids} identities, dataset has {len(ids)}")
    chosen = rng.choice(ids, size=n_ids, replace=False)
    rows = []
    for ident in chosen:
        pool = np.flatnonzero(dataset.identity == ident)
        rows.append(rng.choice(pool, size=n_per_id, replace=len(pool) < n_per_id))
    idx = np.concatenate(rows)
    return SampleBatch(idx, dataset.identity[idx], dataset.modality[idx],
                       dataset.platform[idx], dataset.features[idx])


@dataclass
class TrainState:
    model: UniPromptModel
    optimizer: Adam = field(default_factory=Adam)
    stage1_step: int = 0
    stage2_step: int = 0
    history: list = field(default_factory=list)

    @property
    def step(self):
        return self.stage1_step + self.stage2_step

    def state_dict(self):
        state = self.model.state_dict()
        state.update(self.optimizer.state_dict())
        state["meta.stage1_step"] = np.array(float(self.stage1_step))
        state["meta.stage2_step"] = np.array(float(self.stage2_step))
        rows = [[r["stage"], r["step"]] + [r[k] for k in LOG_FIELDS] for r in self.history]
        state["log.rows"] = np.array(rows, dtype=np.float64).reshape(len(rows), 2 + len(LOG_FIELDS))
        return state

    @classmethod
    def from_state_dict(cls, state, encoder_config, prompt_config, train_config=None):
        model = UniPromptModel(encoder_config, prompt_config)
        model.load_state_dict(state)
        opt = Adam(*_adam_args(train_config)) if train_config else Adam()
        opt.load_state_dict(state)
        history = [dict(stage=int(r[0]), step=int(r[1]), **dict(zip(LOG_FIELDS, map(float, r[2:]))))
                   for r in state.get("log.rows", np.zeros((0, 2 + len(LOG_FIELDS))))]
        return cls(model, opt, int(state["meta.stage1_step"]), int(state["meta.stage2_step"]), history)


LOG_FIELDS = ("loss", "i2t", "t2i", "mi2t", "mt2i", "pi2t", "pt2i")


def _adam_args(cfg):
    return cfg.beta1, cfg.beta2, cfg.adam_eps


def new_state(encoder_config, prompt_config, train_config=None):
    opt = Adam(*_adam_args(train_config)) if train_config else Adam()
    return TrainState(UniPromptModel(encoder_config, prompt_config), opt)


def _batch_rng(seed, stage, step):
    return np.random.default_rng([seed, stage, step])


def stage2_trainable(config, model):
    names = []
    if config.train_modality_prompt:
        names.append("bank.modality")
    if config.train_platform_prompt:
        names.append("bank.platform")
    if not names:
        return []
    if config.enhance:
        names += list(model.venet.parameters())
    if model.image_encoder.adapter_enabled:
        names += list(model.image_encoder.parameters())
    return names


def _finite_or_abort(value, stage, step):
    if not np.isfinite(value):
        raise TrainingAbort(f"non-finite loss at stage {stage}, step {step}")


def stage1_objective(model, batch, loss_config, enhance=False):
    m = model
    V = m.image_encoder.encode(batch.feats)
    t_id = m.text_encoder.encode_pooled(P.pooled_prompts(
        m.bank, m.venet, batch.y, batch.modality, batch.platform, batch.feats, enhance))
    grid = P.identity_text_grid(m.bank, m.venet, m.text_encoder, batch, np.unique(batch.y), enhance)
    return L.stage1_components(L.TrainBatch(V=V, y=batch.y, T_identity=t_id, T_grid=grid), loss_config)


def stage2_objective(model, batch, loss_config, config, fixed=None):
    """Per-part stage-2 losses and their enabled sum (None when nothing is enabled).

    ``fixed`` is an optional ``(bank, venet)`` snapshot for the stop-gradient parts.
    """
    m = model
    V = m.image_encoder.encode(batch.feats)
    t_id, t_m, t_p = P.batch_text_embeddings(m.bank, m.venet, m.text_encoder, batch,
                                             config.enhance, fixed)
    parts = L.stage2_loss(L.TrainBatch(V=V, y=batch.y, T_identity=t_id, T_m=t_m, T_p=t_p), loss_config)
    terms = []
    if config.train_modality_prompt:
        terms += [parts.mi2t, parts.mt2i]
    if config.train_platform_prompt:
        terms += [parts.pi2t, parts.pt2i]
    total = None
    for t in terms:
        total = t if total is None else total + t
    return parts, total


def _run(state, stage, n_total, config, step_fn, max_steps, on_step):
    done = state.stage1_step if stage == 1 else state.stage2_step
    todo = n_total - done
    if max_steps is not None:
        todo = min(todo, max_steps)
    for _ in range(max(todo, 0)):
        step = state.stage1_step if stage == 1 else state.stage2_step
        row = step_fn(step)
        row.update(stage=stage, step=step)
        state.history.append(row)
        if stage == 1:
            state.stage1_step += 1
        else:
            state.stage2_step += 1
        if on_step is not None:
            on_step(state)
    return max(todo, 0)


def run_stage1(state, config, dataset, loss_config=None, max_steps=None, on_step=None):
    """Warm up identity tokens; only ``bank.specific`` is updated."""
    loss_config = loss_config or L.LossConfig()
    model = state.model
    params = model.parameters()

    def step_fn(step):
        batch = sample_pk_batch(dataset, _batch_rng(config.seed, 1, step),
                                config.n_ids_per_batch, config.n_samples_per_id)
        i2t, t2i = stage1_objective(model, batch, loss_config, config.stage1_enhance)
        loss = i2t + t2i
        _finite_or_abort(loss.item(), 1, step)
        grads = dc.backward(loss)
        state.optimizer.step(params, {"bank.specific": grads[model.bank.specific]}, config.lr1)
        return _log_row(loss=loss.item(), i2t=i2t.item(), t2i=t2i.item())

    return _run(state, 1, config.stage1_steps, config, step_fn, max_steps, on_step)


def run_stage2(state, config, dataset, loss_config=None, max_steps=None, on_step=None):
    """Train modality/platform tokens, meta-network and adapter; identity tokens fixed."""
    loss_config = loss_config or L.LossConfig()
    model = state.model
    params = model.parameters()
    trainable = stage2_trainable(config, model)

    def step_fn(step):
        if not trainable:
            return _log_row()
        batch = sample_pk_batch(dataset, _batch_rng(config.seed, 2, step),
                                config.n_ids_per_batch, config.n_samples_per_id)
        parts, total = stage2_objective(model, batch, loss_config, config)
        _finite_or_abort(total.item(), 2, step)
        grads = dc.backward(total)
        state.optimizer.step(params, {n: grads[params[n]] for n in trainable if params[n] in grads},
                             config.lr2)
        return _log_row(loss=total.item(), mi2t=parts.mi2t.item(), mt2i=parts.mt2i.item(),
                        pi2t=parts.pi2t.item(), pt2i=parts.pt2i.item())

    return _run(state, 2, config.stage2_steps, config, step_fn, max_steps, on_step)


def _log_row(**values):
    return {k: float(values.get(k, 0.0)) for k in LOG_FIELDS}


def train(state, config, dataset, loss_config=None, max_steps=None, on_step=None):
    """Run stage 1 then stage 2, resuming from wherever ``state`` left off."""
    config.validate()
    done = run_stage1(state, config, dataset, loss_config, max_steps, on_step)
    left = None if max_steps is None else max_steps - done
    if left is None or left > 0:
        run_stage2(state, config, dataset, loss_config, left, on_step)
    return state


def write_log(path, history):
    with open(path, "w") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def make_configs(n_identities, d_feat=64, d_tok=32, d_emb=64, seed=0):
    """Matching encoder and prompt configs for a dataset."""
    enc = EncoderConfig(d_feat=d_feat, d_tok=d_tok, d_emb=d_emb, seed=seed)
    return enc, P.PromptConfig(d_tok=d_tok, n_identities=n_identities, seed=seed)

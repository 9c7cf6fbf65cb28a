"""Class-incremental training procedures.

Ten procedures share one protocol: per task, grow the classifier to cover
the new classes, fit on that task's data (plus retained exemplars where the
method uses them), checkpoint the best validation epoch, and afterwards
update whatever state the method carries between tasks (importance
estimates, teacher snapshots, exemplar stores, frozen sub-networks).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import ExemplarStore
from .layers import Linear
from .metrics import confusion, weighted_f1, weighted_precision_recall
from .optim import Adam
from .network import (Backbone, ConvBlock, FeatureLayer, NetworkSpec,
                      build_backbone, load_state, make_head, parameter_count,
                      state_dict)
from .plasticity import (CbConfig, ContinualBackprop, ConvConsumer,
                         LinearConsumer, UnitGroup, backbone_unit_groups,
                         select_cb_target)

STRATEGIES = ("finetune", "ewc", "lwf", "replay", "icarl", "wa", "der",
              "foster", "memo", "retrain")
EXEMPLAR_STRATEGIES = frozenset(
    {"replay", "icarl", "wa", "der", "foster", "memo"})


@dataclass
class StrategyConfig:
    name: str
    lambda_ewc: float = 5000.0
    lambda_distill: float = 1.0
    temperature: float = 2.0
    exemplar_quota: int = 20
    selection_mode: str = "random"
    cb: CbConfig = field(default_factory=CbConfig)

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}")
        if self.lambda_ewc < 0 or self.lambda_distill < 0:
            raise ValueError("loss weights must be >= 0")
        if self.temperature <= 0:
            raise ValueError("distillation temperature must be > 0")

    @property
    def uses_exemplars(self):
        return self.name in EXEMPLAR_STRATEGIES


@dataclass
class TrainSettings:
    epochs: int = 50
    batch_size: int = 256
    lr: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    fisher_max_samples: int | None = None


@dataclass
class RngBundle:
    """Independent generators for each randomness source of one run."""
    init: np.random.Generator
    batch: np.random.Generator
    cb: np.random.Generator
    exemplar_for_task: object = None   # callable task_idx -> Generator

    def exemplar(self, task_idx):
        return self.exemplar_for_task(task_idx)


def iterate_batches(n, batch_size, rng):
    """Yield index arrays covering a fresh permutation of range(n)."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _as_input(x):
    return Tensor(x[:, None, :])


def evaluate_predictions(pred, true, n_classes):
    cm = confusion(pred, true, n_classes)
    precision, recall = weighted_precision_recall(cm)
    return {"f1": weighted_f1(cm), "precision": precision, "recall": recall,
            "confusion": cm}


def distillation_loss(student_logits, teacher_logits, temperature=1.0):
    """Soft cross-entropy of the teacher's tempered distribution against the
    student's, averaged over the batch. Both logit sets are divided by the
    temperature before the softmax."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    p_teacher = ag.softmax(np.asarray(teacher_logits) / temperature)
    log_q = ag.log_softmax(student_logits / float(temperature))
    n = p_teacher.shape[0]
    return -(Tensor(p_teacher.astype(log_q.data.dtype)) * log_q).sum() / float(n)


def kl_divergence_loss(student_logits, teacher_logits, temperature=1.0):
    """KL(teacher || student) on tempered distributions, batch mean.

    Zero exactly when the two distributions agree; always >= 0."""
    z = np.asarray(teacher_logits, dtype=np.float64) / temperature
    z = z - z.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(log_p)
    log_q = ag.log_softmax(student_logits / float(temperature))
    dtype = log_q.data.dtype
    n = p.shape[0]
    diff = Tensor(log_p.astype(dtype)) - log_q
    return (Tensor(p.astype(dtype)) * diff).sum() / float(n)


def weight_align(head: Linear, n_old, n_new):
    """Rescale the old classes' head rows so their mean L2 norm matches the
    new classes' mean row norm; new rows are untouched."""
    if n_old <= 0 or n_new <= 0:
        raise ValueError("weight_align needs both old and new rows")
    w = head.weight.data
    old_norms = np.linalg.norm(w[:n_old], axis=1)
    new_norms = np.linalg.norm(w[n_old:n_old + n_new], axis=1)
    mean_new = new_norms.mean()
    mean_old = old_norms.mean()
    if mean_new == 0:
        raise ValueError("zero mean new-row norm; cannot align")
    if mean_old == 0:
        raise ValueError("zero mean old-row norm; cannot align")
    scale = mean_new / mean_old
    w[:n_old] *= scale
    return scale


def estimate_fisher(model, x, y, max_samples=None):
    """Diagonal importance: mean over samples of squared log-likelihood
    gradients, evaluated in inference mode (running batchnorm statistics)."""
    n = len(x)
    if n == 0:
        raise ValueError("cannot estimate importance from empty data")
    if max_samples is not None:
        n = min(n, max_samples)
    params = model.named_parameters()
    omega = {name: np.zeros_like(p.data, dtype=np.float64)
             for name, p in params}
    for i in range(n):
        for _, p in params:
            p.grad = None
        logits = model.forward(x[i:i + 1], training=False)
        loss = ag.cross_entropy(logits, y[i:i + 1])
        loss.backward()
        for name, p in params:
            if p.grad is not None:
                omega[name] += p.grad.astype(np.float64) ** 2
    for name in omega:
        omega[name] /= n
    return omega


class ClassifierModel:
    """Monolithic backbone plus growable classification head."""

    def __init__(self, spec: NetworkSpec, n_classes, rng, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        self.backbone = build_backbone(spec, rng, dtype)
        self.head = make_head(spec.fc_width, n_classes, rng, dtype)

    def forward(self, x, training, record_acts=False):
        xt = x if isinstance(x, Tensor) else _as_input(np.asarray(x))
        feats = self.backbone.forward(xt, training, record_acts)
        return self.head.forward(feats)

    def features_np(self, x, batch_size=512):
        outs = []
        with ag.no_grad():
            for start in range(0, len(x), batch_size):
                xt = _as_input(x[start:start + batch_size])
                outs.append(self.backbone.forward(xt, training=False).data)
        return np.concatenate(outs) if outs else np.zeros((0, self.spec.fc_width))

    def named_parameters(self):
        return (self.backbone.named_parameters("backbone.")
                + self.head.named_parameters("head."))

    def buffers(self):
        return self.backbone.buffers("backbone.")

    def state(self):
        return state_dict(self.named_parameters(), self.buffers())

    def load(self, state):
        load_state(self.named_parameters(), self.buffers(), state)

    def extend_head(self, n_new, rng):
        self.head.extend(n_new, rng)

    def clone_frozen(self):
        clone = ClassifierModel(self.spec, self.head.out_features,
                                np.random.default_rng(0), self.dtype)
        clone.load(self.state())
        for _, p in clone.named_parameters():
            p.frozen = True
        return clone

    def cb_unit_groups(self, scope):
        if scope != "all":
            raise ValueError(f"monolithic model has no scope {scope!r}")
        return backbone_unit_groups(self.backbone, self.head)

    def param_count(self):
        return parameter_count(self.named_parameters())

    def last_conv_weights(self):
        block = self.backbone.blocks[-1]
        return {"kernel": block.conv.weight.data.copy(),
                "bn_scale": block.bn.gamma.data.copy()}


class Strategy:
    """Shared protocol: head growth, epoch loop, validation checkpointing."""

    trains_on_all_seen = False

    def __init__(self, net_spec: NetworkSpec, cfg: StrategyConfig,
                 train: TrainSettings, rngs: RngBundle, dtype=np.float32,
                 event_sink=None):
        self.net_spec = net_spec
        self.cfg = cfg
        self.train_settings = train
        self.rngs = rngs
        self.dtype = dtype
        self.event_sink = event_sink or (lambda event: None)
        self.classes_seen = 0
        self.task_index = -1
        self.global_step = 0
        self.store = (ExemplarStore(cfg.exemplar_quota, cfg.selection_mode)
                      if cfg.uses_exemplars else None)
        self.cb = (ContinualBackprop(cfg.cb, rngs.cb)
                   if cfg.cb.enabled else None)

    # ---- per-strategy hooks ------------------------------------------------

    def _begin_task(self, task_idx, n_new):
        raise NotImplementedError

    def _forward(self, x, training, record_acts=False):
        raise NotImplementedError

    def _loss(self, logits, xb, yb):
        return ag.cross_entropy(logits, yb)

    def _trainable_parameters(self):
        raise NotImplementedError

    def _after_task(self, task_idx, class_ids, train_x, train_y, train_ids):
        pass

    def analysis_weights(self):
        """Named weight arrays of the layer(s) tracked for distribution
        analysis; mapping label -> {kernel, bn_scale}."""
        raise NotImplementedError

    def param_count(self):
        raise NotImplementedError

    # ---- shared machinery ----------------------------------------------------

    def _maybe_attach_cb(self):
        if self.cb is not None:
            self.cb.attach(select_cb_target(self.cfg.name, self))

    def _compose_training_set(self, train_x, train_y, train_ids):
        if self.store is None or self.store.total == 0:
            return train_x, train_y, train_ids
        ex_x, ex_y, ex_ids = self.store.gather()
        return (np.concatenate([train_x, ex_x]),
                np.concatenate([train_y, ex_y]),
                np.concatenate([train_ids, ex_ids]))

    def _update_store(self, task_idx, class_ids, train_x, train_y, train_ids):
        if self.store is None or self.store.quota == 0:
            return
        feature_fn = (self.features_np
                      if self.store.mode == "herding" else None)
        self.store.add_task(train_x, train_y, train_ids, class_ids,
                            rng=self.rngs.exemplar(task_idx),
                            feature_fn=feature_fn)

    def features_np(self, x):
        raise NotImplementedError

    def train_task(self, task_idx, class_ids, train_x, train_y, train_ids,
                   val_x, val_y):
        if len(train_x) == 0:
            raise ValueError(f"task {task_idx}: empty training data")
        self.task_index = task_idx
        n_new = len(class_ids)
        self._begin_task(task_idx, n_new)
        self.classes_seen += n_new
        self._maybe_attach_cb()
        x, y, _ids = self._compose_training_set(train_x, train_y, train_ids)
        history = self._fit(x, y, val_x, val_y)
        self._after_task(task_idx, class_ids, train_x, train_y, train_ids)
        return history

    def _fit(self, x, y, val_x, val_y, epochs=None, forward=None, loss=None,
             params=None, state=None, load=None, cb=None):
        settings = self.train_settings
        epochs = settings.epochs if epochs is None else epochs
        forward = forward or self._forward
        loss = loss or self._loss
        params = params if params is not None else self._trainable_parameters()
        state = state or self._state
        load = load or self._load
        cb = self.cb if cb is None else (cb or None)
        opt = Adam(params, lr=settings.lr, beta1=settings.beta1,
                   beta2=settings.beta2, eps=settings.eps)
        record = cb is not None
        best_f1, best_epoch, best_state = -1.0, -1, None
        val_history = []
        n = len(x)
        for epoch in range(epochs):
            for idx in iterate_batches(n, settings.batch_size, self.rngs.batch):
                xb = x[idx]
                logits = forward(_as_input(xb), training=True,
                                 record_acts=record)
                total = loss(logits, xb, y[idx])
                opt.zero_grad()
                total.backward()
                opt.step()
                if cb is not None:
                    cb.update_utility()
                    for event in cb.step():
                        self.event_sink({"type": "cb_reinit",
                                         "strategy": self.cfg.name,
                                         "task": self.task_index,
                                         "step": self.global_step,
                                         **event})
                self.global_step += 1
            val_f1 = self._validate(val_x, val_y, forward)
            val_history.append(val_f1)
            if val_f1 > best_f1:
                best_f1, best_epoch, best_state = val_f1, epoch, state()
        if best_state is not None:
            load(best_state)
        return {"best_epoch": best_epoch, "best_val_f1": best_f1,
                "val_history": val_history}

    def _validate(self, val_x, val_y, forward=None):
        if len(val_x) == 0:
            return 0.0
        pred = self.predict(val_x, forward)
        cm = confusion(pred, val_y, self.classes_seen)
        return weighted_f1(cm)

    def predict(self, x, forward=None, batch_size=512):
        forward = forward or self._forward
        preds = []
        with ag.no_grad():
            for start in range(0, len(x), batch_size):
                logits = forward(_as_input(x[start:start + batch_size]),
                                 training=False)
                preds.append(np.argmax(logits.data, axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    def _state(self):
        raise NotImplementedError

    def _load(self, state):
        raise NotImplementedError

    def checkpoint_state(self):
        """Full serializable model state; name -> array."""
        return self._state()


class MonolithicStrategy(Strategy):
    """One backbone + growing head; base for the non-dynamic methods."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.model = None

    def _begin_task(self, task_idx, n_new):
        if self.model is None:
            self.model = ClassifierModel(self.net_spec, n_new,
                                         self.rngs.init, self.dtype)
        else:
            self.model.extend_head(n_new, self.rngs.init)

    def _forward(self, x, training, record_acts=False):
        return self.model.forward(x, training, record_acts)

    def _trainable_parameters(self):
        return self.model.named_parameters()

    def _state(self):
        return self.model.state()

    def _load(self, state):
        self.model.load(state)

    def features_np(self, x):
        return self.model.features_np(x)

    def cb_unit_groups(self, scope):
        return self.model.cb_unit_groups(scope)

    def param_count(self):
        return self.model.param_count()

    def analysis_weights(self):
        return {self.cfg.name: self.model.last_conv_weights()}


class FinetuneStrategy(MonolithicStrategy):
    """Cross-entropy on the current task only; the forgetting baseline."""


class ReplayStrategy(MonolithicStrategy):
    """Cross-entropy on the current task plus all retained exemplars."""

    def _after_task(self, task_idx, class_ids, train_x, train_y, train_ids):
        self._update_store(task_idx, class_ids, train_x, train_y, train_ids)


class WaStrategy(ReplayStrategy):
    """Replay plus post-task equalization of old/new head row norms."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.align_count = 0

    def _after_task(self, task_idx, class_ids, train_x, train_y, train_ids):
        n_new = len(class_ids)
        n_old = self.classes_seen - n_new
        if n_old > 0:
            scale = weight_align(self.model.head, n_old, n_new)
            self.align_count += 1
            self.event_sink({"type": "weight_align",
                             "strategy": self.cfg.name, "task": task_idx,
                             "scale": float(scale)})
        super()._after_task(task_idx, class_ids, train_x, train_y, train_ids)


class EwcStrategy(MonolithicStrategy):
    """Quadratic penalty anchoring important parameters to their values
    after the previous task."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.theta_ref = None
        self.omega = None

    def _loss(self, logits, xb, yb):
        loss = ag.cross_entropy(logits, yb)
        lam = self.cfg.lambda_ewc
        if self.theta_ref is None or lam == 0:
            return loss
        penalty = None
        for name, p in self.model.named_parameters():
            ref = self.theta_ref.get(name)
            if ref is None:
                continue
            om = self.omega[name].astype(p.data.dtype)
            refc = ref.astype(p.data.dtype)
            if ref.shape != p.data.shape:
                # head rows added after the snapshot are exempt
                rows = ref.shape[0]
                target = p[:rows] if p.data.ndim == 1 else p[:rows, :]
            else:
                target = p
            diff = target - Tensor(refc)
            term = (Tensor(om) * diff * diff).sum()
            penalty = term if penalty is None else penalty + term
        return loss + penalty * (0.5 * lam)

    def penalty_value(self):
        """Current penalty term (without the CE part); for diagnostics."""
        if self.theta_ref is None:
            return 0.0
        total = 0.0
        for name, p in self.model.named_parameters():
            ref = self.theta_ref.get(name)
            if ref is None:
                continue
            cur = p.data[:ref.shape[0]] if ref.shape != p.data.shape else p.data
            total += (self.omega[name] * (ref - cur) ** 2).sum()
        return 0.5 * self.cfg.lambda_ewc * float(total)

    def _after_task(self, task_idx, class_ids, train_x, train_y, train_ids):
        if self.cfg.lambda_ewc == 0:
            return
        self.omega = estimate_fisher(
            self.model, train_x, train_y,
            max_samples=self.train_settings.fisher_max_samples)
        self.theta_ref = {name: p.data.copy()
                          for name, p in self.model.named_parameters()}


class LwfStrategy(MonolithicStrategy):
    """Distills the previous model's outputs on current-task inputs while
    learning the new classes; no exemplars."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.teacher = None
        self.n_old = 0

    def _begin_task(self, task_idx, n_new):
        if self.model is not None and self.cfg.lambda_distill > 0:
            # snapshot before the head grows: the teacher keeps the old width
            self.teacher = self.model.clone_frozen()
            self.n_old = self.model.head.out_features
        super()._begin_task(task_idx, n_new)

    def _loss(self, logits, xb, yb):
        loss = ag.cross_entropy(logits, yb)
        lam = self.cfg.lambda_distill
        if self.teacher is None or lam == 0:
            return loss
        with ag.no_grad():
            teacher_logits = self.teacher.forward(xb, training=False).data
        old_slice = logits[:, :self.n_old]
        distill = distillation_loss(old_slice, teacher_logits,
                                    self.cfg.temperature)
        return loss + distill * lam


class IcarlStrategy(LwfStrategy):
    """LwF plus exemplar replay: both loss terms run over the task data
    concatenated with the store."""

    def _after_task(self, task_idx, class_ids, train_x, train_y, train_ids):
        self._update_store(task_idx, class_ids, train_x, train_y, train_ids)


class RetrainStrategy(MonolithicStrategy):
    """Upper bound: a fresh network trained on everything seen so far."""

    trains_on_all_seen = True

    def _begin_task(self, task_idx, n_new):
        self.model = ClassifierModel(self.net_spec,
                                     self.classes_seen + n_new,
                                     self.rngs.init, self.dtype)


class DerStrategy(Strategy):
    """Appends a frozen-past / trainable-new backbone per task; a fresh
    full-width head reads the concatenated features."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.backbones = []
        self.head = None

    def _begin_task(self, task_idx, n_new):
        for backbone in self.backbones:
            backbone.set_frozen(True)
        self.backbones.append(
            build_backbone(self.net_spec, self.rngs.init, self.dtype))
        total_feat = self.net_spec.fc_width * len(self.backbones)
        self.head = make_head(total_feat, self.classes_seen + n_new,
                              self.rngs.init, self.dtype)

    def _forward(self, x, training, record_acts=False):
        feats = []
        last = len(self.backbones) - 1
        for i, backbone in enumerate(self.backbones):
            if i < last:
                with ag.no_grad():
                    feats.append(backbone.forward(x, training=False))
            else:
                feats.append(backbone.forward(x, training, record_acts))
        return self.head.forward(ag.concat(feats, axis=1))

    def _trainable_parameters(self):
        b = len(self.backbones) - 1
        return (self.backbones[-1].named_parameters(f"backbone{b}.")
                + self.head.named_parameters("head."))

    def _state(self):
        b = len(self.backbones) - 1
        return state_dict(self._trainable_parameters(),
                          self.backbones[-1].buffers(f"backbone{b}."))

    def _load(self, state):
        b = len(self.backbones) - 1
        load_state(self._trainable_parameters(),
                   self.backbones[-1].buffers(f"backbone{b}."), state)

    def checkpoint_state(self):
        params, buffers = [], []
        for i, backbone in enumerate(self.backbones):
            params.extend(backbone.named_parameters(f"backbone{i}."))
            buffers.extend(backbone.buffers(f"backbone{i}."))
        params.extend(self.head.named_parameters("head."))
        return state_dict(params, buffers)

    def features_np(self, x, batch_size=512):
        outs = []
        with ag.no_grad():
            for start in range(0, len(x), batch_size):
                xt = _as_input(x[start:start + batch_size])
                feats = [bb.forward(xt, training=False).data
                         for bb in self.backbones]
                outs.append(np.concatenate(feats, axis=1))
        return np.concatenate(outs)

    def cb_unit_groups(self, scope):
        if scope != "newest-backbone":
            raise ValueError(f"expansion model has no scope {scope!r}")
        b = len(self.backbones) - 1
        return backbone_unit_groups(
            self.backbones[-1], self.head, prefix=f"backbone{b}.",
            head_col_offset=b * self.net_spec.fc_width)

    def _after_task(self, task_idx, class_ids, train_x, train_y, train_ids):
        self._update_store(task_idx, class_ids, train_x, train_y, train_ids)

    def param_count(self):
        total = sum(parameter_count(bb.named_parameters())
                    for bb in self.backbones)
        return total + parameter_count(self.head.named_parameters())

    def analysis_weights(self):
        block = self.backbones[-1].blocks[-1]
        return {self.cfg.name: {"kernel": block.conv.weight.data.copy(),
                                "bn_scale": block.bn.gamma.data.copy()}}


class FosterStrategy(Strategy):
    """Two-stage expand-then-compress.

    Stage one trains a two-backbone teacher (previous backbone frozen, one
    new backbone, full-width head). Stage two distills the teacher into a
    fresh single backbone; only that student is carried forward, so the
    model never holds more than two backbones.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.backbone = None
        self.head = None
        self._teacher_weights = None

    @property
    def backbone_count(self):
        return 1 if self.backbone is not None else 0

    def train_task(self, task_idx, class_ids, train_x, train_y, train_ids,
                   val_x, val_y):
        if len(train_x) == 0:
            raise ValueError(f"task {task_idx}: empty training data")
        self.task_index = task_idx
        self.classes_seen += len(class_ids)
        x, y, _ids = self._compose_training_set(train_x, train_y, train_ids)
        if self.backbone is None:
            history = self._fit_first_task(task_idx, x, y, val_x, val_y)
        else:
            history = self._fit_expand_compress(task_idx, x, y, val_x, val_y)
        self._after_task(task_idx, class_ids, train_x, train_y, train_ids)
        return history

    def _fit_first_task(self, task_idx, x, y, val_x, val_y):
        self.backbone = build_backbone(self.net_spec, self.rngs.init,
                                       self.dtype)
        self.head = make_head(self.net_spec.fc_width, self.classes_seen,
                              self.rngs.init, self.dtype)
        if self.cb is not None:
            self.cb.attach(self._student_groups(task_idx))
        history = self._fit(x, y, val_x, val_y)
        self._record_teacher_weights(self.backbone)
        return history

    def _fit_expand_compress(self, task_idx, x, y, val_x, val_y):
        old_backbone = self.backbone
        old_backbone.set_frozen(True)
        new_backbone = build_backbone(self.net_spec, self.rngs.init,
                                      self.dtype)
        teacher_head = make_head(2 * self.net_spec.fc_width,
                                 self.classes_seen, self.rngs.init,
                                 self.dtype)

        def teacher_forward(xt, training, record_acts=False):
            with ag.no_grad():
                f_old = old_backbone.forward(xt, training=False)
            f_new = new_backbone.forward(xt, training, record_acts)
            return teacher_head.forward(ag.concat([f_old, f_new], axis=1))

        teacher_params = (new_backbone.named_parameters("teacher_new.")
                          + teacher_head.named_parameters("teacher_head."))
        teacher_buffers = new_backbone.buffers("teacher_new.")
        self._fit(x, y, val_x, val_y,
                  forward=teacher_forward,
                  params=teacher_params,
                  state=lambda: state_dict(teacher_params, teacher_buffers),
                  load=lambda s: load_state(teacher_params, teacher_buffers, s),
                  cb=False)
        self._record_teacher_weights(new_backbone)
        for _, p in teacher_params:
            p.frozen = True

        student_backbone = build_backbone(self.net_spec, self.rngs.init,
                                          self.dtype)
        student_head = make_head(self.net_spec.fc_width, self.classes_seen,
                                 self.rngs.init, self.dtype)
        self.backbone, self.head = student_backbone, student_head
        if self.cb is not None:
            self.cb.attach(self._student_groups(task_idx))

        temperature = self.cfg.temperature

        def student_loss(logits, xb, yb):
            with ag.no_grad():
                teacher_logits = teacher_forward(_as_input(xb),
                                                 training=False).data
            kl = kl_divergence_loss(logits, teacher_logits, temperature)
            return ag.cross_entropy(logits, yb) + kl

        history = self._fit(x, y, val_x, val_y, loss=student_loss)
        return history

    def _record_teacher_weights(self, backbone):
        block = backbone.blocks[-1]
        self._teacher_weights = {"kernel": block.conv.weight.data.copy(),
                                 "bn_scale": block.bn.gamma.data.copy()}

    def _student_groups(self, task_idx):
        return backbone_unit_groups(self.backbone, self.head,
                                    prefix=f"t{task_idx}.student.")

    def _forward(self, x, training, record_acts=False):
        return self.head.forward(
            self.backbone.forward(x, training, record_acts))

    def _trainable_parameters(self):
        return (self.backbone.named_parameters("student.")
                + self.head.named_parameters("student_head."))

    def _state(self):
        return state_dict(self._trainable_parameters(),
                          self.backbone.buffers("student."))

    def _load(self, state):
        load_state(self._trainable_parameters(),
                   self.backbone.buffers("student."), state)

    def features_np(self, x, batch_size=512):
        outs = []
        with ag.no_grad():
            for start in range(0, len(x), batch_size):
                xt = _as_input(x[start:start + batch_size])
                outs.append(self.backbone.forward(xt, training=False).data)
        return np.concatenate(outs)

    def cb_unit_groups(self, scope):
        if scope != "student":
            raise ValueError(f"compression model has no scope {scope!r}")
        return self._student_groups(self.task_index)

    def _after_task(self, task_idx, class_ids, train_x, train_y, train_ids):
        self._update_store(task_idx, class_ids, train_x, train_y, train_ids)

    def param_count(self):
        return (parameter_count(self.backbone.named_parameters())
                + parameter_count(self.head.named_parameters()))

    def analysis_weights(self):
        out = {f"{self.cfg.name}_t": dict(self._teacher_weights)}
        if self.task_index > 0:
            block = self.backbone.blocks[-1]
            out[f"{self.cfg.name}_s"] = {
                "kernel": block.conv.weight.data.copy(),
                "bn_scale": block.bn.gamma.data.copy()}
        return out


class SpecializedBlock:
    """Task-specific deep layers: the final conv block plus the feature
    layer, run on top of the shared shallow blocks."""

    def __init__(self, conv_spec, flat_dim, fc_width, rng, dtype):
        self.block = ConvBlock(conv_spec, rng, dtype)
        self.fc = FeatureLayer(flat_dim, fc_width, rng, dtype)

    @classmethod
    def from_parts(cls, block, fc):
        obj = cls.__new__(cls)
        obj.block = block
        obj.fc = fc
        return obj

    def forward(self, g, training, record_acts=False):
        return self.fc.forward(self.block.forward(g, training, record_acts),
                               record_acts)

    def named_parameters(self, prefix=""):
        return (self.block.named_parameters(prefix + "conv.")
                + self.fc.named_parameters(prefix + "fc."))

    def buffers(self, prefix=""):
        return self.block.buffers(prefix + "conv.")

    def set_frozen(self, frozen=True):
        for _, p in self.named_parameters():
            p.frozen = frozen


class MemoStrategy(Strategy):
    """Shared shallow blocks with one specialized deep block per task.

    The shallow blocks stay trainable for every task; finished specialized
    blocks are frozen; a fresh full-width head reads the concatenated
    specialized features.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.g_blocks = None
        self.s_blocks = []
        self.head = None

    def _begin_task(self, task_idx, n_new):
        spec = self.net_spec
        if self.g_blocks is None:
            full = build_backbone(spec, self.rngs.init, self.dtype)
            self.g_blocks = full.blocks[:-1]
            self.s_blocks = [SpecializedBlock.from_parts(full.blocks[-1],
                                                         full.fc)]
        else:
            for s in self.s_blocks:
                s.set_frozen(True)
            self.s_blocks.append(
                SpecializedBlock(spec.convs[-1], spec.flat_dim, spec.fc_width,
                                 self.rngs.init, self.dtype))
        total_feat = spec.fc_width * len(self.s_blocks)
        self.head = make_head(total_feat, self.classes_seen + n_new,
                              self.rngs.init, self.dtype)

    def _forward(self, x, training, record_acts=False):
        g = x
        for block in self.g_blocks:
            g = block.forward(g, training, record_acts)
        last = len(self.s_blocks) - 1
        feats = []
        for i, s in enumerate(self.s_blocks):
            if i < last:
                feats.append(s.forward(g, training=False))
            else:
                feats.append(s.forward(g, training, record_acts))
        return self.head.forward(ag.concat(feats, axis=1))

    def _named_g_parameters(self):
        params = []
        for i, block in enumerate(self.g_blocks):
            params.extend(block.named_parameters(f"g.conv{i}."))
        return params

    def _trainable_parameters(self):
        b = len(self.s_blocks) - 1
        return (self._named_g_parameters()
                + self.s_blocks[-1].named_parameters(f"s{b}.")
                + self.head.named_parameters("head."))

    def _all_named(self):
        params = self._named_g_parameters()
        buffers = []
        for i, block in enumerate(self.g_blocks):
            buffers.extend(block.buffers(f"g.conv{i}."))
        for j, s in enumerate(self.s_blocks):
            params.extend(s.named_parameters(f"s{j}."))
            buffers.extend(s.buffers(f"s{j}."))
        params.extend(self.head.named_parameters("head."))
        return params, buffers

    def _state(self):
        return state_dict(*self._all_named())

    def _load(self, state):
        load_state(*self._all_named(), state)

    def features_np(self, x, batch_size=512):
        outs = []
        with ag.no_grad():
            for start in range(0, len(x), batch_size):
                g = _as_input(x[start:start + batch_size])
                for block in self.g_blocks:
                    g = block.forward(g, training=False)
                feats = [s.forward(g, training=False).data
                         for s in self.s_blocks]
                outs.append(np.concatenate(feats, axis=1))
        return np.concatenate(outs)

    def cb_unit_groups(self, scope):
        if scope != "generalized":
            raise ValueError(f"decoupled model has no scope {scope!r}")
        groups = []
        blocks = self.g_blocks
        for i, block in enumerate(blocks):
            n = block.spec.out_channels
            if i + 1 < len(blocks):
                consumers = [ConvConsumer(blocks[i + 1].conv)]
            else:
                consumers = [ConvConsumer(s.block.conv) for s in self.s_blocks]
            groups.append(UnitGroup(f"g.conv{i}", block, n, consumers))
        return groups

    def _after_task(self, task_idx, class_ids, train_x, train_y, train_ids):
        self._update_store(task_idx, class_ids, train_x, train_y, train_ids)

    def param_count(self):
        params, _ = self._all_named()
        return parameter_count(params)

    def analysis_weights(self):
        block = self.s_blocks[0].block
        return {self.cfg.name: {"kernel": block.conv.weight.data.copy(),
                                "bn_scale": block.bn.gamma.data.copy()}}


_STRATEGY_CLASSES = {
    "finetune": FinetuneStrategy,
    "ewc": EwcStrategy,
    "lwf": LwfStrategy,
    "replay": ReplayStrategy,
    "icarl": IcarlStrategy,
    "wa": WaStrategy,
    "der": DerStrategy,
    "foster": FosterStrategy,
    "memo": MemoStrategy,
    "retrain": RetrainStrategy,
}


def make_strategy(net_spec, cfg: StrategyConfig, train: TrainSettings,
                  rngs: RngBundle, dtype=np.float32,
                  event_sink=None) -> Strategy:
    cls = _STRATEGY_CLASSES[cfg.name]
    return cls(net_spec, cfg, train, rngs, dtype=dtype, event_sink=event_sink)

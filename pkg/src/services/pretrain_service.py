"""Relational consistency pre-training."""

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core import autodiff as ad
from src.core.autodiff import Node
from src.core.config import Settings
from src.core.exceptions import DegenerateInputError, NonFiniteLossError, ParameterError
from src.core.rng import derive_seed, numpy_generator
from src.models.document import Document
from src.models.records import StepRecord
from src.nn import rcm
from src.nn.encoder import DocumentEncoder, TokenSequence, pad_batch
from src.nn.optim import Optimizer, build_optimizer, clip_gradients
from src.nn.parameters import Bound, ParameterBuilder, ParameterSet, gradients_of
from src.services.augment_service import sample_positive_view
from src.services.corpus_service import check_token_budget
from src.utils.logging import get_logger

logger = get_logger(__name__)


@dataclass
class ModelState:
    """Online parameters, their EMA target and the step counter."""

    online: ParameterSet
    target: ParameterSet
    step: int = 0
    tau_ema: float = 0.99
    tau_g: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.tau_ema <= 1.0:
            raise ParameterError(f"tau_ema must lie in (0, 1], got {self.tau_ema}")
        if not self.tau_g > 0:
            raise ParameterError(f"tau_g must be positive, got {self.tau_g}")


def target_view(online: ParameterSet) -> ParameterSet:
    """The online parameters a target keeps: everything but predictors and the vocabulary head."""
    return online.without(rcm.ONLINE_ONLY)


def ema_update(state: ModelState, tau: Optional[float] = None) -> ModelState:
    """xi <- tau * xi + (1 - tau) * theta for every target tensor."""
    tau = state.tau_ema if tau is None else tau
    counterpart = ParameterSet({name: state.online[name] for name in state.target.names() if name in state.online})
    state.target.check_aligned(counterpart)
    target = ParameterSet(
        {name: tau * value + (1.0 - tau) * state.online[name] for name, value in state.target.items()}
    )
    return ModelState(online=state.online, target=target, step=state.step, tau_ema=state.tau_ema, tau_g=state.tau_g)


def ema_tau(settings_tau: float, tau_end: float, schedule: str, step: int, total_steps: int) -> float:
    """Constant, or the cosine ramp from ``settings_tau`` to ``tau_end``."""
    if schedule != "cosine" or total_steps <= 0:
        return settings_tau
    progress = min(step / total_steps, 1.0)
    return tau_end - (tau_end - settings_tau) * (math.cos(math.pi * progress) + 1.0) / 2.0


@dataclass
class BatchLosses:
    lrcm: Optional[Node] = None
    grcm: Optional[Node] = None
    mvlm: Optional[Node] = None
    byol: Optional[Node] = None

    def total(self) -> Node:
        total = rcm.rcm_loss(self.lrcm, self.grcm)
        for term in (self.mvlm, self.byol):
            if term is not None:
                total = total + term
        return total

    def scalars(self) -> Dict[str, Optional[float]]:
        return {
            name: None if term is None else float(term.value)
            for name, term in (("l_lrcm", self.lrcm), ("l_grcm", self.grcm), ("l_mvlm", self.mvlm),
                               ("l_byol", self.byol))
        }


class RCMPretrainer:
    """Builds the model, runs pretrain steps and owns the optimizer."""

    def __init__(self, config: Settings):
        self.config = config
        self.tasks = config.pretrain.task_set
        self.encoder = DocumentEncoder(config.model, config.corpus.vocab_size, config.corpus.patch_size)

    def init_state(self, seed: Optional[int] = None) -> ModelState:
        seed = self.config.seed if seed is None else seed
        model = self.config.model
        builder = ParameterBuilder(numpy_generator(seed, "init"), model.init_scale)
        self.encoder.init_parameters(builder)
        rcm.init_heads(builder, self.tasks, model.hidden, model.d_local, model.d_global, model.n_cap,
                       self.config.corpus.vocab_size)
        online = builder.build()
        return ModelState(
            online=online,
            target=target_view(online),
            tau_ema=self.config.pretrain.tau_ema,
            tau_g=self.config.pretrain.tau_g,
        )

    def _features(self, seqs: Sequence[TokenSequence], p: Bound) -> Tuple[Node, np.ndarray]:
        return pad_batch([self.encoder.features(seq, p)[0] for seq in seqs])

    def mvlm_loss(self, seq: TokenSequence, p: Bound, seed: int) -> Node:
        """Mask text tokens, re-encode, and score the vocabulary head at the masked positions."""
        positions = seq.text_token_positions()
        picked = rcm.sample_token_mask(len(positions), self.config.pretrain.mask_rate, numpy_generator(seed, "mvlm"))
        masked_positions = positions[picked]
        targets = seq.token_ids[masked_positions]
        masked = seq.with_tokens(masked_positions, self.encoder.mask_id)
        fused = self.encoder.encode(self.encoder.embed(masked, p), masked, p)
        return rcm.mvlm_loss(fused, masked_positions, targets, p)

    def batch_losses(
        self, views: Sequence[Tuple[Document, Document]], online: Bound, target: Bound, seeds: Sequence[int]
    ) -> BatchLosses:
        pre = self.config.pretrain
        first = [self.encoder.tokenize(v1) for v1, _ in views]
        second = [self.encoder.tokenize(v2) for _, v2 in views]
        losses = BatchLosses()

        pairwise = {"lrcm", "grcm", "byol"} & self.tasks
        if pairwise:
            m1_online, mask = self._features(first, online)
            m2_target, _ = self._features(second, target)
            directions = [(m1_online, m2_target)]
            if pre.symmetric:
                m2_online, _ = self._features(second, online)
                m1_target, _ = self._features(first, target)
                directions.append((m2_online, m1_target))

            def averaged(fn: Callable[[Node, Node], Node]) -> Node:
                terms = [fn(m_on, m_tg) for m_on, m_tg in directions]
                return terms[0] if len(terms) == 1 else (terms[0] + terms[1]) * 0.5

            if "lrcm" in self.tasks:
                losses.lrcm = averaged(lambda a, b: rcm.lrcm_loss(a, b, online, target, mask))
            if "grcm" in self.tasks:
                n_cap = self.config.model.n_cap
                losses.grcm = averaged(lambda a, b: rcm.grcm_loss(a, b, online, target, mask, pre.tau_g, n_cap))
            if "byol" in self.tasks:
                losses.byol = averaged(lambda a, b: rcm.byol_loss(a, b, online, target, mask))

        if "mvlm" in self.tasks:
            terms = []
            for seq, seed in zip(first, seeds):
                try:
                    terms.append(self.mvlm_loss(seq, online, seed))
                except DegenerateInputError as e:
                    logger.warning(f"Skipping the MVLM term of {seq.doc_id or '<unnamed>'}: {e}")
            if terms:
                losses.mvlm = ad.mean(ad.stack(terms))
        return losses

    def _offenders(self, views, state: ModelState, seeds) -> List[str]:
        online, target = state.online.bind(False), state.target.bind(False)
        offenders = []
        for view, seed in zip(views, seeds):
            value = self.batch_losses([view], online, target, [seed]).total().value
            if not np.isfinite(value):
                offenders.append(view[0].doc_id or "<unnamed>")
        return offenders

    def pretrain_step(
        self, batch: Sequence[Document], state: ModelState, seed: int, optimizer: Optimizer, total_steps: int = 0
    ) -> Tuple[ModelState, StepRecord]:
        """Two views per document, one optimizer update of the online set, then the EMA update."""
        seeds = [derive_seed(seed, "doc", index) for index in range(len(batch))]
        views = []
        for doc, doc_seed in zip(batch, seeds):
            v1, _ = sample_positive_view(doc, derive_seed(doc_seed, "view", 1))
            v2, _ = sample_positive_view(doc, derive_seed(doc_seed, "view", 2))
            views.append((v1, v2))

        online = state.online.bind(True)
        target = state.target.bind(False)
        losses = self.batch_losses(views, online, target, seeds)
        total = losses.total()
        if not np.isfinite(total.value):
            raise NonFiniteLossError(f"loss became {float(total.value)} at step {state.step}",
                                     self._offenders(views, state, seeds))
        ad.backward(total)
        grads, norm = clip_gradients(gradients_of(online), self.config.pretrain.grad_clip)
        lr = optimizer.step(state.online, grads)

        pre = self.config.pretrain
        tau = ema_tau(pre.tau_ema, pre.tau_ema_end, pre.ema_schedule, state.step, total_steps)
        state = ema_update(state, tau)
        state.step += 1
        record = StepRecord(step=state.step, seed=seed, total=float(total.value), grad_norm=norm, lr=lr, tau_ema=tau,
                            **losses.scalars())
        return state, record

    def train(
        self,
        documents: Sequence[Document],
        steps: Optional[int] = None,
        state: Optional[ModelState] = None,
        on_record: Optional[Callable[[StepRecord], None]] = None,
    ) -> Tuple[ModelState, List[StepRecord]]:
        """Run ``steps`` pretrain steps over shuffled batches of ``documents``."""
        if not documents:
            raise ParameterError("pre-training needs at least one document")
        for doc in documents:
            check_token_budget(doc, self.config.corpus.max_tokens_per_entity)
        pre = self.config.pretrain
        steps = pre.steps if steps is None else steps
        state = state or self.init_state()
        optimizer = build_optimizer(pre, steps)
        batch_size = min(pre.batch_size, len(documents))
        records: List[StepRecord] = []
        order: List[int] = []
        epoch = 0
        logger.info(f"Pre-training {sorted(self.tasks)} for {steps} steps on {len(documents)} documents")
        for step in range(steps):
            if len(order) < batch_size:
                order.extend(numpy_generator(self.config.seed, "batches", epoch).permutation(len(documents)).tolist())
                epoch += 1
            batch = [documents[i] for i in order[:batch_size]]
            del order[:batch_size]
            state, record = self.pretrain_step(batch, state, derive_seed(self.config.seed, "step", step), optimizer,
                                               steps)
            records.append(record)
            if on_record is not None:
                on_record(record)
            if record.step % pre.log_every == 0 or record.step == steps:
                logger.info(f"step {record.step}/{steps}", **record.model_dump(exclude_none=True))
        return state, records


def export_encoder(state: ModelState) -> ParameterSet:
    """Only the online encoder survives pre-training."""
    return state.online.subset([f"{DocumentEncoder.prefix}."])

"""Sequential recommenders: item sequence in, full-catalog logits out."""
import copy
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence
from tqdm import tqdm

from .corpus import PAD, SequenceSample, as_arrays
from .errors import DataError, InputError, NumericError, ParameterError, TrainingError

logger = logging.getLogger(__name__)

ARCHITECTURES = ("gru", "attention")
DEFAULT_DROPOUT = {"gru": 0.5, "attention": 0.3}
DEFAULT_LAYERS = {"gru": 2, "attention": 1}

# (logits [B, I], 1-based targets [B], training-sample indices [B]) -> scalar
BatchLoss = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def get_optimal_device() -> str:
    """Return 'cuda' if available, otherwise 'cpu'."""
    return "cuda" if torch.cuda.is_available() else "cpu"


def resolve_device(device: str) -> torch.device:
    return torch.device(get_optimal_device() if device == "auto" else device)


@dataclass
class ModelSpec:
    """Architecture and sizes of a recommender; ``build(seed)`` makes one."""
    architecture: str
    num_items: int
    max_len: int
    embedding_size: int = 64
    dropout: Optional[float] = None
    layers: Optional[int] = None
    heads: int = 2
    tie_weights: bool = False

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ParameterError(f"unknown architecture {self.architecture!r}; choose from {ARCHITECTURES}")
        if self.num_items < 1 or self.max_len < 1 or self.embedding_size < 1:
            raise ParameterError("num_items, max_len and embedding_size must be positive")
        if self.dropout is None:
            self.dropout = DEFAULT_DROPOUT[self.architecture]
        if self.layers is None:
            self.layers = DEFAULT_LAYERS[self.architecture]
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.architecture == "attention" and self.embedding_size % self.heads:
            raise ParameterError("embedding_size must be divisible by the number of heads")

    def build(self, seed: int) -> "SequentialRecommender":
        torch.manual_seed(seed)
        cls = GRURecommender if self.architecture == "gru" else AttentionRecommender
        model = cls(self)
        model.seed = seed
        return model


class SequentialRecommender(nn.Module):
    """
    Shared embedding table, padding handling and output projection.

    Subclasses implement ``encode`` for non-empty, left-padded sequences of
    length ``max_len``. Empty histories keep the zero state, so their logits
    are the projection bias.
    """
    architecture = ""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.num_items = spec.num_items
        self.max_len = spec.max_len
        self.seed: Optional[int] = None
        d = spec.embedding_size
        self.item_embedding = nn.Embedding(spec.num_items + 1, d, padding_idx=PAD)
        if spec.tie_weights:
            self.output_bias = nn.Parameter(torch.zeros(spec.num_items))
        else:
            self.output = nn.Linear(d, spec.num_items)

    def encode(self, seqs: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def prepare(self, seqs: torch.Tensor) -> torch.Tensor:
        """Validate ids and left-padding, then normalize to length ``max_len``."""
        if seqs.dim() == 1:
            seqs = seqs.unsqueeze(0)
        seqs = seqs.long()
        if seqs.numel() and (int(seqs.min()) < 0 or int(seqs.max()) > self.num_items):
            raise InputError(f"item ids must be in [0, {self.num_items}]")
        width = seqs.size(1)
        if width > self.max_len:
            if (seqs[:, : width - self.max_len] != PAD).any():
                raise InputError(f"sequence has more than {self.max_len} items")
            seqs = seqs[:, width - self.max_len:]
        elif width < self.max_len:
            seqs = F.pad(seqs, (self.max_len - width, 0), value=PAD)
        present = (seqs != PAD).int()
        if (present[:, 1:] < present[:, :-1]).any():
            raise InputError("padding must precede every item in a sequence")
        return seqs

    def project(self, state: torch.Tensor) -> torch.Tensor:
        if self.spec.tie_weights:
            return state @ self.item_embedding.weight[1:].t() + self.output_bias
        return self.output(state)

    def forward(self, seqs: torch.Tensor) -> torch.Tensor:
        seqs = self.prepare(seqs)
        lengths = (seqs != PAD).sum(dim=1)
        weight = self.item_embedding.weight
        state = weight.new_zeros((seqs.size(0), weight.size(1)))
        nonempty = lengths > 0
        if bool(nonempty.any()):
            state[nonempty] = self.encode(seqs[nonempty], lengths[nonempty])
        return self.project(state)


class GRURecommender(SequentialRecommender):
    architecture = "gru"

    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        d = spec.embedding_size
        self.emb_dropout = nn.Dropout(spec.dropout)
        self.gru = nn.GRU(
            d, d,
            num_layers=spec.layers,
            batch_first=True,
            dropout=spec.dropout if spec.layers > 1 else 0.0,
        )

    def encode(self, seqs: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        # Rotate each row so its items start at position 0, then pack.
        width = seqs.size(1)
        positions = torch.arange(width, device=seqs.device).unsqueeze(0)
        aligned = seqs.gather(1, (positions + (width - lengths).unsqueeze(1)) % width)
        emb = self.emb_dropout(self.item_embedding(aligned))
        packed = pack_padded_sequence(emb, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, hidden = self.gru(packed)
        return hidden[-1]


class AttentionBlock(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.attention = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.attention_norm = nn.LayerNorm(d)
        self.feed_forward = nn.Sequential(
            nn.Linear(d, d), nn.GELU(), nn.Dropout(dropout), nn.Linear(d, d)
        )
        self.output_norm = nn.LayerNorm(d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, blocked: torch.Tensor) -> torch.Tensor:
        mask = blocked.repeat_interleave(self.heads, dim=0)
        attended, _ = self.attention(x, x, x, attn_mask=mask, need_weights=False)
        x = self.attention_norm(x + self.dropout(attended))
        return self.output_norm(x + self.dropout(self.feed_forward(x)))


class AttentionRecommender(SequentialRecommender):
    architecture = "attention"

    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        d = spec.embedding_size
        self.position_embedding = nn.Embedding(spec.max_len, d)
        self.input_norm = nn.LayerNorm(d)
        self.dropout = nn.Dropout(spec.dropout)
        self.blocks = nn.ModuleList(
            [AttentionBlock(d, spec.heads, spec.dropout) for _ in range(spec.layers)]
        )

    def encode(self, seqs: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        width = seqs.size(1)
        positions = torch.arange(width, device=seqs.device)
        x = self.item_embedding(seqs) + self.position_embedding(positions).unsqueeze(0)
        x = self.dropout(self.input_norm(x))
        # Causal; padding keys are hidden from every query except themselves.
        causal = torch.ones(width, width, dtype=torch.bool, device=seqs.device).tril()
        own = torch.eye(width, dtype=torch.bool, device=seqs.device)
        allowed = causal.unsqueeze(0) & ((seqs != PAD).unsqueeze(1) | own.unsqueeze(0))
        for block in self.blocks:
            x = block(x, ~allowed)
        return x[:, -1]


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 256
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    eval_cutoff: int = 10
    weight_decay: float = 0.0
    device: str = "cpu"
    progress: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be > 0")
        if self.early_stop_patience < 1:
            raise ParameterError("early_stop_patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ParameterError("batch_size and max_epochs must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_ndcg10: float
    wall_seconds: float


@dataclass
class FitResult:
    model: SequentialRecommender
    trace: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_ndcg: float = 0.0

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [vars(r) for r in self.trace],
            columns=["epoch", "train_loss", "valid_ndcg10", "wall_seconds"],
        )


def write_trace(result: FitResult, path: Union[str, Path]) -> None:
    result.trace_frame().to_csv(path, index=False, lineterminator="\n")


def to_tensors(samples: Sequence[SequenceSample], device: Union[str, torch.device] = "cpu"
               ) -> Tuple[torch.Tensor, torch.Tensor]:
    seqs, targets = as_arrays(samples)
    return torch.from_numpy(seqs).to(device), torch.from_numpy(targets).to(device)


def cross_entropy_loss(logits: torch.Tensor, targets: Union[int, torch.Tensor]) -> torch.Tensor:
    """Mean of ``-log softmax(logits)[target]``; targets are 1-based item ids."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    targets = torch.as_tensor(targets, dtype=torch.long, device=logits.device).reshape(-1)
    if not bool(torch.isfinite(logits).all()):
        raise NumericError("logits contain non-finite values")
    if bool((targets < 1).any()) or bool((targets > logits.size(1)).any()):
        raise InputError(f"targets must be in [1, {logits.size(1)}]")
    return F.cross_entropy(logits, targets - 1)


def target_ranks(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """1-based rank of each target by descending logit, ties by ascending id."""
    index = (targets.long() - 1).unsqueeze(1)
    target_logit = logits.gather(1, index)
    ids = torch.arange(logits.size(1), device=logits.device).unsqueeze(0)
    higher = (logits > target_logit).sum(dim=1)
    tied_before = ((logits == target_logit) & (ids < index)).sum(dim=1)
    return higher + tied_before + 1


def predict_logits(
    model: SequentialRecommender,
    samples: Union[Sequence[SequenceSample], torch.Tensor],
    batch_size: int = 512,
) -> torch.Tensor:
    """Eval-mode logits ``[N, |I|]`` on the CPU."""
    seqs = samples if isinstance(samples, torch.Tensor) else to_tensors(samples)[0]
    device = next(model.parameters()).device
    was_training = model.training
    model.eval()
    chunks = []
    with torch.no_grad():
        for begin in range(0, seqs.size(0), batch_size):
            chunks.append(model(seqs[begin: begin + batch_size].to(device)).cpu())
    model.train(was_training)
    if not chunks:
        return torch.empty(0, model.num_items)
    return torch.cat(chunks)


def score(model: SequentialRecommender, sequence: Sequence[int]) -> torch.Tensor:
    """Logits for a single sequence."""
    return predict_logits(model, torch.as_tensor([list(sequence)], dtype=torch.long))[0]


def topn_from_logits(logits: torch.Tensor, n: int) -> List[int]:
    if not 1 <= n <= logits.numel():
        raise ParameterError(f"n must be in [1, {logits.numel()}], got {n}")
    order = torch.sort(logits, descending=True, stable=True).indices[:n]
    return [int(i) + 1 for i in order]


def predict_topn(model: SequentialRecommender, sequence: Sequence[int], n: int) -> List[int]:
    return topn_from_logits(score(model, sequence), n)


def validation_ndcg(model: SequentialRecommender, seqs: torch.Tensor, targets: torch.Tensor,
                    n: int = 10) -> float:
    ranks = target_ranks(predict_logits(model, seqs), targets.cpu()).double()
    gains = torch.where(ranks <= n, 1.0 / torch.log2(ranks + 1.0), torch.zeros_like(ranks))
    return float(gains.mean())


def _snapshot(modules: Sequence[nn.Module]) -> List[Dict[str, torch.Tensor]]:
    return [copy.deepcopy(m.state_dict()) for m in modules]


def fit(
    model: SequentialRecommender,
    train: Sequence[SequenceSample],
    valid: Sequence[SequenceSample],
    cfg: TrainConfig,
    loss_fn: Optional[BatchLoss] = None,
    extra_modules: Sequence[nn.Module] = (),
    log_queue=None,
    stop_event=None,
) -> FitResult:
    """
    Mini-batch Adam on the mean per-sample loss with early stopping.

    Validation NDCG at ``cfg.eval_cutoff`` is checked after every epoch; the
    best epoch's parameters (including ``extra_modules``) are restored.
    """
    if not train or not valid:
        raise ParameterError("fit needs non-empty train and valid samples")
    if loss_fn is None:
        loss_fn = lambda logits, targets, index: cross_entropy_loss(logits, targets)

    device = resolve_device(cfg.device)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    modules = [model, *extra_modules]
    for m in modules:
        m.to(device)
    train_seqs, train_targets = to_tensors(train, device)
    valid_seqs, valid_targets = to_tensors(valid, device)
    params = [p for m in modules for p in m.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    result = FitResult(model)
    best_state = _snapshot(modules)
    best_ndcg = -1.0
    stale = 0
    n = len(train)
    start = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        for m in modules:
            m.train()
        order = torch.from_numpy(rng.permutation(n)).to(device)
        total = 0.0
        batches = range(0, n, cfg.batch_size)
        for begin in tqdm(batches, desc=f"epoch {epoch}", disable=not cfg.progress, leave=False):
            index = order[begin: begin + cfg.batch_size]
            logits = model(train_seqs[index])
            try:
                loss = loss_fn(logits, train_targets[index], index)
            except NumericError as e:
                raise TrainingError(f"training diverged: {e}", epoch) from e
            if not bool(torch.isfinite(loss)):
                raise TrainingError("training loss became non-finite", epoch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(index)

        ndcg = validation_ndcg(model, valid_seqs, valid_targets, cfg.eval_cutoff)
        record = EpochRecord(epoch, total / n, ndcg, time.perf_counter() - start)
        result.trace.append(record)
        msg = f"epoch {epoch}: loss={record.train_loss:.4f} valid NDCG@{cfg.eval_cutoff}={ndcg:.4f}"
        logger.debug(msg)
        if log_queue:
            log_queue.put(msg)

        if ndcg > best_ndcg:
            best_ndcg, result.best_epoch, stale = ndcg, epoch, 0
            best_state = _snapshot(modules)
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
        if stop_event is not None and stop_event.is_set():
            break

    for m, state in zip(modules, best_state):
        m.load_state_dict(state)
        m.eval()
    result.best_valid_ndcg = best_ndcg
    return result


CHECKPOINT_MAGIC = b"RDCK"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = np.dtype([
    ("magic", "S4"),
    ("version", "<u2"),
    ("architecture", "S12"),
    ("num_items", "<u4"),
    ("embedding_size", "<u4"),
    ("max_len", "<u4"),
    ("layers", "<u2"),
    ("heads", "<u2"),
    ("flags", "<u4"),
])


def save_checkpoint(model: SequentialRecommender, path: Union[str, Path]) -> None:
    """
    Header followed by every ``state_dict`` tensor, in ``state_dict`` order,
    as flat little-endian float32. ``flags`` bit 0 marks tied output weights.
    """
    spec = model.spec
    header = np.array([(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, spec.architecture.encode("ascii"),
        spec.num_items, spec.embedding_size, spec.max_len, spec.layers, spec.heads,
        int(spec.tie_weights),
    )], dtype=_CHECKPOINT_HEADER)
    with open(path, "wb") as f:
        header.tofile(f)
        for tensor in model.state_dict().values():
            tensor.detach().cpu().numpy().astype("<f4").tofile(f)


def load_checkpoint(path: Union[str, Path]) -> SequentialRecommender:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        header = np.fromfile(f, dtype=_CHECKPOINT_HEADER, count=1)
        if header.size != 1 or header["magic"][0] != CHECKPOINT_MAGIC:
            raise DataError(f"{path} is not a model checkpoint")
        if int(header["version"][0]) != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {int(header['version'][0])}")
        h = header[0]
        spec = ModelSpec(
            architecture=h["architecture"].decode("ascii"),
            num_items=int(h["num_items"]),
            max_len=int(h["max_len"]),
            embedding_size=int(h["embedding_size"]),
            layers=int(h["layers"]),
            heads=int(h["heads"]),
            tie_weights=bool(int(h["flags"]) & 1),
        )
        model = spec.build(seed=0)
        state = {}
        for name, tensor in model.state_dict().items():
            values = np.fromfile(f, dtype="<f4", count=tensor.numel())
            if values.size != tensor.numel():
                raise DataError(f"{path}: truncated at parameter {name}")
            state[name] = torch.from_numpy(values.astype(np.float32).reshape(tuple(tensor.shape)))
    model.load_state_dict(state)
    model.eval()
    return model

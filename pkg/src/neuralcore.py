"""
Numeric core of the predictor: GIN encoder with layer-wise mean readout, MLP head,
gradient plumbing, optimizers, a finite-difference checker and checkpoint files.
All tensors are 64-bit floats on the CPU.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from .cellgraph import CellGraph, MatrixEncoding, as_oon, encode_matrices
from .errors import ArtifactError, GraphError, NumericError


DTYPE = torch.float64
CHECKPOINT_VERSION = 1
LEAKY_SLOPE = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    """Shape of the GIN encoder."""

    vocabulary: Tuple[str, ...]
    hidden: int = 128
    layers: int = 3

    def __post_init__(self):
        object.__setattr__(self, "vocabulary", tuple(self.vocabulary))
        if not self.vocabulary:
            raise ValueError("encoder vocabulary must be non-empty")
        if self.hidden < 1 or self.layers < 1:
            raise ValueError("hidden width and layer count must be positive")

    @property
    def embedding_dim(self) -> int:
        """Layer 0 contributes the one-hot width, every GIN layer the hidden width."""
        return len(self.vocabulary) + self.layers * self.hidden

    def to_json(self) -> dict:
        return {"vocabulary": list(self.vocabulary), "hidden": self.hidden, "layers": self.layers}

    @classmethod
    def from_json(cls, data: dict) -> "EncoderConfig":
        return cls(vocabulary=tuple(data["vocabulary"]), hidden=int(data["hidden"]),
                   layers=int(data["layers"]))


@dataclass
class GraphBatch:
    """Disjoint union of several cells, in the usual edge-list plus batch-vector layout."""

    features: torch.Tensor
    edge_index: torch.Tensor
    batch: torch.Tensor
    num_graphs: int

    @classmethod
    def from_encodings(cls, encodings: Sequence[MatrixEncoding]) -> "GraphBatch":
        features, sources, targets, owners = [], [], [], []
        offset = 0
        for k, enc in enumerate(encodings):
            rows, cols = np.nonzero(enc.adjacency)
            sources.append(rows + offset)
            targets.append(cols + offset)
            features.append(enc.attributes)
            owners.append(np.full(enc.node_count, k))
            offset += enc.node_count
        if not encodings:
            raise GraphError("cannot batch an empty list of cells")
        widths = {f.shape[1] for f in features}
        if len(widths) != 1:
            raise GraphError(f"attribute widths differ across the batch: {sorted(widths)}")
        edge_index = np.stack([np.concatenate(sources), np.concatenate(targets)])
        return cls(
            features=torch.from_numpy(np.concatenate(features)).to(DTYPE),
            edge_index=torch.from_numpy(edge_index.astype(np.int64)),
            batch=torch.from_numpy(np.concatenate(owners).astype(np.int64)),
            num_graphs=len(encodings),
        )


def collate(graphs: Sequence[CellGraph], vocabulary: Sequence[str]) -> GraphBatch:
    """Encode cells (OOE ones through their line graph) and batch them."""
    return GraphBatch.from_encodings([encode_matrices(as_oon(g), vocabulary) for g in graphs])


class GINLayer(nn.Module):
    """h_n = MLP(h_n + sum of in- and out-neighbor features)."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, out_dim, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(out_dim, out_dim, dtype=DTYPE),
        )

    def aggregate(self, h: torch.Tensor, edge_index: torch.Tensor) -> torch.Tensor:
        src, dst = edge_index
        agg = h.index_add(0, dst, h[src])
        return agg.index_add(0, src, h[dst])

    def forward(self, h: torch.Tensor, edge_index: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.aggregate(h, edge_index))


class GINEncoder(nn.Module):
    """Stack of GIN layers; returns node features of every layer including the input one-hots."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        widths = [len(config.vocabulary)] + [config.hidden] * config.layers
        self.layers = nn.ModuleList(GINLayer(a, b) for a, b in zip(widths[:-1], widths[1:]))

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def forward(self, batch: GraphBatch) -> List[torch.Tensor]:
        if batch.features.shape[1] != len(self.config.vocabulary):
            raise GraphError(
                f"batch attribute width {batch.features.shape[1]} does not match "
                f"encoder vocabulary size {len(self.config.vocabulary)}")
        h = batch.features
        per_layer = [h]
        for layer in self.layers:
            h = layer(h, batch.edge_index)
            per_layer.append(h)
        return per_layer

    def embed(self, graphs: Sequence[CellGraph]) -> torch.Tensor:
        """Graph embeddings z(G), one row per cell."""
        batch = collate(graphs, self.config.vocabulary)
        return readout(self(batch), batch)


def readout(per_layer: Sequence[torch.Tensor], batch: GraphBatch) -> torch.Tensor:
    """Per-layer mean over each graph's nodes, concatenated across layers in order."""
    counts = torch.bincount(batch.batch, minlength=batch.num_graphs).to(DTYPE).unsqueeze(1)
    pooled = []
    for h in per_layer:
        sums = torch.zeros(batch.num_graphs, h.shape[1], dtype=DTYPE).index_add(0, batch.batch, h)
        pooled.append(sums / counts)
    return torch.cat(pooled, dim=1)


class MlpHead(nn.Module):
    """Three dense layers with LeakyReLU(0.02) between them, scalar output."""

    def __init__(self, in_dim: int, hidden: int = 128):
        super().__init__()
        self.in_dim = in_dim
        self.hidden = hidden
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden, dtype=DTYPE),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Linear(hidden, hidden, dtype=DTYPE),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Linear(hidden, 1, dtype=DTYPE),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.in_dim:
            raise GraphError(f"head expects embeddings of width {self.in_dim}, got {z.shape[-1]}")
        return self.net(z).squeeze(-1)


def torch_generator(rng: np.random.Generator) -> torch.Generator:
    """Torch generator seeded from a numpy one, so a single seed drives both."""
    return torch.Generator().manual_seed(int(rng.integers(0, 2 ** 63 - 1)))


def kaiming_init(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """Kaiming-uniform (fan-in) weights and zero biases for every dense layer."""
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, nn.Linear):
                nn.init.kaiming_uniform_(sub.weight, nonlinearity="relu", generator=generator)
                nn.init.zeros_(sub.bias)
    return module


def build_encoder(config: EncoderConfig, rng: np.random.Generator) -> GINEncoder:
    return kaiming_init(GINEncoder(config), torch_generator(rng))


def build_head(in_dim: int, rng: np.random.Generator, hidden: int = 128) -> MlpHead:
    return kaiming_init(MlpHead(in_dim, hidden), torch_generator(rng))


def backward(loss: torch.Tensor, module: nn.Module) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar loss, one entry per named parameter block."""
    if not torch.isfinite(loss).all():
        raise NumericError(f"loss is not finite ({float(loss):.6g})")
    module.zero_grad(set_to_none=True)
    loss.backward()
    grads = {}
    for name, param in module.named_parameters():
        grad = param.grad if param.grad is not None else torch.zeros_like(param)
        if not torch.isfinite(grad).all():
            raise NumericError("non-finite gradient", block=name)
        grads[name] = grad.detach()
    return grads


def _trainable(module: nn.Module) -> List[nn.Parameter]:
    return [p for p in module.parameters() if p.requires_grad]


def make_sgd(module: nn.Module, lr: float, momentum: float = 0.0) -> torch.optim.SGD:
    return torch.optim.SGD(_trainable(module), lr=lr, momentum=momentum)


def make_adam(module: nn.Module, lr: float, betas: Tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> torch.optim.Adam:
    return torch.optim.Adam(_trainable(module), lr=lr, betas=betas, eps=eps)


def _apply(optimizer: torch.optim.Optimizer, module: nn.Module, grads: Dict[str, torch.Tensor]) -> None:
    for name, param in module.named_parameters():
        if name in grads and param.requires_grad:
            param.grad = grads[name].clone()
    optimizer.step()


def sgd_step(optimizer: torch.optim.SGD, module: nn.Module, grads: Dict[str, torch.Tensor]) -> None:
    """theta <- theta - lr * v with heavy-ball momentum v <- m v + g."""
    _apply(optimizer, module, grads)


def adam_step(optimizer: torch.optim.Adam, module: nn.Module, grads: Dict[str, torch.Tensor]) -> None:
    """Standard bias-corrected Adam update."""
    _apply(optimizer, module, grads)


class ActivationPatternRecorder:
    """Records which side of zero every rectifier input falls on during a forward pass."""

    def __init__(self, modules: Sequence[nn.Module]):
        self.patterns: List[torch.Tensor] = []
        self._handles = []
        for module in modules:
            for sub in module.modules():
                if isinstance(sub, (nn.ReLU, nn.LeakyReLU)):
                    self._handles.append(sub.register_forward_hook(self._record))

    def _record(self, module, inputs, output) -> None:
        self.patterns.append((inputs[0] > 0).detach().clone())

    def capture(self, fn: Callable[[], torch.Tensor]) -> Tuple[float, List[torch.Tensor]]:
        self.patterns = []
        value = float(fn())
        return value, self.patterns

    def close(self) -> None:
        for handle in self._handles:
            handle.remove()


@dataclass
class FiniteDifferenceReport:
    """Outcome of comparing autograd against central differences."""

    max_rel_error: float
    checked: int
    skipped: int = 0
    worst: Optional[Tuple[int, int]] = None
    errors: List[float] = field(default_factory=list)


def _same_patterns(a: List[torch.Tensor], b: List[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def finite_difference_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                            eps: float = 1e-4, coordinates: int = 200,
                            rng: Optional[np.random.Generator] = None,
                            kink_modules: Sequence[nn.Module] = ()) -> FiniteDifferenceReport:
    """Worst relative error between autograd and central differences over sampled coordinates.

    Coordinates whose perturbation flips a rectifier in kink_modules are skipped and replaced by
    fresh ones until `coordinates` have been checked or every coordinate has been tried.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    params = list(params)
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [a if a is not None else torch.zeros_like(p) for a, p in zip(analytic, params)]
    scale = max(float(a.abs().max()) for a in analytic) if analytic else 0.0
    floor = max(1e-3 * scale, 1e-12)

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    order = rng.permutation(total)
    offsets = np.cumsum([0] + sizes)

    recorder = ActivationPatternRecorder(kink_modules)
    try:
        with torch.no_grad():
            _, base_pattern = recorder.capture(loss_fn)
        report = FiniteDifferenceReport(max_rel_error=0.0, checked=0)
        for flat in (int(p) for p in order):
            if report.checked >= coordinates:
                break
            block = int(np.searchsorted(offsets, flat, side="right") - 1)
            index = flat - int(offsets[block])
            view = params[block].data.view(-1)
            original = view[index].item()
            with torch.no_grad():
                view[index] = original + eps
                plus, plus_pattern = recorder.capture(loss_fn)
                view[index] = original - eps
                minus, minus_pattern = recorder.capture(loss_fn)
                view[index] = original
            if kink_modules and not (_same_patterns(base_pattern, plus_pattern)
                                      and _same_patterns(base_pattern, minus_pattern)):
                report.skipped += 1
                continue
            numeric = (plus - minus) / (2 * eps)
            exact = float(analytic[block].reshape(-1)[index])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            report.errors.append(error)
            report.checked += 1
            if error >= report.max_rel_error:
                report.max_rel_error = error
                report.worst = (block, index)
        return report
    finally:
        recorder.close()


def module_shapes(module: nn.Module) -> Dict[str, List[int]]:
    return {name: list(t.shape) for name, t in module.state_dict().items()}


def save_checkpoint(path: Union[str, Path], kind: str, config: dict,
                    modules: Dict[str, nn.Module], extra: Optional[dict] = None) -> None:
    """Versioned checkpoint: config echo, parameter shapes and exact float64 values."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": json.dumps(config, sort_keys=True),
        "shapes": {name: module_shapes(m) for name, m in modules.items()},
        "state": {name: {k: v.detach().clone() for k, v in m.state_dict().items()}
                  for name, m in modules.items()},
        "extra": extra or {},
    }
    torch.save(payload, str(path))


def load_checkpoint(path: Union[str, Path], kind: str) -> dict:
    """Read a checkpoint and check its version and kind; the config comes back parsed."""
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(str(path), weights_only=True)
    except Exception as e:
        raise ArtifactError(f"checkpoint {path} could not be read: {e}") from e
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ArtifactError(
            f"checkpoint {path} has version {payload.get('version')}, expected {CHECKPOINT_VERSION}")
    if payload.get("kind") != kind:
        raise ArtifactError(f"checkpoint {path} holds a '{payload.get('kind')}', expected a '{kind}'")
    payload = dict(payload)
    payload["config"] = json.loads(payload["config"])
    return payload


def restore_module(module: nn.Module, payload: dict, name: str) -> nn.Module:
    """Load one named module from a checkpoint after comparing shapes."""
    stored = payload["shapes"].get(name)
    if stored is None:
        raise ArtifactError(f"checkpoint has no '{name}' parameters")
    expected = module_shapes(module)
    if stored != expected:
        mismatched = sorted(k for k in set(stored) | set(expected) if stored.get(k) != expected.get(k))
        raise ArtifactError(f"'{name}' parameter shapes do not match the config: {', '.join(mismatched)}")
    module.load_state_dict(payload["state"][name])
    return module


def save_encoder(path: Union[str, Path], encoder: GINEncoder, extra: Optional[dict] = None) -> None:
    save_checkpoint(path, "encoder", {"encoder": encoder.config.to_json()}, {"encoder": encoder}, extra)


def load_encoder(path: Union[str, Path], expected: Optional[EncoderConfig] = None) -> GINEncoder:
    """Encoder from a checkpoint; raises ArtifactError when it differs from the expected config."""
    payload = load_checkpoint(path, "encoder")
    config = EncoderConfig.from_json(payload["config"]["encoder"])
    if expected is not None and config != expected:
        raise ArtifactError(
            f"encoder checkpoint {path} was trained for {len(config.vocabulary)} ops x "
            f"{config.layers} layers x {config.hidden} hidden, config asks for "
            f"{len(expected.vocabulary)} x {expected.layers} x {expected.hidden}")
    return restore_module(GINEncoder(config), payload, "encoder")

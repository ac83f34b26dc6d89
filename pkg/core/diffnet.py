"""Message-passing regressor with a two-headed Gaussian output

The network is written functionally over one flat float64 parameter tensor,
so a ParamVector is exactly what the optimiser updates and what torch's
reverse-mode autograd differentiates.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from config.pipeline import NetConfig
from core.errors import ConfigError, DataError, NumericError
from core.losses import LossWeights, interpolated_loss
from core.models import MolecularGraph, ProbPrediction
from utils import get_logger, torch_generator

logger = get_logger(__name__)

DTYPE = torch.float64
CHECKPOINT_FORMAT = "moluq-checkpoint"
CHECKPOINT_VERSION = 1
LN2 = math.log(2.0)
# softplus(VARIANCE_BIAS_INIT) == 1
VARIANCE_BIAS_INIT = math.log(math.expm1(1.0))
VARIANCE_WEIGHT_GAIN = 0.1


@dataclass(frozen=True)
class ParamEntry:
    name: str
    shape: Tuple[int, ...]
    offset: int
    fan_in: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class ParamLayout:
    """Named tensors and their slices of the flat parameter array"""
    entries: Tuple[ParamEntry, ...]

    @property
    def size(self) -> int:
        last = self.entries[-1]
        return last.offset + last.size

    def names(self) -> List[str]:
        return [entry.name for entry in self.entries]

    def describe(self) -> List[Tuple[str, List[int]]]:
        return [(entry.name, list(entry.shape)) for entry in self.entries]


def param_layout(config: NetConfig) -> ParamLayout:
    """Layout of every trainable tensor for a network configuration"""
    dim = config.embedding_dim
    shapes: List[Tuple[str, Tuple[int, ...], int]] = [
        ("embedding", (len(config.elements), dim), 1),
    ]
    for t in range(config.interaction_steps):
        block = f"interaction{t}"
        shapes += [
            (f"{block}.filter1.weight", (dim, config.rbf_count), config.rbf_count),
            (f"{block}.filter1.bias", (dim,), config.rbf_count),
            (f"{block}.filter2.weight", (dim, dim), dim),
            (f"{block}.filter2.bias", (dim,), dim),
            (f"{block}.update1.weight", (dim, dim), dim),
            (f"{block}.update1.bias", (dim,), dim),
            (f"{block}.update2.weight", (dim, dim), dim),
            (f"{block}.update2.bias", (dim,), dim),
        ]
    width = dim
    for i, hidden in enumerate(config.hidden_dims):
        shapes += [
            (f"readout{i}.weight", (hidden, width), width),
            (f"readout{i}.bias", (hidden,), width),
        ]
        width = hidden
    shapes += [
        ("mean_head.weight", (1, width), width),
        ("mean_head.bias", (1,), width),
        ("variance_head.weight", (1, width), width),
        ("variance_head.bias", (1,), width),
    ]

    entries = []
    offset = 0
    for name, shape, fan_in in shapes:
        entry = ParamEntry(name, shape, offset, fan_in)
        entries.append(entry)
        offset += entry.size
    return ParamLayout(tuple(entries))


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter array with its layout descriptor"""
    values: torch.Tensor
    layout: ParamLayout

    def __post_init__(self):
        if self.values.ndim != 1 or self.values.numel() != self.layout.size:
            raise ConfigError(
                f"parameter vector has {self.values.numel()} entries, layout expects {self.layout.size}"
            )
        if not bool(torch.isfinite(self.values).all()):
            raise NumericError("parameter vector contains non-finite entries")

    def __len__(self) -> int:
        return self.layout.size

    def numpy(self) -> np.ndarray:
        return self.values.detach().cpu().numpy().copy()

    def tensors(self) -> Dict[str, torch.Tensor]:
        return unflatten(self.values, self.layout)

    def with_values(self, values: torch.Tensor) -> "ParamVector":
        return ParamVector(values.detach().clone().to(DTYPE), self.layout)


def unflatten(flat: torch.Tensor, layout: ParamLayout) -> Dict[str, torch.Tensor]:
    """Views of the flat tensor by name; gradients flow back into flat"""
    return {
        entry.name: flat[entry.offset:entry.offset + entry.size].view(entry.shape)
        for entry in layout.entries
    }


@dataclass(frozen=True)
class TargetScaler:
    """Affine map from network units to eV fitted on the training targets"""
    shift: float = 0.0
    scale: float = 1.0
    per_atom: bool = False

    @classmethod
    def fit(cls, targets: Sequence[float], n_atoms: Sequence[int], per_atom: bool = False) -> "TargetScaler":
        y = np.asarray(targets, dtype=np.float64)
        n = np.asarray(n_atoms, dtype=np.float64)
        if y.size == 0:
            return cls()
        if per_atom:
            shift = float(np.mean(y / n))
            residual = y - n * shift
        else:
            shift = float(np.mean(y))
            residual = y - shift
        scale = float(np.std(residual))
        if not np.isfinite(scale) or scale <= 0.0:
            scale = 1.0
        return cls(shift=shift, scale=scale, per_atom=per_atom)

    def to_dict(self) -> Dict[str, Union[float, bool]]:
        return {"shift": self.shift, "scale": self.scale, "per_atom": self.per_atom}

    @classmethod
    def from_dict(cls, data: Dict[str, Union[float, bool]]) -> "TargetScaler":
        return cls(shift=float(data["shift"]), scale=float(data["scale"]), per_atom=bool(data["per_atom"]))


@dataclass
class GraphBatch:
    """Disjoint union of graphs as flat tensors"""
    ids: List[str]
    species: torch.Tensor  # (N,) embedding rows
    src: torch.Tensor  # (E,)
    dst: torch.Tensor  # (E,)
    distance: torch.Tensor  # (E,)
    node_graph: torch.Tensor  # (N,) graph index per node
    n_atoms: torch.Tensor  # (G,)
    targets: torch.Tensor  # (G,), NaN where unknown

    @property
    def n_graphs(self) -> int:
        return len(self.ids)


def collate_graphs(graphs: Sequence[MolecularGraph], config: NetConfig) -> GraphBatch:
    """Stack graphs into one batch, offsetting node indices per graph"""
    lookup = {z: i for i, z in enumerate(config.elements)}
    species, src, dst, distance, node_graph, n_atoms, targets = [], [], [], [], [], [], []
    offset = 0
    for g_index, graph in enumerate(graphs):
        try:
            species.append(np.array([lookup[int(z)] for z in graph.atomic_numbers], dtype=np.int64))
        except KeyError as e:
            raise DataError(f"{graph.id}: atomic number {e.args[0]} not in supported set {config.elements}")
        src.append(graph.edge_index[0] + offset)
        dst.append(graph.edge_index[1] + offset)
        distance.append(graph.edge_distance)
        node_graph.append(np.full(graph.n_atoms, g_index, dtype=np.int64))
        n_atoms.append(graph.n_atoms)
        targets.append(np.nan if graph.target is None else graph.target)
        offset += graph.n_atoms

    def cat(parts, dtype):
        if not parts:
            return torch.zeros(0, dtype=dtype)
        return torch.as_tensor(np.concatenate(parts), dtype=dtype)

    return GraphBatch(
        ids=[graph.id for graph in graphs],
        species=cat(species, torch.long),
        src=cat(src, torch.long),
        dst=cat(dst, torch.long),
        distance=cat(distance, DTYPE),
        node_graph=cat(node_graph, torch.long),
        n_atoms=torch.as_tensor(n_atoms, dtype=DTYPE),
        targets=torch.as_tensor(targets, dtype=DTYPE),
    )


def rbf_centers(config: NetConfig) -> Tuple[torch.Tensor, float]:
    """Centers uniform on [0, cutoff] and the shared Gaussian width"""
    centers = torch.linspace(0.0, config.cutoff, config.rbf_count, dtype=DTYPE)
    width = config.cutoff / (config.rbf_count - 1) if config.rbf_count > 1 else config.cutoff
    return centers, width


def _rbf(distance: torch.Tensor, config: NetConfig) -> torch.Tensor:
    centers, width = rbf_centers(config)
    return torch.exp(-((distance.unsqueeze(-1) - centers) ** 2) / (2.0 * width**2))


def expand_rbf(distance: float, config: NetConfig) -> np.ndarray:
    """Gaussian radial basis expansion of one distance, values in (0, 1]"""
    if not 0.0 <= distance <= config.cutoff:
        raise DataError(f"distance {distance} outside [0, {config.cutoff}]")
    return _rbf(torch.tensor([distance], dtype=DTYPE), config)[0].numpy()


def shifted_softplus(x: torch.Tensor) -> torch.Tensor:
    return F.softplus(x) - LN2


def variance_from_preactivation(z: torch.Tensor, min_variance: float, scale: float = 1.0) -> torch.Tensor:
    """scale^2 * softplus(z) + min_variance: strictly positive for every z"""
    return scale**2 * F.softplus(z) + min_variance


def _check_finite(tensor: torch.Tensor, layer: str) -> torch.Tensor:
    if not bool(torch.isfinite(tensor).all()):
        raise NumericError("non-finite activation", layer=layer)
    return tensor


def _network(
    flat: torch.Tensor,
    batch: GraphBatch,
    config: NetConfig,
    layout: ParamLayout,
    scaler: TargetScaler,
) -> Tuple[torch.Tensor, torch.Tensor]:
    p = unflatten(flat, layout)
    n_nodes = batch.species.shape[0]

    h = _check_finite(F.embedding(batch.species, p["embedding"]), "embedding")
    rbf = _rbf(batch.distance, config)
    for t in range(config.interaction_steps):
        block = f"interaction{t}"
        filters = F.linear(
            shifted_softplus(F.linear(rbf, p[f"{block}.filter1.weight"], p[f"{block}.filter1.bias"])),
            p[f"{block}.filter2.weight"], p[f"{block}.filter2.bias"],
        )
        messages = h[batch.src] * filters
        aggregated = torch.zeros(n_nodes, h.shape[1], dtype=h.dtype).index_add(0, batch.dst, messages)
        update = F.linear(
            shifted_softplus(F.linear(aggregated, p[f"{block}.update1.weight"], p[f"{block}.update1.bias"])),
            p[f"{block}.update2.weight"], p[f"{block}.update2.bias"],
        )
        h = _check_finite(h + update, block)

    a = h
    for i in range(len(config.hidden_dims)):
        a = shifted_softplus(F.linear(a, p[f"readout{i}.weight"], p[f"readout{i}.bias"]))
    _check_finite(a, "readout")

    n_graphs = batch.n_graphs
    atom_mean = F.linear(a, p["mean_head.weight"], p["mean_head.bias"]).squeeze(-1)
    atom_var = F.linear(a, p["variance_head.weight"]).squeeze(-1)
    summed_mean = torch.zeros(n_graphs, dtype=a.dtype).index_add(0, batch.node_graph, atom_mean)
    z = torch.zeros(n_graphs, dtype=a.dtype).index_add(0, batch.node_graph, atom_var) + p["variance_head.bias"]

    shift = scaler.shift * batch.n_atoms if scaler.per_atom else scaler.shift
    mean = _check_finite(scaler.scale * summed_mean + shift, "mean_head")
    variance = _check_finite(
        variance_from_preactivation(z, config.min_variance, scaler.scale), "variance_head"
    )
    return mean, variance


def init_params(config: NetConfig, seed: int) -> ParamVector:
    """
    Draw initial parameters: weights uniform with variance 1/fan_in, biases
    zero, embeddings unit variance; the variance head starts near softplus = 1
    """
    layout = param_layout(config)
    generator = torch_generator("init", seed)
    flat = torch.zeros(layout.size, dtype=DTYPE)
    for entry in layout.entries:
        view = flat[entry.offset:entry.offset + entry.size]
        if entry.name == "variance_head.bias":
            view.fill_(VARIANCE_BIAS_INIT)
            continue
        if entry.name.endswith(".bias"):
            continue
        bound = math.sqrt(3.0) if entry.name == "embedding" else math.sqrt(3.0 / entry.fan_in)
        if entry.name == "variance_head.weight":
            bound *= VARIANCE_WEIGHT_GAIN
        view.uniform_(-bound, bound, generator=generator)
    return ParamVector(flat, layout)


def forward_batch(
    params: Union[ParamVector, torch.Tensor],
    batch: GraphBatch,
    config: NetConfig,
    scaler: Optional[TargetScaler] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Predicted means and variances (eV, eV^2) for every graph of a batch"""
    flat = params.values if isinstance(params, ParamVector) else params
    return _network(flat, batch, config, param_layout(config), scaler or TargetScaler())


def forward(
    params: ParamVector,
    graph: MolecularGraph,
    config: NetConfig,
    scaler: Optional[TargetScaler] = None,
) -> ProbPrediction:
    """Gaussian prediction for one graph"""
    with torch.no_grad():
        mean, variance = forward_batch(params, collate_graphs([graph], config), config, scaler)
    return ProbPrediction(mean=float(mean[0]), variance=float(variance[0]))


def reverse_gradient(fn: Callable[[torch.Tensor], torch.Tensor], x: Union[float, np.ndarray, torch.Tensor]) -> np.ndarray:
    """Reverse-mode gradient of a scalar function at x"""
    point = torch.as_tensor(x, dtype=DTYPE).detach().clone().requires_grad_(True)
    output = fn(point)
    if output.numel() != 1:
        raise NumericError(f"gradient needs a scalar output, got shape {tuple(output.shape)}")
    (grad,) = torch.autograd.grad(output.reshape(()), point, allow_unused=True)
    if grad is None:
        return np.zeros_like(point.detach().numpy())
    return grad.detach().numpy()


def gradient(
    params: ParamVector,
    graph: MolecularGraph,
    config: NetConfig,
    loss_weights: Union[LossWeights, float],
    scaler: Optional[TargetScaler] = None,
) -> ParamVector:
    """Gradient of the training loss of one labelled graph w.r.t. every parameter"""
    if graph.target is None:
        raise DataError(f"{graph.id}: gradient needs a target")
    weights = loss_weights if isinstance(loss_weights, LossWeights) else LossWeights.from_lambda(loss_weights)
    batch = collate_graphs([graph], config)
    layout = param_layout(config)
    scaler = scaler or TargetScaler()

    def loss(flat: torch.Tensor) -> torch.Tensor:
        mean, variance = _network(flat, batch, config, layout, scaler)
        return interpolated_loss(batch.targets, mean, variance, weights).sum()

    grad = reverse_gradient(loss, params.values)
    return ParamVector(torch.as_tensor(grad, dtype=DTYPE), layout)


@dataclass(frozen=True)
class Checkpoint:
    params: ParamVector
    config: NetConfig
    scaler: TargetScaler
    state: Dict[str, Union[int, float, str, None]]


def save_checkpoint(
    path: Union[str, Path],
    params: ParamVector,
    config: NetConfig,
    scaler: TargetScaler,
    state: Optional[Dict[str, Union[int, float, str, None]]] = None,
) -> Path:
    """Versioned checkpoint: layout, flat parameters, config, scaler, counters"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "layout": params.layout.describe(),
            "params": params.values.detach().clone(),
            "net_config": config.model_dump(mode="json"),
            "scaler": scaler.to_dict(),
            "state": dict(state or {}),
        },
        path,
    )
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
    config = NetConfig.model_validate(payload["net_config"])
    layout = param_layout(config)
    stored = [(name, list(shape)) for name, shape in payload["layout"]]
    if stored != layout.describe():
        raise ConfigError(f"{path}: parameter layout does not match its net config")
    return Checkpoint(
        params=ParamVector(payload["params"].to(DTYPE), layout),
        config=config,
        scaler=TargetScaler.from_dict(payload["scaler"]),
        state=dict(payload["state"]),
    )


def check_config_match(expected: NetConfig, actual: NetConfig, source: str = "checkpoint") -> None:
    """Raise ConfigError naming the first field where two net configs differ"""
    expected_fields = expected.model_dump()
    actual_fields = actual.model_dump()
    for name, value in expected_fields.items():
        if name == "seed":
            continue
        if actual_fields.get(name) != value:
            raise ConfigError(
                f"{source} has {actual_fields.get(name)!r}, expected {value!r}", key=f"net.{name}"
            )

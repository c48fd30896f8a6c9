"""Bias-free transformer decoder over ``(i, j, cls)`` token triples.

Parameters live in a flat ``dict[str, ndarray]``:

    W_E  (vocab, d)           token embedding
    W_P  (3, d)               positional embedding
    blocks.{l}.W_Q/W_K/W_V    (d, heads * d_head), columns grouped by head
    blocks.{l}.W_O            (heads * d_head, d), rows grouped by head
    blocks.{l}.W_in           (d, d_mlp)
    blocks.{l}.W_out          (d_mlp, d)
    W_U  (d, p)               unembedding
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .tensor_engine import Node, Tape, load_tensor, save_tensor

SEQ_LEN = 3
CLS_POS = 2
_CAUSAL = np.tril(np.ones((SEQ_LEN, SEQ_LEN), dtype=bool))

ModelParams = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    out_classes: int
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 1
    d_mlp: int | None = None
    use_layer_norm: bool = False
    causal_mask: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.out_classes < 2 or self.vocab_size < self.out_classes:
            raise ValueError("need vocab_size >= out_classes >= 2")
        if self.d_mlp is None:
            object.__setattr__(self, "d_mlp", 4 * self.d_model)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def for_task(cls, task, **kw) -> "ModelConfig":
        return cls(vocab_size=task.vocab_size, out_classes=task.p, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h, dh = cfg.d_model, cfg.n_heads, cfg.d_head
    shapes: dict[str, tuple[int, ...]] = {"W_E": (cfg.vocab_size, d), "W_P": (SEQ_LEN, d)}
    for l in range(cfg.n_layers):
        for name in ("W_Q", "W_K", "W_V"):
            shapes[f"blocks.{l}.{name}"] = (d, h * dh)
        shapes[f"blocks.{l}.W_O"] = (h * dh, d)
        shapes[f"blocks.{l}.W_in"] = (d, cfg.d_mlp)
        shapes[f"blocks.{l}.W_out"] = (cfg.d_mlp, d)
    shapes["W_U"] = (d, cfg.out_classes)
    return shapes


def zero_params(cfg: ModelConfig) -> ModelParams:
    return {k: np.zeros(s) for k, s in param_shapes(cfg).items()}


def check_params(params: ModelParams, cfg: ModelConfig) -> None:
    for k, s in param_shapes(cfg).items():
        if k not in params:
            raise KeyError(f"missing parameter {k}")
        if params[k].shape != s:
            raise ValueError(f"{k} has shape {params[k].shape}, expected {s}")


def _heads(tape: Tape, x: Node, cfg: ModelConfig) -> list[Node]:
    dh = cfg.d_head
    if cfg.n_heads == 1:
        return [x]
    return [tape.narrow(x, -1, h * dh, (h + 1) * dh) for h in range(cfg.n_heads)]


def _attend(tape: Tape, q: Node, k: Node, v: Node, W_O: Node, cfg: ModelConfig, mask) -> Node:
    """Per-head softmax(q k^T / sqrt(d_head)) v, heads concatenated, then W_O."""
    scale = 1.0 / math.sqrt(cfg.d_head)
    outs = []
    for qh, kh, vh in zip(_heads(tape, q, cfg), _heads(tape, k, cfg), _heads(tape, v, cfg)):
        scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), scale)
        outs.append(tape.matmul(tape.row_softmax(scores, mask), vh))
    z = outs[0] if len(outs) == 1 else tape.concat(outs, axis=-1)
    return tape.matmul(z, W_O)


def _mlp(tape: Tape, X: Node, leaves: dict[str, Node], l: int, cfg: ModelConfig) -> Node:
    Xin = tape.layer_norm(X) if cfg.use_layer_norm else X
    hidden = tape.relu(tape.matmul(Xin, leaves[f"blocks.{l}.W_in"]))
    return tape.add(X, tape.matmul(hidden, leaves[f"blocks.{l}.W_out"]))


def forward_on_tape(tape: Tape, leaves: dict[str, Node], tokens: np.ndarray, cfg: ModelConfig) -> Node:
    """Record the forward pass; returns cls-position logits ``(batch, p)``.

    Layer-0 inputs depend only on (token, position), so the layer-0 residual
    rows and Q/K/V projections are computed once per (token, position) and
    gathered.  Logits read only the cls row, so the last layer queries and
    runs its MLP on that row alone.  Both shortcuts are exact.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] != SEQ_LEN:
        raise ValueError(f"tokens must have shape (batch, {SEQ_LEN}), got {tokens.shape}")
    V = cfg.vocab_size
    if tokens.size and (tokens.min() < 0 or tokens.max() >= V):
        raise IndexError(f"token out of range [0, {V})")
    table = tape.concat(
        [tape.add(leaves["W_E"], tape.embed_gather(leaves["W_P"], np.full(V, pos))) for pos in range(SEQ_LEN)],
        axis=0,
    )  # row pos * V + t = W_E[t] + W_P[pos]
    ids = tokens + V * np.arange(SEQ_LEN)
    cls_ids = ids[:, CLS_POS : CLS_POS + 1]
    causal = _CAUSAL if cfg.causal_mask else None

    X = None
    for l in range(cfg.n_layers):
        last = l == cfg.n_layers - 1
        W = {n: leaves[f"blocks.{l}.{n}"] for n in ("W_Q", "W_K", "W_V", "W_O")}
        if l == 0:
            src = tape.layer_norm(table) if cfg.use_layer_norm else table
            proj = {n: tape.matmul(src, W[n]) for n in ("W_Q", "W_K", "W_V")}
            k = tape.embed_gather(proj["W_K"], ids)
            v = tape.embed_gather(proj["W_V"], ids)
            q = tape.embed_gather(proj["W_Q"], cls_ids if last else ids)
            resid = tape.embed_gather(table, cls_ids if last else ids)
        else:
            src = tape.layer_norm(X) if cfg.use_layer_norm else X
            k = tape.matmul(src, W["W_K"])
            v = tape.matmul(src, W["W_V"])
            q_src = tape.select(src, 1, CLS_POS, keepdims=True) if last else src
            q = tape.matmul(q_src, W["W_Q"])
            resid = tape.select(X, 1, CLS_POS, keepdims=True) if last else X
        # the cls row (last position) sees every position, so it needs no mask
        X = tape.add(resid, _attend(tape, q, k, v, W["W_O"], cfg, None if last else causal))
        X = _mlp(tape, X, leaves, l, cfg)
    final = tape.select(X, 1, 0)
    return tape.matmul(final, leaves["W_U"])


def leaves_for(tape: Tape, params: ModelParams) -> dict[str, Node]:
    return {k: tape.leaf(v, name=k) for k, v in params.items()}


def forward(params: ModelParams, tokens: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    tape = Tape()
    leaves = {k: tape.constant(v) for k, v in params.items()}
    return forward_on_tape(tape, leaves, tokens, cfg).value


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax breaks ties toward the smallest index
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def loss_and_accuracy(
    params: ModelParams, tokens: np.ndarray, labels: np.ndarray, cfg: ModelConfig, chunk: int = 8192
) -> tuple[float, float]:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= cfg.out_classes:
        raise ValueError("label out of range")
    total_loss, correct = 0.0, 0
    for lo in range(0, len(labels), chunk):
        z = forward(params, tokens[lo : lo + chunk], cfg)
        y = labels[lo : lo + chunk]
        zmax = z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
        total_loss += float((lse - z[np.arange(len(y)), y]).sum())
        correct += int(np.count_nonzero(np.argmax(z, axis=1) == y))
    return total_loss / len(labels), correct / len(labels)


def loss_and_grads(
    params: ModelParams, tokens: np.ndarray, labels: np.ndarray, cfg: ModelConfig
) -> tuple[float, float, dict[str, np.ndarray]]:
    """Mean cross-entropy, accuracy and gradients for one batch."""
    tape = Tape()
    leaves = leaves_for(tape, params)
    logits = forward_on_tape(tape, leaves, tokens, cfg)
    loss = tape.cross_entropy_from_logits(logits, labels)
    grads = tape.backward(loss)
    return float(loss.value), accuracy_from_logits(logits.value, labels), grads


def embedding_rows(params: ModelParams, p: int) -> np.ndarray:
    W_E = params["W_E"]
    if p > W_E.shape[0]:
        raise ValueError(f"p={p} exceeds vocabulary size {W_E.shape[0]}")
    return W_E[:p]


def weight_norms(params: ModelParams, n_heads: int = 1) -> tuple[float, float]:
    """(sum of Frobenius norms, sum of squared Frobenius norms) over all matrices.

    Q/K/V projections count as one matrix per head (their column blocks).
    """
    total, total_sq = 0.0, 0.0
    for name, v in params.items():
        mats = [v]
        if n_heads > 1 and name.rsplit(".", 1)[-1] in ("W_Q", "W_K", "W_V"):
            mats = np.split(v, n_heads, axis=1)
        for m in mats:
            sq = float(np.sum(m * m))
            total += math.sqrt(sq)
            total_sq += sq
    return total, total_sq


# ------------------------------------------------------------ checkpoints


def save_checkpoint(
    directory: str | Path, cfg: ModelConfig, params: ModelParams, epoch: int, extra: dict | None = None
) -> Path:
    """Write ``manifest.json`` plus one flat binary tensor per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, value in params.items():
        fname = name.replace(".", "_") + ".bin"
        save_tensor(directory / fname, value)
        files[name] = fname
    manifest = {"config": cfg.to_dict(), "epoch": epoch, "tensors": files, **(extra or {})}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def load_checkpoint(directory: str | Path) -> tuple[ModelConfig, ModelParams, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cfg = ModelConfig(**manifest["config"])
    params = {name: load_tensor(directory / fname) for name, fname in manifest["tensors"].items()}
    check_params(params, cfg)
    return cfg, params, manifest

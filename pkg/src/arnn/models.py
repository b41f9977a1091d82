"""The three networks and their checkpoints.

GruSessionModel: item embedding -> GRU cell -> item-score projection, with
per-lane hidden state that resets at session boundaries.

PnnEncoder: per-field category embeddings (previous item is one more
field), a product layer of all pairwise inner products next to the
concatenated embeddings, then FC -> ReLU -> batch norm producing the
context feature vector; a score projection on top is used only for
pretraining and the standalone baseline.

ArnnModel: both networks as frozen feature extractors (score heads
unused), a trainable merge layer (FC -> ReLU -> batch norm) over the
concatenated features, and a fresh item-score projection.  During merge
training only the merge layers and the encoder's batch-norm scale/shift
receive optimizer updates; the encoder's batch-norm running statistics
keep updating as well.
"""

from __future__ import annotations

import json
import zipfile

import numpy as np

from . import tensor as T
from .data import FieldSchema
from .errors import CheckpointError, SchemaError, VocabularyError

CHECKPOINT_VERSION = 1


class BatchNorm:
    """Batch normalization layer owning scale/shift and running statistics."""

    def __init__(self, dim: int, prefix: str, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = T.Parameter(np.ones(dim), f"{prefix}_gamma")
        self.beta = T.Parameter(np.zeros(dim), f"{prefix}_beta")
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps
        self.prefix = prefix

    def __call__(self, x, training: bool) -> T.Tensor:
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training, momentum=self.momentum, eps=self.eps,
        )

    def parameters(self):
        return [self.gamma, self.beta]

    def state_arrays(self):
        return {
            f"{self.prefix}_running_mean": self.running_mean,
            f"{self.prefix}_running_var": self.running_var,
        }


class GruSessionModel:
    """Gated recurrent session model scoring the next item from history."""

    kind = "gru"

    def __init__(self, n_items: int, hidden_size: int, dropout: float = 0.0,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.n_items = n_items
        self.hidden_size = hidden_size
        self.dropout = dropout
        v, h = n_items, hidden_size

        def p(name, shape):
            return T.Parameter(T.glorot_uniform(shape, rng), f"gru/{name}")

        # input embedding dimension is tied to the hidden size
        self.item_embedding = p("item_embedding", (v, h))
        self.w_update, self.u_update = p("w_update", (h, h)), p("u_update", (h, h))
        self.b_update = T.Parameter(np.zeros(h), "gru/b_update")
        self.w_reset, self.u_reset = p("w_reset", (h, h)), p("u_reset", (h, h))
        self.b_reset = T.Parameter(np.zeros(h), "gru/b_reset")
        self.w_cand, self.u_cand = p("w_cand", (h, h)), p("u_cand", (h, h))
        self.b_cand = T.Parameter(np.zeros(h), "gru/b_cand")
        self.out_weight = p("out_weight", (h, v))
        self.out_bias = T.Parameter(np.zeros(v), "gru/out_bias")
        self.hidden: np.ndarray | None = None

    def parameters(self):
        return [
            self.item_embedding,
            self.w_update, self.u_update, self.b_update,
            self.w_reset, self.u_reset, self.b_reset,
            self.w_cand, self.u_cand, self.b_cand,
            self.out_weight, self.out_bias,
        ]

    def state_arrays(self):
        return {}

    def hyperparameters(self):
        return {"n_items": self.n_items, "hidden_size": self.hidden_size,
                "dropout": self.dropout}

    def reset(self, n_lanes: int) -> None:
        self.hidden = np.zeros((n_lanes, self.hidden_size))

    def step(self, prev_items, boundaries, lane_ids=None) -> T.Tensor:
        """Advance the per-lane hidden state one step and return it.

        Lanes whose boundary flag is set start from a zero hidden state.
        The carried state is detached: gradients do not flow across steps.
        """
        prev_items = np.asarray(prev_items, dtype=np.int64)
        if prev_items.size and prev_items.max() >= self.n_items:
            raise VocabularyError(
                f"item index {int(prev_items.max())} outside vocabulary of {self.n_items}"
            )
        if lane_ids is None:
            lane_ids = np.arange(len(prev_items))
        if self.hidden is None:
            raise RuntimeError("call reset(n_lanes) before stepping")
        h_prev = self.hidden[lane_ids].copy()
        h_prev[np.asarray(boundaries, dtype=bool)] = 0.0
        hp = T.constant(h_prev)
        x = T.embedding(self.item_embedding, prev_items)
        z = T.sigmoid(T.add(T.affine(x, self.w_update, self.b_update),
                            T.matmul(hp, self.u_update)))
        r = T.sigmoid(T.add(T.affine(x, self.w_reset, self.b_reset),
                            T.matmul(hp, self.u_reset)))
        cand = T.tanh(T.add(T.affine(x, self.w_cand, self.b_cand),
                            T.matmul(T.mul(r, hp), self.u_cand)))
        one = T.constant(np.ones_like(h_prev))
        h = T.add(T.mul(T.sub(one, z), hp), T.mul(z, cand))
        self.hidden[lane_ids] = h.data
        return h

    def scores(self, hidden: T.Tensor, training: bool = False,
               rng: np.random.Generator | None = None) -> T.Tensor:
        h = hidden
        if training and self.dropout > 0:
            h = T.dropout(h, self.dropout, rng)
        return T.affine(h, self.out_weight, self.out_bias)


class PnnEncoder:
    """Product-based encoder of (user context, previous item) pairs."""

    kind = "pnn"

    def __init__(self, field_sizes: list[int], field_offsets: list[int],
                 n_items: int, embed_dim: int, context_dim: int,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.field_sizes = list(field_sizes)
        self.field_offsets = list(field_offsets)
        self.n_items = n_items
        self.embed_dim = embed_dim
        self.context_dim = context_dim
        e = embed_dim
        self.field_embeddings = [
            T.Parameter(T.glorot_uniform((size, e), rng), f"pnn/field{i}_embedding")
            for i, size in enumerate(self.field_sizes)
        ]
        self.item_embedding = T.Parameter(
            T.glorot_uniform((n_items, e), rng), "pnn/item_embedding"
        )
        f = self.n_fields
        in_dim = f * e + f * (f - 1) // 2
        self.fc_weight = T.Parameter(T.glorot_uniform((in_dim, context_dim), rng),
                                     "pnn/fc_weight")
        self.fc_bias = T.Parameter(np.zeros(context_dim), "pnn/fc_bias")
        self.bn = BatchNorm(context_dim, "pnn/bn")
        self.score_weight = T.Parameter(T.glorot_uniform((context_dim, n_items), rng),
                                        "pnn/score_weight")
        self.score_bias = T.Parameter(np.zeros(n_items), "pnn/score_bias")

    @classmethod
    def from_schema(cls, schema: FieldSchema, embed_dim: int, context_dim: int,
                    rng: np.random.Generator | None = None) -> "PnnEncoder":
        return cls(schema.field_sizes, schema.offsets, len(schema.item_vocabulary),
                   embed_dim, context_dim, rng)

    @property
    def n_fields(self) -> int:
        # context fields plus the previous-item field
        return len(self.field_sizes) + 1

    def parameters(self):
        return (self.field_embeddings + [self.item_embedding, self.fc_weight,
                self.fc_bias] + self.bn.parameters() +
                [self.score_weight, self.score_bias])

    def state_arrays(self):
        return self.bn.state_arrays()

    def hyperparameters(self):
        return {
            "field_sizes": self.field_sizes,
            "field_offsets": self.field_offsets,
            "n_items": self.n_items,
            "embed_dim": self.embed_dim,
            "context_dim": self.context_dim,
        }

    def _split_contexts(self, contexts) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per field: flat local indices plus bag offsets over the batch."""
        n_fields = len(self.field_sizes)
        flat: list[list[int]] = [[] for _ in range(n_fields)]
        offsets: list[list[int]] = [[0] for _ in range(n_fields)]
        bounds = self.field_offsets + [self.field_offsets[-1] + self.field_sizes[-1]]
        for ctx in contexts:
            counts = [0] * n_fields
            for p in ctx:
                f = np.searchsorted(bounds, p, side="right") - 1
                if not 0 <= f < n_fields:
                    raise SchemaError(f"context position {p} outside the one-hot layout")
                flat[f].append(p - self.field_offsets[f])
                counts[f] += 1
            for f in range(n_fields):
                if counts[f] == 0:
                    raise SchemaError(
                        f"field {f} has no active position and no fallback slot"
                    )
                offsets[f].append(offsets[f][-1] + counts[f])
        return [
            (np.asarray(flat[f], dtype=np.int64), np.asarray(offsets[f], dtype=np.int64))
            for f in range(n_fields)
        ]

    def encode(self, contexts, prev_items, training: bool) -> T.Tensor:
        """Context feature vector from the field embeddings and their products.

        Multi-valued fields average their active category embeddings so each
        field contributes exactly one embedding to the product layer.
        """
        prev_items = np.asarray(prev_items, dtype=np.int64)
        if prev_items.size and prev_items.max() >= self.n_items:
            raise VocabularyError(
                f"item index {int(prev_items.max())} outside vocabulary of {self.n_items}"
            )
        per_field = self._split_contexts(contexts)
        embeds = [
            T.embedding_bag_mean(table, flat, offs)
            for table, (flat, offs) in zip(self.field_embeddings, per_field)
        ]
        embeds.append(T.embedding(self.item_embedding, prev_items))
        linear = T.concat(embeds, axis=1)
        products = T.pairwise_inner(embeds)
        h = T.relu(T.affine(T.concat([linear, products], axis=1),
                            self.fc_weight, self.fc_bias))
        return self.bn(h, training)

    def scores(self, encoded: T.Tensor) -> T.Tensor:
        return T.affine(encoded, self.score_weight, self.score_bias)


class ArnnModel:
    """Frozen GRU and context encoder merged by a trainable scoring head."""

    kind = "arnn"

    def __init__(self, pnn: PnnEncoder, gru: GruSessionModel, merge_dim: int,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        if pnn.n_items != gru.n_items:
            raise CheckpointError(
                f"vocabulary mismatch: encoder has {pnn.n_items} items, "
                f"session model has {gru.n_items}"
            )
        self.pnn = pnn
        self.gru = gru
        self.merge_dim = merge_dim
        self.n_items = gru.n_items
        for p in pnn.parameters():
            p.frozen = True
        # scale/shift of the encoder's batch norm stays trainable
        pnn.bn.gamma.frozen = False
        pnn.bn.beta.frozen = False
        for p in gru.parameters():
            p.frozen = True
        in_dim = pnn.context_dim + gru.hidden_size
        self.merge_weight = T.Parameter(T.glorot_uniform((in_dim, merge_dim), rng),
                                        "merge/weight")
        self.merge_bias = T.Parameter(np.zeros(merge_dim), "merge/bias")
        self.bn = BatchNorm(merge_dim, "merge/bn")
        self.out_weight = T.Parameter(T.glorot_uniform((merge_dim, self.n_items), rng),
                                      "merge/out_weight")
        self.out_bias = T.Parameter(np.zeros(self.n_items), "merge/out_bias")

    def parameters(self):
        return (self.pnn.parameters() + self.gru.parameters() +
                [self.merge_weight, self.merge_bias] + self.bn.parameters() +
                [self.out_weight, self.out_bias])

    def state_arrays(self):
        out = dict(self.pnn.state_arrays())
        out.update(self.gru.state_arrays())
        out.update(self.bn.state_arrays())
        return out

    def hyperparameters(self):
        return {
            "merge_dim": self.merge_dim,
            "pnn": self.pnn.hyperparameters(),
            "gru": self.gru.hyperparameters(),
        }

    def reset(self, n_lanes: int) -> None:
        self.gru.reset(n_lanes)

    def step_scores(self, prev_items, contexts, boundaries, lane_ids=None,
                    training: bool = False) -> T.Tensor:
        c = self.pnn.encode(contexts, prev_items, training)
        h = self.gru.step(prev_items, boundaries, lane_ids)
        m = self.bn(T.relu(T.affine(T.concat([c, h], axis=1),
                                    self.merge_weight, self.merge_bias)), training)
        return T.affine(m, self.out_weight, self.out_bias)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, schema_hash: str) -> None:
    """Write the model to an .npz archive with a JSON meta member.

    Stores every parameter (frozen ones included) and the batch-norm
    running statistics, so frozen blocks round-trip byte-identically.
    """
    arrays = {}
    for p in model.parameters():
        arrays[f"param/{p.name}"] = p.value
    for name, arr in model.state_arrays().items():
        arrays[f"state/{name}"] = arr
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "schema_hash": schema_hash,
        "hyperparameters": model.hyperparameters(),
    }
    arrays["meta"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    np.savez(path, **arrays)


def read_checkpoint_meta(path) -> dict:
    with np.load(path) as zf:
        return json.loads(bytes(zf["meta"]))


def read_raw_tensor_bytes(path) -> dict[str, bytes]:
    """Raw serialized bytes of every stored array, keyed by member name.

    Lets callers compare blocks for bit-identity without relying on zip
    metadata.
    """
    out = {}
    with zipfile.ZipFile(path) as zf:
        for name in zf.namelist():
            out[name.removesuffix(".npy")] = zf.read(name)
    return out


def _fill(model, stored: dict, path) -> None:
    for p in model.parameters():
        key = f"param/{p.name}"
        if key not in stored:
            raise CheckpointError(f"{path}: missing tensor {p.name!r}")
        arr = stored[key]
        if arr.shape != p.value.shape:
            raise CheckpointError(
                f"{path}: tensor {p.name!r} has shape {arr.shape}, "
                f"expected {p.value.shape}"
            )
        p.value[...] = arr
    for name, target in model.state_arrays().items():
        key = f"state/{name}"
        if key not in stored:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if stored[key].shape != target.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {stored[key].shape}, "
                f"expected {target.shape}"
            )
        target[...] = stored[key]


def load_checkpoint(path, expected_schema_hash: str | None = None,
                    expected_kind: str | None = None):
    """Rebuild a model from a checkpoint, failing loudly on any mismatch."""
    with np.load(path) as zf:
        stored = {k: zf[k] for k in zf.files}
    meta = json.loads(bytes(stored.pop("meta")))
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format {meta.get('format_version')}")
    if expected_schema_hash is not None and meta["schema_hash"] != expected_schema_hash:
        raise CheckpointError(
            f"{path}: schema hash {meta['schema_hash'][:12]}... does not match "
            f"the dataset's {expected_schema_hash[:12]}..."
        )
    kind = meta["kind"]
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"{path}: checkpoint is {kind!r}, expected {expected_kind!r}")
    hp = meta["hyperparameters"]
    if kind == "gru":
        model = GruSessionModel(hp["n_items"], hp["hidden_size"], hp["dropout"])
    elif kind == "pnn":
        model = PnnEncoder(hp["field_sizes"], hp["field_offsets"], hp["n_items"],
                           hp["embed_dim"], hp["context_dim"])
    elif kind == "arnn":
        pnn = PnnEncoder(hp["pnn"]["field_sizes"], hp["pnn"]["field_offsets"],
                         hp["pnn"]["n_items"], hp["pnn"]["embed_dim"],
                         hp["pnn"]["context_dim"])
        gru = GruSessionModel(hp["gru"]["n_items"], hp["gru"]["hidden_size"],
                              hp["gru"]["dropout"])
        model = ArnnModel(pnn, gru, hp["merge_dim"])
    else:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    _fill(model, stored, path)
    return model

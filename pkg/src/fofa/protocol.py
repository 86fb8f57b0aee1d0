"""Cloud/device coordination: requests, one-pass assembly, wire formats and cost accounting.

Uplink request (little-endian)::

    b"FOFQ" | u16 version | u16 L | u16 d_m | 16-byte opaque device token
    | 2L float32 structure logits | d_m float32 latent interest

Downlink model::

    b"FOFA" | u16 version | u16 L | ceil(L/8) bitmap bytes (bit l of byte l//8, LSB first)
    | per kept block: u16 tensor count, per tensor u8 rank, rank x u32 extents, float32 data
    | u32 CRC32 of everything before

Downlink candidates: u32 count, then per candidate u32 item id and d float32.
"""

from __future__ import annotations

import hashlib
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .backbone import BackboneConfig, block_layout, block_param_count, encode, flops_count
from .controller import controller_flops, harden
from .mapper import as_block_weights, extractor_flops, generate_weights, heads_flops

REQUEST_MAGIC = b"FOFQ"
MODEL_MAGIC = b"FOFA"
PROTOCOL_VERSION = 1
MODEL_VERSION = 1
TOKEN_BYTES = 16
REQUEST_HEADER = struct.Struct("<4sHHH16s")
REQUEST_HEADER_BYTES = REQUEST_HEADER.size  # 26
FLOAT_BYTES = 4

# Field kinds of the uplink message. Nothing here can carry an item or user id.
REQUEST_SCHEMA = (
    ("magic", "const-bytes"),
    ("version", "u16-version"),
    ("n_blocks", "u16-shape"),
    ("latent_width", "u16-shape"),
    ("device_token", "opaque-bytes"),
    ("beta", "f32-vector"),
    ("h", "f32-vector"),
)
ID_FIELD_KINDS = ("u32-id", "u64-id", "item-id", "user-id", "id-list")


class ProtocolError(ValueError):
    pass


class VersionMismatch(ProtocolError):
    pass


class ChecksumError(ProtocolError):
    pass


class TruncatedPayload(ProtocolError):
    pass


def request_size(n_blocks: int, d_m: int) -> int:
    return REQUEST_HEADER_BYTES + FLOAT_BYTES * (2 * n_blocks + d_m)


def device_token(device_id) -> bytes:
    """Opaque 16-byte routing token; the raw device id never goes on the wire."""
    return hashlib.blake2b(str(device_id).encode(), digest_size=TOKEN_BYTES).digest()


# ---------------------------------------------------------------------------
# uplink


@dataclass(frozen=True)
class DeviceRequest:
    token: bytes
    beta: np.ndarray  # (L, 2) float32
    h: np.ndarray  # (d_m,) float32
    version: int = PROTOCOL_VERSION

    def to_bytes(self) -> bytes:
        beta = np.asarray(self.beta, dtype="<f4")
        h = np.asarray(self.h, dtype="<f4").ravel()
        head = REQUEST_HEADER.pack(REQUEST_MAGIC, self.version, beta.shape[0], h.size, self.token)
        return head + beta.tobytes() + h.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "DeviceRequest":
        if len(blob) < REQUEST_HEADER_BYTES:
            raise TruncatedPayload("request shorter than its header")
        magic, version, n_blocks, d_m, token = REQUEST_HEADER.unpack_from(blob)
        if magic != REQUEST_MAGIC:
            raise ProtocolError("bad request magic")
        if len(blob) != request_size(n_blocks, d_m):
            raise ProtocolError(f"request is {len(blob)} bytes, expected {request_size(n_blocks, d_m)}")
        floats = np.frombuffer(blob, dtype="<f4", offset=REQUEST_HEADER_BYTES)
        beta = floats[:2 * n_blocks].reshape(n_blocks, 2).astype(np.float32)
        return cls(token, beta, floats[2 * n_blocks:].astype(np.float32), version)


def device_prepare_request(model, device_id, seq) -> DeviceRequest:
    """On-device structure and interest extraction from the local history."""
    seq = np.asarray(seq, dtype=np.int64).ravel()
    if seq.size == 0:
        raise ag.ContractViolation("device history is empty")
    seq = seq[-model.cfg.backbone.max_seq_len:]
    with ag.no_grad():
        logits = model.structure(seq[None])
        h = model.latent(seq[None], logits.beta)
    return DeviceRequest(device_token(device_id), logits.beta.data[0].astype(np.float32),
                         h.data[0].astype(np.float32))


# ---------------------------------------------------------------------------
# assembled model and its wire format


@dataclass
class CostReport:
    params: int = 0
    param_bytes: int = 0
    inference_flops: int = 0
    uplink_bytes: int = 0
    downlink_bytes: int = 0
    candidate_bytes: int = 0
    assembly_flops: int = 0
    device_flops: int = 0
    backward_calls: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AssembledModel:
    bitmap: np.ndarray  # (L,) bool
    blocks: dict[int, list[np.ndarray]]  # kept block index -> tensors in layout order
    cfg: BackboneConfig | None = None
    cost: CostReport = field(default_factory=CostReport)
    version: int = MODEL_VERSION

    @property
    def n_blocks(self) -> int:
        return len(self.bitmap)

    def gate(self) -> np.ndarray:
        keep = np.asarray(self.bitmap, dtype=bool)
        return np.stack([keep, ~keep], axis=-1).astype(np.float32)

    def block_weights(self) -> list[dict[str, ag.Tensor] | None]:
        if self.cfg is None:
            raise ProtocolError("assembled model has no backbone config to name its tensors")
        names = [name for name, _ in block_layout(self.cfg)]
        out: list = [None] * self.n_blocks
        for index, tensors in self.blocks.items():
            out[index] = {n: ag.Tensor(t) for n, t in zip(names, tensors)}
        return out

    def encode(self, shared, seq, mask=None) -> ag.Tensor:
        """Deploy-assembled representations on the device; skipped blocks never run."""
        seq = np.asarray(seq)
        if seq.ndim == 1:
            seq = seq[None]
        with ag.no_grad():
            return encode(self.cfg, self.block_weights(), shared, seq, self.gate(), "deploy-assembled", mask)


def serialize_model(model: AssembledModel) -> bytes:
    n = model.n_blocks
    bits = np.zeros(8 * math.ceil(n / 8), dtype=np.uint8)
    bits[:n] = np.asarray(model.bitmap, dtype=bool)
    parts = [MODEL_MAGIC, struct.pack("<HH", model.version, n), np.packbits(bits, bitorder="little").tobytes()]
    kept = np.flatnonzero(model.bitmap)
    if set(kept.tolist()) != set(model.blocks):
        raise ProtocolError("block payload does not match the bitmap")
    for index in kept:
        tensors = model.blocks[int(index)]
        parts.append(struct.pack("<H", len(tensors)))
        for t in tensors:
            arr = np.ascontiguousarray(t, dtype="<f4")
            parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
            parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize_model(blob: bytes, cfg: BackboneConfig | None = None) -> AssembledModel:
    minimum = len(MODEL_MAGIC) + 4 + 4
    if len(blob) < minimum:
        raise TruncatedPayload(f"model payload of {len(blob)} bytes is shorter than the minimum {minimum}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("model checksum mismatch")
    if body[:4] != MODEL_MAGIC:
        raise ProtocolError("bad model magic")
    version, n = struct.unpack_from("<HH", body, 4)
    if version != MODEL_VERSION:
        raise VersionMismatch(f"unknown model version {version}")
    pos = 8
    nbytes = math.ceil(n / 8)
    if pos + nbytes > len(body):
        raise TruncatedPayload("bitmap truncated")
    bitmap = np.unpackbits(np.frombuffer(body, np.uint8, nbytes, pos), bitorder="little")[:n].astype(bool)
    pos += nbytes
    blocks: dict[int, list[np.ndarray]] = {}
    try:
        for index in np.flatnonzero(bitmap):
            (count,) = struct.unpack_from("<H", body, pos)
            pos += 2
            tensors = []
            for _ in range(count):
                (rank,) = struct.unpack_from("<B", body, pos)
                pos += 1
                shape = struct.unpack_from(f"<{rank}I", body, pos)
                pos += 4 * rank
                size = int(np.prod(shape, dtype=np.int64))
                if pos + 4 * size > len(body):
                    raise TruncatedPayload("tensor data truncated")
                tensors.append(np.frombuffer(body, "<f4", size, pos).reshape(shape).astype(np.float32))
                pos += 4 * size
            blocks[int(index)] = tensors
    except struct.error as e:
        raise TruncatedPayload(f"model payload truncated: {e}") from e
    if pos != len(body):
        raise ProtocolError(f"{len(body) - pos} unexpected trailing bytes in model payload")
    return AssembledModel(bitmap, blocks, cfg, version=version)


# ---------------------------------------------------------------------------
# cloud side


def _block_tensors(cfg: BackboneConfig, weights: dict[str, ag.Tensor]) -> list[np.ndarray]:
    out = []
    for name, shape in block_layout(cfg):
        arr = np.asarray(weights[name].data, dtype=np.float32)
        out.append(arr.reshape(shape))
    return out


def cloud_assemble(request: DeviceRequest, model) -> AssembledModel:
    """One forward pass of the mapper heads for the kept blocks; no gradient work.

    A pure function of the request and the (read-only) model weights, so any
    number of requests may run concurrently.
    """
    if request.version != PROTOCOL_VERSION:
        raise VersionMismatch(f"request version {request.version} != {PROTOCOL_VERSION}")
    cfg = model.cfg.backbone
    beta = np.asarray(request.beta, dtype=np.float32)
    if beta.shape != (cfg.n_blocks, 2):
        raise ProtocolError(f"request carries {beta.shape[0]} blocks, model has {cfg.n_blocks}")
    h = np.asarray(request.h, dtype=np.float32)
    if not np.all(np.isfinite(h)):
        raise ag.NumericFault("latent interest is not finite")
    kept = harden(beta)[:, 0] == 1
    before = ag.counters()["backward_calls"]
    with ag.no_grad():
        if model.mapper is not None:
            flat = generate_weights(model.mapper, ag.Tensor(h[None]), kept)
            generated = as_block_weights(cfg, flat)
            blocks = {int(i): [a[0] for a in _block_tensors_batched(cfg, generated[i])] for i in np.flatnonzero(kept)}
            assembly = heads_flops(model.mapper, int(kept.sum()))
        else:
            blocks = {int(i): _block_tensors(cfg, model.blocks[i]) for i in np.flatnonzero(kept)}
            assembly = 0
    backward_calls = ag.counters()["backward_calls"] - before
    per_block = block_param_count(cfg).per_block
    n_kept = int(kept.sum())
    assembled = AssembledModel(kept, blocks, cfg)
    assembled.cost = CostReport(
        params=per_block * n_kept, param_bytes=FLOAT_BYTES * per_block * n_kept,
        inference_flops=flops_count(cfg, kept), assembly_flops=assembly, backward_calls=backward_calls,
        uplink_bytes=request_size(cfg.n_blocks, h.size))
    return assembled


def _block_tensors_batched(cfg: BackboneConfig, weights: dict[str, ag.Tensor]) -> list[np.ndarray]:
    out = []
    for name, shape in block_layout(cfg):
        arr = np.asarray(weights[name].data, dtype=np.float32)
        out.append(arr.reshape((arr.shape[0],) + tuple(shape)))
    return out


def fit_candidate_projection(model, sequences, ridge: float = 1e-2) -> np.ndarray:
    """Ridge map R (d_m, d) from latent interest to the device model's last representation.

    The cloud scores its catalog with ``E @ (h R)`` to choose which candidate
    embeddings to ship, using only what the device uploaded.
    """
    from .data import pad_right

    bb = model.cfg.backbone
    inputs, mask = pad_right(sequences, bb.max_seq_len)
    with ag.no_grad():
        res = model.forward(inputs, mask, deploy=True)
    lengths = mask.sum(axis=1)
    target = res.rep.data[np.arange(len(inputs)), lengths - 1].astype(np.float64)
    h = res.latent.data.astype(np.float64)
    gram = h.T @ h + ridge * np.eye(h.shape[1])
    return np.linalg.solve(gram, h.T @ target).astype(np.float32)


def select_candidates(model, projection: np.ndarray, h: np.ndarray, n: int) -> np.ndarray:
    scores = model.shared.item_emb.data @ (np.asarray(h, np.float32) @ projection)
    n = min(n, scores.size)
    top = np.argpartition(-scores, n - 1)[:n]
    return top[np.lexsort((top, -scores[top]))]


def candidate_payload(model, items: np.ndarray) -> bytes:
    emb = np.asarray(model.shared.item_emb.data[items], dtype="<f4")
    rows = [struct.pack("<I", len(items))]
    for item, vec in zip(items, emb):
        rows.append(struct.pack("<I", int(item)) + vec.tobytes())
    return b"".join(rows)


def parse_candidates(blob: bytes, d: int) -> tuple[np.ndarray, np.ndarray]:
    (count,) = struct.unpack_from("<I", blob)
    rec = np.dtype([("id", "<u4"), ("emb", "<f4", (d,))])
    arr = np.frombuffer(blob, rec, count, 4)
    return arr["id"].astype(np.int64), arr["emb"].astype(np.float32)


# ---------------------------------------------------------------------------
# privacy


@dataclass
class AuditResult:
    passed: bool
    findings: list[str]


def privacy_audit(message: bytes, catalog_size: int | None = None, schema=REQUEST_SCHEMA) -> AuditResult:
    """Check an uplink message: id-free schema, fixed size, nothing smuggled after the floats."""
    findings = []
    for name, kind in schema:
        if kind in ID_FIELD_KINDS:
            findings.append(f"schema field {name!r} has identifier kind {kind!r}")
    if len(message) < REQUEST_HEADER_BYTES:
        return AuditResult(False, findings + ["message shorter than the request header"])
    magic, version, n_blocks, d_m, _ = REQUEST_HEADER.unpack_from(message)
    if magic != REQUEST_MAGIC:
        findings.append("unknown message magic")
    if version != PROTOCOL_VERSION:
        findings.append(f"unknown protocol version {version}")
    expected = request_size(n_blocks, d_m)
    if len(message) != expected:
        findings.append(f"length {len(message)} != fixed size {expected}; payload size depends on content")
        extra = message[expected:] if len(message) > expected else b""
        if len(extra) >= 4:
            ids = np.frombuffer(extra[: len(extra) // 4 * 4], dtype="<u4")
            limit = catalog_size if catalog_size is not None else 2 ** 31
            if np.all(ids < limit):
                findings.append(f"{ids.size} trailing words decode as plausible item ids")
    else:
        floats = np.frombuffer(message, dtype="<f4", offset=REQUEST_HEADER_BYTES)
        if not np.all(np.isfinite(floats)):
            findings.append("non-finite values in the float payload")
    return AuditResult(not findings, findings)


def fixed_size_audit(messages) -> AuditResult:
    sizes = sorted({len(m) for m in messages})
    if len(sizes) > 1:
        return AuditResult(False, [f"uplink sizes vary across devices: {sizes}"])
    return AuditResult(True, [])


# ---------------------------------------------------------------------------
# costs


def finetune_epoch_flops(cfg: BackboneConfig, seq_len: int, backward_factor: int = 3) -> int:
    """FLOPs of one fine-tune epoch over a device's next-item pairs.

    Each prefix of the sequence is one training example: a full-catalog
    forward pass, plus backward at ``backward_factor - 1`` times the forward.
    """
    return sum(backward_factor * flops_count(cfg, None, seq_len=t) for t in range(1, seq_len))


def adaptation_cost_report(model, seq, epochs: int = 1) -> dict:
    """Forward-only adaptation versus fine-tuning, in FLOPs and transmitted bytes.

    Runs the instrumented request/assembly path on ``seq`` and counts the
    backward passes it performed (there should be none).
    """
    cfg = model.cfg.backbone
    seq = np.asarray(seq)[-cfg.max_seq_len:]
    t = len(seq)
    before = ag.counters()["backward_calls"]
    request = device_prepare_request(model, "cost-probe", seq)
    assembled = cloud_assemble(request, model)
    backward = ag.counters()["backward_calls"] - before
    kept = assembled.bitmap
    device = controller_flops(model.controller, t) if model.controller is not None else 0
    device += extractor_flops(model.mapper, t) if model.mapper is not None else 0
    cloud = assembled.cost.assembly_flops
    finetune = epochs * finetune_epoch_flops(cfg, t)
    full = AssembledModel(np.ones(cfg.n_blocks, bool),
                          {i: [np.zeros(s, np.float32) for _, s in block_layout(cfg)] for i in range(cfg.n_blocks)}, cfg)
    assembled_bytes = len(serialize_model(assembled))
    full_bytes = len(serialize_model(full))
    adapt = device + cloud
    return {"seq_len": t, "kept_blocks": int(kept.sum()), "adaptation_flops": adapt, "device_flops": device,
            "cloud_flops": cloud, "finetune_flops": finetune, "flops_ratio": finetune / max(adapt, 1),
            "assembled_bytes": assembled_bytes, "full_bytes": full_bytes,
            "bytes_ratio": full_bytes / assembled_bytes, "backward_passes": backward}

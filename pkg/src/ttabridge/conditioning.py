"""Query embeddings: external encoder adapters, the EMB1 store, synthetic encoders."""

from __future__ import annotations

import math
import shutil
import struct
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

MODALITIES = ("image", "text", "prior_generated", "null")
EMB_MAGIC = b"EMB1"
EMB_VERSION = 1
UNIT_NORM_TOL = 1e-5


class EmbeddingFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class AdapterUnavailableError(RuntimeError):
    pass


@dataclass
class QueryEmbedding:
    vector: np.ndarray
    modality: str
    source_id: str = ""

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("embedding has non-finite entries")

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    def normalized(self) -> "QueryEmbedding":
        return QueryEmbedding(l2_normalize(self.vector), self.modality, self.source_id)

    def is_unit(self, tol: float = UNIT_NORM_TOL) -> bool:
        return abs(float(np.linalg.norm(self.vector)) - 1.0) <= tol


def l2_normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot normalize a zero vector")
    return v / norm


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


# ---------------------------------------------------------------------------
# EMB1 store
#
# header : "EMB1" u32 version u32 dim u32 count u32 name_len name(utf-8)
# record : u32 id_len id(utf-8) u8 modality f32[dim]   (all little-endian)


@dataclass
class EmbeddingStore:
    dim: int
    encoder_name: str = "unknown"
    version: str = ""
    records: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)

    def add(self, example_id: str, emb: QueryEmbedding) -> None:
        if emb.dim != self.dim:
            raise EmbeddingFormatError(f"embedding for {example_id!r} has dim {emb.dim}, store dim is {self.dim}")
        key = (example_id, emb.modality)
        if key in self.records:
            raise ValueError(f"duplicate record {key}")
        self.records[key] = emb.vector.copy()

    def get(self, example_id: str, modality: str) -> QueryEmbedding:
        try:
            vec = self.records[(example_id, modality)]
        except KeyError:
            raise KeyError(f"no {modality} embedding stored for {example_id!r}") from None
        return QueryEmbedding(vec, modality, example_id)

    def ids(self, modality: str | None = None) -> list[str]:
        seen = dict.fromkeys(i for i, m in self.records if modality is None or m == modality)
        return list(seen)

    def matrix(self, ids: Iterable[str], modality: str) -> np.ndarray:
        return np.stack([self.records[(i, modality)] for i in ids])

    def __len__(self):
        return len(self.records)

    def save(self, path) -> None:
        name = self.encoder_name.encode()
        if self.version:
            name = f"{self.encoder_name}@{self.version}".encode()
        chunks = [EMB_MAGIC, struct.pack("<IIII", EMB_VERSION, self.dim, len(self.records), len(name)), name]
        for (ex_id, modality), vec in self.records.items():
            if vec.shape != (self.dim,):
                raise EmbeddingFormatError(f"record {ex_id!r} has shape {vec.shape}, expected ({self.dim},)")
            raw_id = ex_id.encode()
            chunks.append(struct.pack("<I", len(raw_id)))
            chunks.append(raw_id)
            chunks.append(struct.pack("<B", MODALITIES.index(modality)))
            chunks.append(vec.astype("<f4").tobytes())
        Path(path).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        raw = Path(path).read_bytes()
        if raw[:4] != EMB_MAGIC:
            raise EmbeddingFormatError(f"bad magic {raw[:4]!r}", 0)
        if len(raw) < 20:
            raise EmbeddingFormatError("truncated header", len(raw))
        version, dim, count, name_len = struct.unpack_from("<IIII", raw, 4)
        if version != EMB_VERSION:
            raise EmbeddingFormatError(f"unsupported version {version}", 4)
        if dim == 0:
            raise EmbeddingFormatError("dimension must be positive", 8)
        pos = 20
        name = raw[pos : pos + name_len].decode()
        pos += name_len
        encoder, _, enc_version = name.partition("@")
        store = cls(dim=dim, encoder_name=encoder, version=enc_version)
        rec_bytes = 4 * dim
        for _ in range(count):
            if pos + 4 > len(raw):
                raise EmbeddingFormatError("truncated record header", pos)
            (id_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            end = pos + id_len + 1 + rec_bytes
            if end > len(raw):
                raise EmbeddingFormatError("truncated record", pos)
            ex_id = raw[pos : pos + id_len].decode()
            pos += id_len
            tag = raw[pos]
            if tag >= len(MODALITIES):
                raise EmbeddingFormatError(f"unknown modality tag {tag}", pos)
            pos += 1
            vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=pos).astype(np.float64)
            pos += rec_bytes
            store.records[(ex_id, MODALITIES[tag])] = vec
        if pos != len(raw):
            raise EmbeddingFormatError(f"{len(raw) - pos} trailing bytes", pos)
        return store


# ---------------------------------------------------------------------------
# external encoders


@dataclass
class ExternalEncoder:
    """Out-of-process encoder.

    ``command`` is an argv list; ``{modality}``, ``{input}`` and ``{output}``
    are substituted. The process must write a one-record EMB1 file to
    ``{output}``. Results are cached per input so repeated queries return
    identical vectors.
    """

    command: tuple[str, ...] | None
    dim: int
    name: str = "clip"
    unit_norm: bool = True
    timeout: float = 300.0
    _cache: dict = field(default_factory=dict, repr=False)

    def _run(self, modality: str, payload: str) -> QueryEmbedding:
        key = (modality, payload)
        if key in self._cache:
            return self._cache[key]
        if not self.command or shutil.which(self.command[0]) is None:
            exe = self.command[0] if self.command else "<unset>"
            raise AdapterUnavailableError(
                f"encoder adapter {self.name!r} unavailable (executable {exe!r} not found); "
                "precompute embeddings into an EMB1 file and load it with EmbeddingStore.load instead"
            )
        with tempfile.TemporaryDirectory() as tmp:
            inp = Path(tmp) / "input.txt"
            out = Path(tmp) / "out.emb"
            inp.write_text(payload)
            argv = [
                a.replace("{modality}", modality).replace("{input}", str(inp)).replace("{output}", str(out))
                for a in self.command
            ]
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            if proc.returncode != 0 or not out.exists():
                raise AdapterUnavailableError(f"encoder adapter {self.name!r} failed: {proc.stderr.strip()}")
            store = EmbeddingStore.load(out)
        if store.dim != self.dim:
            raise EmbeddingFormatError(f"adapter {self.name!r} returned dim {store.dim}, expected {self.dim}")
        vec = next(iter(store.records.values()))
        emb = QueryEmbedding(vec, modality, payload)
        if self.unit_norm:
            emb = emb.normalized()
        self._cache[key] = emb
        return emb

    def encode_image(self, image_path) -> QueryEmbedding:
        return self._run("image", str(Path(image_path).resolve()))

    def encode_text(self, text: str) -> QueryEmbedding:
        if not text or not text.strip():
            raise ValueError("refusing to encode empty text")
        return self._run("text", text)


# ---------------------------------------------------------------------------
# synthetic encoder pair with an engineered modality gap


@dataclass(frozen=True)
class ModalityGapSpec:
    dim: int = 32
    n_classes: int = 8
    seed: int = 0
    offset: float = 1.5
    rotation: float = 1.2  # radians
    jitter: float = 0.05
    # weight of the per-example audio attributes carried by image embeddings
    attribute_scale: float = 0.15

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("embedding dimension must be >= 2")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")

    def expected_cosine(self) -> float:
        """Text/image cosine of a class anchor for zero jitter and attributes."""
        return math.cos(self.rotation) / math.sqrt(1.0 + self.offset**2)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class SyntheticEncoders:
    """Deterministic image and text encoders for the toy world.

    Image: unit(anchor[c] + attribute terms + jitter noise).
    Text:  unit(R anchor[c] + offset), where R rotates every vector by exactly
    ``rotation`` radians (exact for even ``dim``) and ``offset`` is orthogonal to all anchors and
    rotated anchors, so cos(text, image) = cos(rotation) / sqrt(1 + offset^2)
    for noiseless image embeddings.
    """

    def __init__(self, spec: ModalityGapSpec, labels: list[str] | None = None):
        self.spec = spec
        d = spec.dim
        rng = np.random.default_rng(spec.seed)
        self.anchors = l2_normalize(rng.standard_normal((spec.n_classes, d)))
        basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
        rot = np.eye(d)
        for i in range(d // 2):
            c, s = math.cos(spec.rotation), math.sin(spec.rotation)
            rot[2 * i : 2 * i + 2, 2 * i : 2 * i + 2] = [[c, -s], [s, c]]
        self.rotation_matrix = basis @ rot @ basis.T
        rotated = self.anchors @ self.rotation_matrix.T
        span = np.concatenate([self.anchors, rotated])
        q, _ = np.linalg.qr(span.T)
        u = rng.standard_normal(d)
        if q.shape[1] < d:
            u = u - q @ (q.T @ u)
        self.offset_vector = spec.offset * l2_normalize(u)
        self.attribute_dirs = l2_normalize(rng.standard_normal((2, d)))
        self.labels = list(labels) if labels is not None else [f"class{i}" for i in range(spec.n_classes)]
        if len(self.labels) != spec.n_classes:
            raise ValueError("one label per class is required")

    def class_index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown label {label!r}") from None

    def encode_image(self, descriptor: dict) -> QueryEmbedding:
        """``descriptor``: {"label", "attributes": [f, a], "seed"} from the synthetic dataset."""
        c = self.class_index(descriptor["label"])
        attrs = np.asarray(descriptor.get("attributes", [0.0, 0.0]), dtype=np.float64)
        v = self.anchors[c] + self.spec.attribute_scale * attrs @ self.attribute_dirs
        if self.spec.jitter > 0:
            rng = np.random.default_rng(int(descriptor.get("seed", 0)))
            v = v + self.spec.jitter * rng.standard_normal(self.spec.dim) / math.sqrt(self.spec.dim)
        return QueryEmbedding(l2_normalize(v), "image", descriptor.get("id", descriptor["label"]))

    def encode_text(self, text: str) -> QueryEmbedding:
        if not text or not text.strip():
            raise ValueError("refusing to encode empty text")
        label = self._label_from_text(text)
        c = self.class_index(label)
        v = self.rotation_matrix @ self.anchors[c] + self.offset_vector
        return QueryEmbedding(l2_normalize(v), "text", text)

    def _label_from_text(self, text: str) -> str:
        for prefix in ("a photo of ", "the sound of "):
            if text.startswith(prefix):
                return text[len(prefix) :]
        return text


def synthetic_encoders(spec: ModalityGapSpec, labels: list[str] | None = None):
    enc = SyntheticEncoders(spec, labels)
    return enc.encode_image, enc.encode_text


def null_embedding(model) -> QueryEmbedding:
    """The learnable unconditional vector of a diffusion model."""
    vec = model.null_embedding.detach().cpu().double().numpy()
    return QueryEmbedding(vec, "null", "null")


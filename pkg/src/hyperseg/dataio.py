"""Dataset manifests, rasters, and the binary container formats.

All binary formats are little-endian with a 4-byte magic and a u16 version:

  FeatureFile  "HGFT" v1: C, Hf, Wf as u32, then C*Hf*Wf float32 values,
               channel-major then row-major. Widened to float64 on load.
  GraphBundle  "HGGB" v1: partition plan, then per partition the node
               origins, spatial adjacency triplets, optional k-NN triplets,
               and optional hypergraph (incidence triplets + edge weights).
  Checkpoint   "HGCK" v1: a JSON metadata blob plus named float64/int64
               arrays (parameters, optimizer moments, RNG state lives in
               the JSON part).

Manifests are JSON; unknown fields are ignored for forward compatibility.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, ManifestError, ShapeMismatchError
from .graphs import Hypergraph, PartitionPlan, SparseAffinityGraph
from .sparse import SparseMatrix
from .superpixel import UNLABELED

FEATURE_MAGIC = b"HGFT"
BUNDLE_MAGIC = b"HGGB"
CHECKPOINT_MAGIC = b"HGCK"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# manifests

@dataclass
class DatasetRecord:
    image: Path
    annotation: Path | None
    weak: Path | None
    features: Path | None


@dataclass
class DatasetManifest:
    records: list[DatasetRecord]
    n_classes: int = 21
    ignore_index: int = 255

    def __len__(self) -> int:
        return len(self.records)


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ManifestError("manifest root must be a JSON object")

    images = raw.get("images")
    if not isinstance(images, list) or not images:
        raise ManifestError("field 'images' must be a non-empty list")
    n = len(images)

    def optional_list(field: str) -> list:
        values = raw.get(field)
        if values is None:
            return [None] * n
        if not isinstance(values, list) or len(values) != n:
            raise ManifestError(f"field '{field}' must be a list of length {n}")
        return values

    annotations = optional_list("annotations")
    weak = optional_list("weak")
    features = optional_list("features")

    n_classes = raw.get("classes", 21)
    ignore_index = raw.get("ignore_index", 255)
    if not isinstance(n_classes, int) or n_classes < 2:
        raise ManifestError("field 'classes' must be an integer >= 2")

    base = path.parent

    def resolve(field: str, value, required: bool) -> Path | None:
        if value is None:
            return None
        p = base / value
        if required and not p.is_file():
            raise ManifestError(f"field '{field}': unresolvable path {p}")
        return p

    records = []
    for i in range(n):
        records.append(DatasetRecord(
            image=resolve("images", images[i], required=True),
            annotation=resolve("annotations", annotations[i], required=False),
            weak=resolve("weak", weak[i], required=False),
            features=resolve("features", features[i], required=False),
        ))
    return DatasetManifest(records, n_classes, ignore_index)


def write_manifest(path: str | Path, images: list[str],
                   annotations: list[str] | None = None,
                   weak: list[str] | None = None,
                   features: list[str] | None = None,
                   n_classes: int = 21, ignore_index: int = 255) -> None:
    doc: dict = {"classes": n_classes, "ignore_index": ignore_index, "images": images}
    if annotations is not None:
        doc["annotations"] = annotations
    if weak is not None:
        doc["weak"] = weak
    if features is not None:
        doc["features"] = features
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# rasters

def load_image(path: str | Path) -> np.ndarray:
    """Decode an image to an (H, W, 3) uint8 RGB array."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise FormatError(f"cannot decode image {path}: {e}") from e


def save_label_png(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ShapeMismatchError("label values must fit 8 bits")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG")


def load_annotation(path: str | Path, kind: str, n_classes: int = 21) -> np.ndarray:
    """Decode an 8-bit single-channel class raster.

    Values must lie in [0, n_classes) or be 255, which maps to UNLABELED for
    weak signals ('scribble'/'click') and stays the ignore index 255 for
    dense ground truth.
    """
    if kind not in ("dense", "scribble", "click"):
        raise ValueError(f"unknown annotation kind: {kind}")
    try:
        with Image.open(path) as img:
            # palette images hold class indices directly; keep them raw
            if img.mode not in ("L", "P"):
                img = img.convert("L")
            arr = np.asarray(img, dtype=np.int64)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise FormatError(f"cannot decode annotation {path}: {e}") from e
    bad = (arr != 255) & ((arr < 0) | (arr >= n_classes))
    if bad.any():
        value = int(arr[bad][0])
        raise FormatError(f"annotation {path}: out-of-range value {value}")
    if kind == "dense":
        return arr
    return np.where(arr == 255, UNLABELED, arr)


def voc_palette(n_classes: int = 21) -> list[list[int]]:
    """Standard VOC color table (bit-reversal construction)."""
    palette = []
    for cid in range(n_classes):
        r = g = b = 0
        c = cid
        for shift in range(8):
            r |= ((c >> 0) & 1) << (7 - shift)
            g |= ((c >> 1) & 1) << (7 - shift)
            b |= ((c >> 2) & 1) << (7 - shift)
            c >>= 3
        palette.append([r, g, b])
    return palette


def export_pseudo_labels(maps: list[tuple[str, np.ndarray]], out_dir: str | Path,
                         n_classes: int = 21) -> list[Path]:
    """Write one 8-bit class-index PNG per (stem, label map) plus a palette
    sidecar mapping indices to the VOC colors."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for stem, labels in maps:
        labels = np.asarray(labels)
        if labels.min() < 0 or labels.max() >= n_classes:
            raise ShapeMismatchError(f"{stem}: class index outside [0, {n_classes})")
        p = out_dir / f"{stem}.png"
        save_label_png(p, labels)
        written.append(p)
    sidecar = out_dir / "palette.json"
    sidecar.write_text(json.dumps(voc_palette(n_classes)) + "\n")
    written.append(sidecar)
    return written


# ---------------------------------------------------------------------------
# binary helpers

def _need(buf: io.BufferedIOBase, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def _write_array(buf, arr: np.ndarray, dtype: str) -> None:
    buf.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


def _read_array(buf, count: int, dtype: str) -> np.ndarray:
    dt = np.dtype(dtype).newbyteorder("<")
    raw = _need(buf, count * dt.itemsize)
    return np.frombuffer(raw, dtype=dt).astype(np.dtype(dtype))


def _check_header(buf, magic: bytes) -> int:
    got = _need(buf, 4)
    if got != magic:
        raise FormatError(f"bad magic: expected {magic!r}, got {got!r}")
    (version,) = struct.unpack("<H", _need(buf, 2))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    return version


# ---------------------------------------------------------------------------
# feature files

def save_feature_file(path: str | Path, featmap: np.ndarray) -> None:
    featmap = np.asarray(featmap, dtype=np.float64)
    if featmap.ndim != 3:
        raise ShapeMismatchError("feature map must be C x Hf x Wf")
    if not np.all(np.isfinite(featmap)):
        raise ShapeMismatchError("feature map contains non-finite values")
    c, hf, wf = featmap.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<HIII", FORMAT_VERSION, c, hf, wf))
        _write_array(f, featmap, "float32")


def load_feature_file(path: str | Path) -> np.ndarray:
    """Load a feature file, widening the float32 payload to float64."""
    with open(path, "rb") as f:
        _check_header(f, FEATURE_MAGIC)
        c, hf, wf = struct.unpack("<III", _need(f, 12))
        data = _read_array(f, c * hf * wf, "float32").astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"feature file {path} has non-finite values")
    return data.reshape(c, hf, wf)


# ---------------------------------------------------------------------------
# graph bundles

@dataclass
class GraphBundle:
    plan: PartitionPlan
    spatial: list[SparseAffinityGraph]
    knn: list[SparseAffinityGraph | None]
    hypergraphs: list[Hypergraph | None]


def _write_adjacency(f, m: SparseMatrix) -> None:
    r, c, v = m.triplets()
    f.write(struct.pack("<IIQ", m.rows, m.cols, r.size))
    _write_array(f, r, "uint32")
    _write_array(f, c, "uint32")
    _write_array(f, v, "float64")


def _read_adjacency(f) -> SparseMatrix:
    rows, cols, nnz = struct.unpack("<IIQ", _need(f, 16))
    r = _read_array(f, nnz, "uint32").astype(np.int64)
    c = _read_array(f, nnz, "uint32").astype(np.int64)
    v = _read_array(f, nnz, "float64")
    return SparseMatrix.from_triplets(rows, cols, r, c, v)


def save_graph_bundle(path: str | Path, bundle: GraphBundle) -> None:
    plan = bundle.plan
    with open(path, "wb") as f:
        f.write(BUNDLE_MAGIC)
        f.write(struct.pack("<HIIIII", FORMAT_VERSION, plan.n_images,
                            plan.n_superpixels, plan.max_nodes,
                            plan.n_graphs, plan.images_per_graph))
        _write_array(f, plan.assignment, "uint32")
        f.write(struct.pack("<I", len(bundle.spatial)))
        for spatial, knn, hg in zip(bundle.spatial, bundle.knn, bundle.hypergraphs):
            f.write(struct.pack("<I", spatial.n_nodes))
            _write_array(f, spatial.node_origins, "uint32")
            _write_adjacency(f, spatial.adjacency)
            f.write(struct.pack("<B", knn is not None))
            if knn is not None:
                _write_adjacency(f, knn.adjacency)
            f.write(struct.pack("<B", hg is not None))
            if hg is not None:
                f.write(struct.pack("<I", hg.n_edges))
                _write_adjacency(f, hg.incidence)
                _write_array(f, hg.edge_weights, "float64")


def load_graph_bundle(path: str | Path) -> GraphBundle:
    with open(path, "rb") as f:
        _check_header(f, BUNDLE_MAGIC)
        n_images, n_sp, max_nodes, n_graphs, per = struct.unpack("<IIIII", _need(f, 20))
        assignment = _read_array(f, n_images, "uint32").astype(np.int64)
        plan = PartitionPlan(n_images, n_sp, max_nodes, n_graphs, per, assignment)
        (n_parts,) = struct.unpack("<I", _need(f, 4))
        spatial, knn, hypers = [], [], []
        for _ in range(n_parts):
            (n_nodes,) = struct.unpack("<I", _need(f, 4))
            origins = _read_array(f, n_nodes * 2, "uint32").astype(np.int64).reshape(n_nodes, 2)
            spatial.append(SparseAffinityGraph(_read_adjacency(f), origins))
            (has_knn,) = struct.unpack("<B", _need(f, 1))
            knn.append(SparseAffinityGraph(_read_adjacency(f), origins.copy())
                       if has_knn else None)
            (has_hg,) = struct.unpack("<B", _need(f, 1))
            if has_hg:
                (n_edges,) = struct.unpack("<I", _need(f, 4))
                incidence = _read_adjacency(f)
                weights = _read_array(f, n_edges, "float64")
                edge_deg = incidence.transpose().row_sums()
                node_deg = incidence.matmul_dense(weights[:, None]).ravel()
                hypers.append(Hypergraph(incidence, weights, node_deg, edge_deg))
            else:
                hypers.append(None)
    return GraphBundle(plan, spatial, knn, hypers)


# ---------------------------------------------------------------------------
# checkpoints

_DTYPE_CODES = {"float64": 0, "int64": 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path: str | Path, meta: dict,
                    arrays: dict[str, np.ndarray]) -> None:
    """Write a checkpoint: JSON metadata plus named arrays."""
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            dtype = "int64" if np.issubdtype(arr.dtype, np.integer) else "float64"
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", _DTYPE_CODES[dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            _write_array(f, arr, dtype)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        _check_header(f, CHECKPOINT_MAGIC)
        (blob_len,) = struct.unpack("<I", _need(f, 4))
        meta = json.loads(_need(f, blob_len).decode("utf-8"))
        (n_arrays,) = struct.unpack("<I", _need(f, 4))
        arrays = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<H", _need(f, 2))
            name = _need(f, name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", _need(f, 2))
            if code not in _CODE_DTYPES:
                raise FormatError(f"unknown dtype code {code}")
            shape = struct.unpack(f"<{ndim}I", _need(f, 4 * ndim))
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            arrays[name] = _read_array(f, count, _CODE_DTYPES[code]).reshape(shape)
    return meta, arrays

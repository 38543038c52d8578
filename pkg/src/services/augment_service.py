"""Relation-preserving positive views.

Two operations make a view: a visual one that only recolours and blurs the
entity patches, and a layout one that additionally resizes one edge of
every bounding box about its centre and resamples the patch to match. A
layout draw that makes any two boxes overlap is rejected and redrawn.
"""

from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from src.core.exceptions import AugmentationFailedError
from src.core.rng import SplitMix64, derive_seed
from src.models.augment import MAX_RATIO, MIN_RATIO, AugmentOp, AugmentRecord, EntityResize, VisualParams
from src.models.document import PAGE_SIZE, BBox, Document, Entity
from src.models.relation import RelationKind, RelationMatrix
from src.services.corpus_service import gt_relation_matrix, labelled_kinds
from src.services.synth_service import Role, Vocabulary
from src.utils.logging import get_logger

logger = get_logger(__name__)

MAX_LAYOUT_ATTEMPTS = 8
BRIGHTNESS = 0.1
CONTRAST = 0.2
SATURATION = 0.2
HUE = 0.1
MAX_BLUR = 1.0
GREY_AXIS = np.ones(3) / np.sqrt(3.0)


def _hue_rotation(angle: float) -> np.ndarray:
    """Rotation about the grey axis; keeps the channel mean of every pixel."""
    k = np.array([[0.0, -GREY_AXIS[2], GREY_AXIS[1]], [GREY_AXIS[2], 0.0, -GREY_AXIS[0]],
                  [-GREY_AXIS[1], GREY_AXIS[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def apply_visual(patch: np.ndarray, params: VisualParams) -> np.ndarray:
    """Brightness, contrast, saturation, hue and blur on one P x P x 3 patch, clamped to [0, 1]."""
    out = patch + params.brightness
    if params.contrast:
        centre = out.mean()
        out = (out - centre) * (1.0 + params.contrast) + centre
    if params.saturation or params.hue:
        grey = out.mean(axis=-1, keepdims=True)
        chroma = (out - grey) * (1.0 + params.saturation)
        out = grey + chroma @ _hue_rotation(params.hue).T
    if params.blur_sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=(params.blur_sigma, params.blur_sigma, 0.0), mode="nearest")
    return np.clip(out, 0.0, 1.0)


def sample_visual_params(rng: SplitMix64) -> VisualParams:
    draws = rng.uniform(5)
    return VisualParams(
        brightness=BRIGHTNESS * (2.0 * draws[0] - 1.0),
        contrast=CONTRAST * (2.0 * draws[1] - 1.0),
        saturation=SATURATION * (2.0 * draws[2] - 1.0),
        hue=HUE * (2.0 * draws[3] - 1.0),
        blur_sigma=MAX_BLUR * draws[4],
    )


def _with_patches(doc: Document, entities: List[Entity]) -> Document:
    return doc.model_copy(update={"entities": tuple(entities)})


def recolour(doc: Document, params: VisualParams) -> Document:
    entities = [
        entity.model_copy(update={"patch": tuple(float(v) for v in apply_visual(entity.patch_array(), params).reshape(-1))})
        for entity in doc.entities
    ]
    return _with_patches(doc, entities)


def augment_visual(doc: Document, seed: int) -> Tuple[Document, AugmentRecord]:
    """Change only the patches."""
    params = sample_visual_params(SplitMix64(derive_seed(seed, "visual")))
    return recolour(doc, params), AugmentRecord(op=AugmentOp.VISUAL, visual=params)


def resize_bbox(bbox: BBox, edge: str, ratio: float) -> BBox:
    """Scale one edge about the centre on the integer grid, clamped to the page."""
    if edge == "width":
        low, size = bbox.x0, bbox.width
    else:
        low, size = bbox.y0, bbox.height
    new_size = max(1, min(PAGE_SIZE, int(round(size * ratio))))
    start = low + (size - new_size) // 2
    start = min(max(start, 0), PAGE_SIZE - new_size)
    if edge == "width":
        return BBox(x0=start, y0=bbox.y0, x1=start + new_size, y1=bbox.y1)
    return BBox(x0=bbox.x0, y0=start, x1=bbox.x1, y1=start + new_size)


def resample_patch(patch: np.ndarray, edge: str, ratio: float) -> np.ndarray:
    """Bilinear resampling of the crop after stretching one axis by ``ratio`` about its centre."""
    side = patch.shape[0]
    centre = (side - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(side, dtype=np.float64), np.arange(side, dtype=np.float64), indexing="ij")
    if edge == "width":
        cols = centre + (cols - centre) / ratio
    else:
        rows = centre + (rows - centre) / ratio
    channels = [
        ndimage.map_coordinates(patch[:, :, c], [rows, cols], order=1, mode="nearest") for c in range(patch.shape[2])
    ]
    return np.clip(np.stack(channels, axis=-1), 0.0, 1.0)


def _has_overlap(boxes: List[BBox]) -> bool:
    for i, a in enumerate(boxes):
        for b in boxes[i + 1 :]:
            if a.overlaps(b):
                return True
    return False


def draw_layout(doc: Document, rng: SplitMix64) -> List[EntityResize]:
    resizes = []
    for entity in doc.entities:
        edge = "width" if rng.coin() else "height"
        ratio = float(rng.uniform(1, MIN_RATIO, MAX_RATIO)[0])
        resizes.append(EntityResize(entity_id=entity.id, edge=edge, ratio=ratio))
    return resizes


def apply_layout(doc: Document, resizes: List[EntityResize]) -> Optional[Document]:
    """The resized document, or None when two boxes would overlap."""
    by_id = {r.entity_id: r for r in resizes}
    boxes = [resize_bbox(e.bbox, by_id[e.id].edge, by_id[e.id].ratio) for e in doc.entities]
    if _has_overlap(boxes):
        return None
    entities = []
    for entity, box in zip(doc.entities, boxes):
        resize = by_id[entity.id]
        patch = resample_patch(entity.patch_array(), resize.edge, resize.ratio)
        entities.append(entity.model_copy(update={"bbox": box, "patch": tuple(float(v) for v in patch.reshape(-1))}))
    return _with_patches(doc, entities)


def augment_layout(doc: Document, seed: int) -> Tuple[Document, AugmentRecord]:
    """Resize one edge of every box, then apply a visual change.

    Raises ``AugmentationFailedError`` after ``MAX_LAYOUT_ATTEMPTS`` rejected draws.
    """
    for attempt in range(1, MAX_LAYOUT_ATTEMPTS + 1):
        resizes = draw_layout(doc, SplitMix64(derive_seed(seed, "layout", attempt)))
        resized = apply_layout(doc, resizes)
        if resized is None:
            logger.debug(f"Layout draw {attempt} rejected for {doc.doc_id or '<unnamed>'}")
            continue
        params = sample_visual_params(SplitMix64(derive_seed(seed, "visual")))
        record = AugmentRecord(op=AugmentOp.VISUAL_LAYOUT, visual=params, layout=tuple(resizes), attempts=attempt)
        return recolour(resized, params), record
    raise AugmentationFailedError(
        f"{MAX_LAYOUT_ATTEMPTS} layout draws overlapped for {doc.doc_id or '<unnamed>'}", MAX_LAYOUT_ATTEMPTS
    )


def sample_positive_view(doc: Document, seed: int) -> Tuple[Document, AugmentRecord]:
    """Fair coin between the two operations; a failed layout view falls back to a visual one."""
    if SplitMix64(derive_seed(seed, "op")).coin():
        try:
            return augment_layout(doc, seed)
        except AugmentationFailedError as e:
            logger.warning(f"Falling back to a visual view: {e}")
            view, record = augment_visual(doc, seed)
            return view, record.model_copy(update={"attempts": e.attempts, "fallback": True})
    return augment_visual(doc, seed)


def _components(adjacency: np.ndarray) -> np.ndarray:
    _, labels = connected_components(csr_matrix(adjacency), directed=False)
    return labels


def derive_layout_relations(doc: Document, kind: RelationKind, vocab: Vocabulary) -> RelationMatrix:
    """Relation matrix recomputed from the geometry; kv also needs the token roles of the corpus vocabulary."""
    kind = RelationKind.parse(kind)
    entities = doc.by_id()
    n = len(entities)
    boxes = [e.bbox for e in entities]
    if kind in (RelationKind.ROW, RelationKind.COL):
        overlapping = BBox.y_overlaps if kind == RelationKind.ROW else BBox.x_overlaps
        adjacency = np.array([[overlapping(a, b) for b in boxes] for a in boxes])
        labels = _components(adjacency)
        return RelationMatrix.from_decisions(kind, labels[:, None] == labels[None, :])

    if kind == RelationKind.KV:
        roles = [vocab.role_of(e.tokens[0]) for e in entities]
        claims = {}
        for i, key in enumerate(boxes):
            if roles[i] != Role.KEY:
                continue
            best = None
            for j, value in enumerate(boxes):
                if roles[j] != Role.VALUE:
                    continue
                if value.x0 >= key.x1 and key.y_overlaps(value):
                    gap = value.x0 - key.x1
                elif value.y0 >= key.y1 and key.x_overlaps(value):
                    gap = value.y0 - key.y1
                else:
                    continue
                if best is None or (gap, j) < best:
                    best = (gap, j)
            if best is not None and (best[1] not in claims or best[0] < claims[best[1]][0]):
                claims[best[1]] = (best[0], i)
        decisions = np.zeros((n, n), dtype=bool)
        for value_id, (_, key_id) in claims.items():
            decisions[key_id, value_id] = True
        return RelationMatrix.from_decisions(kind, decisions)

    adjacency = np.array([[a.x_overlaps(b) for b in boxes] for a in boxes])
    labels = _components(adjacency)
    left_edge = {label: min(boxes[i].x0 for i in range(n) if labels[i] == label) for label in set(labels)}
    sequence = sorted(range(n), key=lambda i: (left_edge[labels[i]], boxes[i].y0, i))
    rank = np.empty(n, dtype=np.int64)
    rank[np.array(sequence)] = np.arange(n)
    return RelationMatrix.from_decisions(kind, rank[:, None] < rank[None, :])


def verify_relation_preserved(orig: Document, aug: Document, vocab: Vocabulary) -> bool:
    """True when every relation the document carries is unchanged, by label and by geometry."""
    if orig.n_entities != aug.n_entities:
        return False
    for kind in labelled_kinds(orig):
        if kind not in labelled_kinds(aug) or gt_relation_matrix(orig, kind) != gt_relation_matrix(aug, kind):
            return False
        if derive_layout_relations(orig, kind, vocab) != derive_layout_relations(aug, kind, vocab):
            return False
    return True

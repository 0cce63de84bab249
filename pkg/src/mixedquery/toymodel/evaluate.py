"""Evaluate a trained toy model on annotated images."""

from __future__ import annotations

from ..metrics import ConfusionAccumulator, MetricReport, mask_ap, panoptic_quality, rasterize_labels
from .inference import instance_segments, panoptic_segments, predict, semantic_map
from .model import ToyModel
from .synthetic import synthesize_image


def evaluate(params, model_cfg, vocabulary, annotations, panoptic_threshold: float = 0.5) -> MetricReport:
    """Mask AP over all queries, PQ on merged panoptic output, mIoU on the semantic map."""
    model = ToyModel(model_cfg)
    inst, pano, gts = [], [], []
    acc = ConfusionAccumulator(ignore_label="")
    for ann in annotations:
        image = synthesize_image(ann.image_id, ann, model_cfg.grid, model_cfg.in_channels)
        preds = predict(model, params, image, vocabulary, ann.image_size, score_threshold=0.0)
        inst.append(instance_segments(preds))
        pano.append(panoptic_segments(preds, panoptic_threshold))
        gts.append(ann)
        gt_map = rasterize_labels(ann, ann.image_size)
        acc.update(semantic_map(model, params, image, vocabulary, ann.image_size), gt_map)
    ap, per_t, _ = mask_ap(inst, gts)
    pq, sq, rq, per_class = panoptic_quality(pano, gts)
    miou, _ = acc.result()
    return MetricReport(pq=pq, sq=sq, rq=rq, mask_ap=ap, ap_per_threshold=per_t, miou=miou, per_class=per_class)

"""Sequential recommendation over long histories with segment-compressing
expert tokens: layouts, masks, a small numpy decoder, cached inference,
cost model, data tools, evaluation and attribution."""

from .seqcore import Dataset, Event, SegmentationPlan, TokenLayout, build_plan, layout_sequence, parse_plan

__all__ = ["Dataset", "Event", "SegmentationPlan", "TokenLayout", "build_plan", "layout_sequence", "parse_plan"]

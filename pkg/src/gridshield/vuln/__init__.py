"""Vulnerability analysis: region partitions, line/bag vulnerability indices,
incoherence and eigenvalue certificates, classification, tree decomposition."""

from .partition import RegionPartition, build_partition
from .indices import (LineVIResult, LocalBoundary, line_vi, line_vi_lp,
                      line_vi_socp, local_boundary, local_incoherence,
                      lower_eigenvalue, mutual_incoherence, vi_model)
from .treedec import (BagVIResult, TreeDecomposition, bag_vi, classify_bags,
                      tree_decompose, validate_decomposition)
from .report import VulnerabilityReport, classify, report_csv_rows, report_geojson

__all__ = [
    "RegionPartition", "build_partition", "LineVIResult", "LocalBoundary",
    "line_vi", "line_vi_lp", "line_vi_socp", "local_boundary",
    "local_incoherence", "lower_eigenvalue", "mutual_incoherence", "vi_model",
    "BagVIResult", "TreeDecomposition", "bag_vi", "classify_bags",
    "tree_decompose", "validate_decomposition", "VulnerabilityReport",
    "classify", "report_csv_rows", "report_geojson",
]

"""Patient movement between hospitals, reconstructed from stay records."""
from __future__ import annotations

__version__ = "0.1.0"

from .episodes import (TransferDetector, TransferEvent, TransferKind, classify_gap,
                       count_hospitalization_stats, detect_transfers)
from .netmat import (GraphMetrics, NodeSet, TransferMatrix, TransferNetwork, build_nodes,
                     compute_graph_metrics, derive_matrix, export_matrix, split_by_state)
from .overlaps import (FourDigitCode, OverlapClass, OverlapDetector, OverlapGroup, classify_pair,
                       detect_overlap_groups, four_digit_code, icd_chapter)
from .records import StayRecord, ValidationReport, group_by_patient, parse_records
from .stats import (avg_daily_census, build_histogram, build_state_matrix,
                    interstate_percentages, summarize_states)
from .synthgen import GeneratorConfig, generate_cohort, inject_overlaps

__all__ = [
    "FourDigitCode", "GeneratorConfig", "GraphMetrics", "NodeSet", "OverlapClass",
    "OverlapDetector", "OverlapGroup", "StayRecord", "TransferDetector", "TransferEvent",
    "TransferKind", "TransferMatrix", "TransferNetwork", "ValidationReport",
    "avg_daily_census", "build_histogram", "build_nodes", "build_state_matrix",
    "classify_gap", "classify_pair", "compute_graph_metrics", "count_hospitalization_stats",
    "derive_matrix", "detect_overlap_groups", "detect_transfers", "export_matrix",
    "four_digit_code", "generate_cohort", "group_by_patient", "icd_chapter",
    "inject_overlaps", "interstate_percentages", "parse_records", "split_by_state",
    "summarize_states",
]
